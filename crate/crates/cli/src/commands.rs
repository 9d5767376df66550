//! Subcommand implementations. Each reads its inputs, runs one pipeline
//! stage and writes its outputs into `--out`.

use std::path::{Path, PathBuf};

use finer_core::client::{CacheMode, ModelClient, ResponseCache};
use finer_core::dpo::{build_dpo, category_distribution, trainer_export, ImageCategory};
use finer_core::evaluate::{ask_binary, evaluate_all, random_baselines, write_report, BinaryRecord, EvalRecord, Report};
use finer_core::jsonl::{load_jsonl, save_json, save_jsonl, Record};
use finer_core::mcq::{benchmark_manifest, build_benchmark, BinaryQuery, BuildOptions, LlmWh, Mcq, OfflineWh, WhTemplater};
use finer_core::neg_gen::{generate_negative_sets, run_filter_loop, FilterPolicy, LlmProposer, ModelDiscriminator};
use finer_core::prompts::PromptSet;
use finer_core::sg_extract::{audit_sample, import_structured, run_extraction, CaptionRecord, RejectRecord, SgEndpoints, StructuredAnnotation};
use finer_core::types::{EntityKind, NegativeSet, SceneGraph};
use finer_core::Seed;
use serde_json::json;
use tracing::info;

use crate::config::{parse_settings, LoadedConfig, PolicyConfig};
use crate::error::{Categorize, CliError};
use crate::manifest::RunManifest;

/// Shared state for one invocation.
pub struct Context {
    pub config: Option<LoadedConfig>,
    pub seed: Seed,
    pub replay: bool,
    pub cache_dir: Option<PathBuf>,
    client: Option<ModelClient>,
}

impl Context {
    pub fn new(config: Option<LoadedConfig>, seed: Option<u64>, replay: bool, cache_dir: Option<PathBuf>) -> Self {
        let seed = Seed::new(seed.or(config.as_ref().and_then(|c| c.config.seed)).unwrap_or(0));
        let cache_dir = cache_dir.or_else(|| {
            let c = config.as_ref()?;
            c.config.paths.cache_dir.as_deref().map(|p| c.resolve(p))
        });
        Context { config, seed, replay, cache_dir, client: None }
    }

    pub fn loaded(&self) -> Result<&LoadedConfig, CliError> {
        self.config.as_ref().ok_or_else(|| CliError::config("this subcommand needs --config"))
    }

    pub fn prompts(&self) -> Result<PromptSet, CliError> {
        let c = self.loaded()?;
        match &c.config.paths.prompts_dir {
            Some(dir) => PromptSet::with_overrides(&c.resolve(dir)).or_config(),
            None => Ok(PromptSet::default()),
        }
    }

    /// Model client over every configured endpoint. Replay runs attach no
    /// backends, so any cache miss fails instead of calling out.
    pub fn client(&mut self) -> Result<&ModelClient, CliError> {
        if self.client.is_none() {
            let c = self.loaded()?;
            let mode = if self.replay { CacheMode::ReplayOnly } else { CacheMode::ReadWrite };
            let mut b = ModelClient::builder().mode(mode).options(c.config.client.options());
            for e in &c.config.endpoints {
                let backend = if self.replay { None } else { e.backend().map_err(CliError::config)? };
                b = b.endpoint(e.spec(), backend);
            }
            match &self.cache_dir {
                Some(dir) => b = b.cache(ResponseCache::open(dir).or_config()?),
                None if self.replay => return Err(CliError::config("--replay needs a cache directory")),
                None => {}
            }
            self.client = Some(b.build().or_config()?);
        }
        Ok(self.client.as_ref().expect("client was just built"))
    }

    /// Fails a replay run that missed the cache.
    pub fn finish(&self, manifest: &mut RunManifest) -> Result<(), CliError> {
        let Some(client) = &self.client else { return Ok(()) };
        let stats = client.stats();
        manifest.client = stats;
        if self.replay && stats.cache.misses > 0 {
            return Err(CliError::pipeline(format!("replay missed {} cache entries", stats.cache.misses)));
        }
        Ok(())
    }
}

fn load<T: Record>(path: &Path, manifest: &mut RunManifest) -> Result<Vec<T>, CliError> {
    let v = load_jsonl(path).or_input()?;
    manifest.add_input(path).or_input()?;
    Ok(v)
}

fn save<T: Record>(records: &[T], dir: &Path, name: &str) -> Result<(), CliError> {
    save_jsonl(records, dir.join(name)).or_pipeline()
}

fn save_value<T: serde::Serialize + ?Sized>(value: &T, dir: &Path, name: &str) -> Result<(), CliError> {
    save_json(value, dir.join(name)).or_pipeline()
}

pub fn extract_sg(
    ctx: &mut Context,
    m: &mut RunManifest,
    captions: Option<&Path>,
    structured: Option<&Path>,
    out: &Path,
    audit_n: usize,
) -> Result<(), CliError> {
    match (captions, structured) {
        (Some(path), None) => {
            let captions: Vec<CaptionRecord> = load(path, m)?;
            let prompts = ctx.prompts()?;
            let cfg = &ctx.loaded()?.config;
            let endpoints = SgEndpoints { llm: cfg.roles.llm.clone(), mllm: cfg.roles.mllm.clone() };
            m.endpoints = vec![endpoints.llm.clone(), endpoints.mllm.clone()];
            let seed = ctx.seed;
            let run = run_extraction(ctx.client()?, &prompts, &endpoints, &captions);
            info!(graphs = run.graphs.len(), rejects = run.rejects.len(), "scene graphs extracted");
            save(&run.graphs, out, "scene_graphs.jsonl")?;
            save(&run.audit, out, "relation_audit.jsonl")?;
            save(&run.rejects, out, "sg_rejects.jsonl")?;
            if audit_n > 0 {
                save(&audit_sample(&run.audit, audit_n, seed), out, "relation_audit_sample.jsonl")?;
            }
        }
        (None, Some(path)) => {
            let anns: Vec<StructuredAnnotation> = load(path, m)?;
            let mut graphs = Vec::new();
            let mut rejects = Vec::new();
            for a in &anns {
                let (g, skipped) = import_structured(a);
                rejects.extend(skipped.into_iter().map(|reason| RejectRecord {
                    image_id: a.image_id.clone(),
                    stage: "import".into(),
                    reason,
                    raw_output: String::new(),
                }));
                graphs.push(g);
            }
            save(&graphs, out, "scene_graphs.jsonl")?;
            save(&rejects, out, "sg_rejects.jsonl")?;
        }
        _ => return Err(CliError::input("pass exactly one of --captions or --structured")),
    }
    Ok(())
}

/// `--policy` is a preset name or a TOML file shaped like `[policy]`.
pub fn resolve_policy(ctx: &Context, flag: Option<&str>) -> Result<FilterPolicy, CliError> {
    match flag {
        None => match &ctx.config {
            Some(c) => c.config.policy.resolve(),
            None => Ok(FilterPolicy::C_SG),
        },
        Some(name) => {
            if let Some(p) = FilterPolicy::preset(name) {
                return Ok(p);
            }
            let path = Path::new(name);
            let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("policy {name}: {e}")))?;
            let pc: PolicyConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("policy {name}: {e}")))?;
            pc.resolve()
        }
    }
}

pub fn neg_gen(
    ctx: &mut Context,
    m: &mut RunManifest,
    sg: &Path,
    out: &Path,
    policy: Option<&str>,
    endpoint: Option<&str>,
) -> Result<(), CliError> {
    let graphs: Vec<SceneGraph> = load(sg, m)?;
    let policy = resolve_policy(ctx, policy)?;
    let prompts = ctx.prompts()?;
    let cfg = &ctx.loaded()?.config;
    let llm = cfg.roles.llm.clone();
    let disc = endpoint.unwrap_or(cfg.discriminator()).to_string();
    m.endpoints = vec![llm.clone(), disc.clone()];
    let seed = ctx.seed;
    let client = ctx.client()?;
    client.endpoint_spec(&disc).or_config()?;
    let proposer = LlmProposer { client, prompts: &prompts, endpoint: llm };
    let discriminator = ModelDiscriminator { client, endpoint: disc, seed };
    let (sets, mut failures) = generate_negative_sets(&graphs, &EntityKind::ALL, &proposer);
    let (sets, mut audit) = run_filter_loop(&graphs, sets, &policy, &proposer, &discriminator);
    failures.append(&mut audit.failures);
    info!(sets = sets.len(), rounds = audit.rounds, failures = failures.len(), "negatives filtered");
    save::<NegativeSet>(&sets, out, "negative_sets.jsonl")?;
    save(&audit.results, out, "discriminator_audit.jsonl")?;
    let summary = json!({
        "schema": "filter_summary.v1",
        "policy": policy,
        "rounds": audit.rounds,
        "per_level": audit.per_level,
        "events": audit.events,
        "failures": failures,
    });
    save_value(&summary, out, "filter_summary.json")
}

pub struct McqArgs<'a> {
    pub sg: &'a Path,
    pub neg: &'a Path,
    pub out: &'a Path,
    pub settings: Option<&'a str>,
    pub rotations: bool,
    pub offline_wh: bool,
}

pub fn build_mcq(ctx: &mut Context, m: &mut RunManifest, a: McqArgs<'_>) -> Result<(), CliError> {
    let graphs: Vec<SceneGraph> = load(a.sg, m)?;
    let sets: Vec<NegativeSet> = load(a.neg, m)?;
    let mcq_cfg = ctx.config.as_ref().map(|c| c.config.mcq.clone()).unwrap_or_default();
    let settings = match a.settings {
        Some(s) => parse_settings(&[s.to_string()])?,
        None => parse_settings(&mcq_cfg.settings)?,
    };
    let mut opts = BuildOptions::new(settings, ctx.seed);
    opts.rotations = a.rotations || mcq_cfg.rotations;
    opts.k_max = mcq_cfg.k_max()?;
    let offline = a.offline_wh || mcq_cfg.wh_templates == "offline" || ctx.config.is_none();
    let build = if offline {
        build_benchmark(&graphs, &sets, &opts, &OfflineWh)
    } else {
        let prompts = ctx.prompts()?;
        let llm = ctx.loaded()?.config.roles.llm.clone();
        m.endpoints = vec![llm.clone()];
        let templater = LlmWh { client: ctx.client()?, prompts: &prompts, endpoint: llm };
        build_benchmark(&graphs, &sets, &opts, &templater as &dyn WhTemplater)
    };
    info!(mcqs = build.mcqs.len(), skipped = build.skipped.len(), "benchmark built");
    save::<Mcq>(&build.mcqs, a.out, "mcqs.jsonl")?;
    save::<BinaryQuery>(&build.binary, a.out, "binary_queries.jsonl")?;
    save(&build.skipped, a.out, "mcq_skips.jsonl")?;
    save_value(&benchmark_manifest(&build.mcqs, &build.binary, ctx.seed), a.out, "benchmark_manifest.json")
}

pub struct EvalArgs<'a> {
    pub mcq: &'a Path,
    pub binary: Option<&'a Path>,
    pub out: &'a Path,
    pub endpoint: Option<&'a str>,
    pub baselines: bool,
    pub trials: u64,
}

pub fn evaluate(ctx: &mut Context, m: &mut RunManifest, a: EvalArgs<'_>) -> Result<(), CliError> {
    let mcqs: Vec<Mcq> = load(a.mcq, m)?;
    let queries: Vec<BinaryQuery> = match a.binary {
        Some(p) => load(p, m)?,
        None => Vec::new(),
    };
    let endpoint = a.endpoint.unwrap_or(ctx.loaded()?.config.evaluated()).to_string();
    m.endpoints = vec![endpoint.clone()];
    let seed = ctx.seed;
    let client = ctx.client()?;
    client.endpoint_spec(&endpoint).or_config()?;
    let records = evaluate_all(client, &endpoint, &mcqs);
    let binary: Vec<BinaryRecord> = client.map_ordered(&queries, |q| ask_binary(client, &endpoint, q));
    save::<EvalRecord>(&records, a.out, "eval_records.jsonl")?;
    if a.binary.is_some() {
        save(&binary, a.out, "binary_records.jsonl")?;
    }
    let baselines = a.baselines.then(|| random_baselines(&mcqs, a.trials, seed));
    let report = Report::build(&endpoint, &records, baselines, &binary).or_pipeline()?;
    info!(pairs = report.paired.n_pairs, accuracy = report.paired.overall.paired_accuracy, "evaluated");
    write_report(&report, a.out).or_pipeline()
}

pub struct ReportArgs<'a> {
    pub records: &'a Path,
    pub binary_records: Option<&'a Path>,
    pub mcq: Option<&'a Path>,
    pub out: &'a Path,
    pub endpoint: Option<&'a str>,
    pub trials: u64,
}

/// Rebuilds report files from stored records without any model calls.
pub fn report(ctx: &mut Context, m: &mut RunManifest, a: ReportArgs<'_>) -> Result<(), CliError> {
    let records: Vec<EvalRecord> = load(a.records, m)?;
    let binary: Vec<BinaryRecord> = match a.binary_records {
        Some(p) => load(p, m)?,
        None => Vec::new(),
    };
    let baselines = match a.mcq {
        Some(p) => {
            let mcqs: Vec<Mcq> = load(p, m)?;
            Some(random_baselines(&mcqs, a.trials, ctx.seed))
        }
        None => None,
    };
    let endpoint = match (a.endpoint, &ctx.config) {
        (Some(e), _) => e.to_string(),
        (None, Some(c)) => c.config.evaluated().to_string(),
        (None, None) => "unknown".to_string(),
    };
    let report = Report::build(&endpoint, &records, baselines, &binary).or_pipeline()?;
    write_report(&report, a.out).or_pipeline()
}

pub struct DpoArgs<'a> {
    pub captions: &'a Path,
    pub out: &'a Path,
    pub cap: Option<usize>,
    pub no_classify: bool,
}

pub fn build_dpo_cmd(ctx: &mut Context, m: &mut RunManifest, a: DpoArgs<'_>) -> Result<(), CliError> {
    let captions: Vec<CaptionRecord> = load(a.captions, m)?;
    let prompts = ctx.prompts()?;
    let cfg = &ctx.loaded()?.config;
    let cap = a.cap.unwrap_or(cfg.dpo.cap);
    let classify = cfg.dpo.classify && !a.no_classify;
    let allowed: Vec<ImageCategory> = cfg.dpo.categories()?;
    let llm = cfg.roles.llm.clone();
    m.endpoints = vec![llm.clone()];
    let seed = ctx.seed;
    let run = build_dpo(ctx.client()?, &prompts, &llm, &captions, classify, &allowed, cap, seed);
    info!(tuples = run.tuples.len(), total = run.total_tuples, failures = run.failures.len(), "preference data built");
    save(&run.phrase_sets, a.out, "phrase_sets.jsonl")?;
    save(&run.tuples, a.out, "preferences.jsonl")?;
    save_value(&trainer_export(&run.tuples), a.out, "trainer_export.json")?;
    let summary = json!({
        "schema": "dpo_summary.v1",
        "cap": cap,
        "total_tuples": run.total_tuples,
        "kept_tuples": run.tuples.len(),
        "category_distribution": category_distribution(&run.phrase_sets),
        "failures": run.failures,
    });
    save_value(&summary, a.out, "dpo_summary.json")
}
