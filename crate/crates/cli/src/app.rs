//! Argument parsing and dispatch.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Parser, Subcommand};
use finer_core::jsonl::{load_jsonl, save_json};
use finer_core::neg_gen::DiscriminatorResult;
use finer_core::review::ReviewSession;

use crate::commands::{self, Context, DpoArgs, EvalArgs, McqArgs, ReportArgs};
use crate::config::LoadedConfig;
use crate::error::{Categorize, CliError};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::serve::{serve, AppState};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags)
  3  ConfigError: config file missing, malformed or inconsistent
  4  InputError: input file missing or failing schema validation
  5  PipelineError: a stage failed, including cache misses under --replay";

#[derive(Debug, Parser)]
#[command(name = "finer", version, about = "Fine-grained negative-query benchmarks, preference data and paired-accuracy evaluation", after_help = EXIT_CODES)]
pub struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Serve every model call from the response cache; a miss is an error.
    #[arg(long, global = true)]
    pub replay: bool,
    /// Response cache directory; overrides the config.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Captions to scene graphs.
    ExtractSg {
        /// `captions.v1` JSONL.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// `structured_annotation.v1` JSONL, imported without model calls.
        #[arg(long, conflicts_with = "captions")]
        structured: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a seeded sample of this many split-verdict relations.
        #[arg(long, default_value_t = 0)]
        audit_sample: usize,
    },
    /// Propose negatives and filter them by discriminator entropy.
    NegGen {
        #[arg(long)]
        sg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preset (`c-sg`, `d-sg`) or a TOML policy file.
        #[arg(long)]
        policy: Option<String>,
        /// Discriminator endpoint id.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Build paired MCQs.
    BuildMcq {
        #[arg(long)]
        sg: PathBuf,
        #[arg(long)]
        neg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of obj, attr, rel, wh, granularity.
        #[arg(long)]
        settings: Option<String>,
        /// Add positional rotations of three-entity pairs.
        #[arg(long)]
        rotations: bool,
        /// Use fixed Wh templates instead of asking the text model.
        #[arg(long)]
        offline_wh: bool,
    },
    /// Build preference tuples from captions.
    BuildDpo {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cap: Option<usize>,
        /// Skip image-category classification and filtering.
        #[arg(long)]
        no_classify: bool,
    },
    /// Ask the evaluated model every MCQ and write the report.
    Evaluate {
        #[arg(long)]
        mcq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
        /// Granularity yes/no queries to ask as well.
        #[arg(long)]
        binary: Option<PathBuf>,
        /// Include random-guess baselines.
        #[arg(long)]
        baselines: bool,
        /// Monte-Carlo trials for baselines; 0 gives exact values.
        #[arg(long, default_value_t = 0)]
        trials: u64,
    },
    /// Recompute report JSON, CSV curves and charts from stored records.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary_records: Option<PathBuf>,
        /// MCQs for baselines.
        #[arg(long)]
        mcq: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 0)]
        trials: u64,
    },
    /// Serve the review API.
    ServeReview {
        /// `discriminator_audit.v1` JSONL.
        #[arg(long)]
        results: PathBuf,
        /// `labels.v1` log, appended to.
        #[arg(long)]
        labels: PathBuf,
        /// MCQs for survey export.
        #[arg(long)]
        mcq: Option<PathBuf>,
        #[arg(long)]
        survey_dir: Option<PathBuf>,
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ExtractSg { .. } => "extract-sg",
            Command::NegGen { .. } => "neg-gen",
            Command::BuildMcq { .. } => "build-mcq",
            Command::BuildDpo { .. } => "build-dpo",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::ServeReview { .. } => "serve-review",
        }
    }

    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::ExtractSg { out, .. }
            | Command::NegGen { out, .. }
            | Command::BuildMcq { out, .. }
            | Command::BuildDpo { out, .. }
            | Command::Evaluate { out, .. }
            | Command::Report { out, .. } => Some(out),
            Command::ServeReview { .. } => None,
        }
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = cli.config.as_deref().map(LoadedConfig::load).transpose()?;
    let config_sha = loaded.as_ref().map(|c| c.sha256.clone()).unwrap_or_default();
    let mut ctx = Context::new(loaded, cli.seed, cli.replay, cli.cache_dir.clone());

    if let Command::ServeReview { results, labels, mcq, survey_dir, bind } = &cli.command {
        return serve_review(&ctx, results, labels, mcq.as_deref(), survey_dir.clone(), *bind);
    }

    let out = cli.command.out_dir().expect("pipeline subcommands have --out").to_path_buf();
    std::fs::create_dir_all(&out).or_input()?;
    let mut m = RunManifest::new(cli.command.name(), &config_sha, ctx.seed.value(), cli.replay);
    let result = dispatch(&mut ctx, &mut m, &cli.command).and_then(|()| ctx.finish(&mut m));
    if result.is_err() {
        let _ = ctx.finish(&mut m);
    }
    m.wall_time_ms = started.elapsed().as_millis() as u64;
    m.exit_code = result.as_ref().err().map(CliError::exit_code).unwrap_or(0);
    m.error = result.as_ref().err().map(ToString::to_string);
    m.collect_outputs(&out).or_pipeline()?;
    save_json(&m, out.join(MANIFEST_FILE)).or_pipeline()?;
    result
}

fn dispatch(ctx: &mut Context, m: &mut RunManifest, cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::ExtractSg { captions, structured, out, audit_sample } => {
            commands::extract_sg(ctx, m, captions.as_deref(), structured.as_deref(), out, *audit_sample)
        }
        Command::NegGen { sg, out, policy, endpoint } => commands::neg_gen(ctx, m, sg, out, policy.as_deref(), endpoint.as_deref()),
        Command::BuildMcq { sg, neg, out, settings, rotations, offline_wh } => commands::build_mcq(
            ctx,
            m,
            McqArgs { sg, neg, out, settings: settings.as_deref(), rotations: *rotations, offline_wh: *offline_wh },
        ),
        Command::BuildDpo { captions, out, cap, no_classify } => {
            commands::build_dpo_cmd(ctx, m, DpoArgs { captions, out, cap: *cap, no_classify: *no_classify })
        }
        Command::Evaluate { mcq, out, endpoint, binary, baselines, trials } => commands::evaluate(
            ctx,
            m,
            EvalArgs { mcq, binary: binary.as_deref(), out, endpoint: endpoint.as_deref(), baselines: *baselines, trials: *trials },
        ),
        Command::Report { records, out, binary_records, mcq, endpoint, trials } => commands::report(
            ctx,
            m,
            ReportArgs {
                records,
                binary_records: binary_records.as_deref(),
                mcq: mcq.as_deref(),
                out,
                endpoint: endpoint.as_deref(),
                trials: *trials,
            },
        ),
        Command::ServeReview { .. } => unreachable!("handled before dispatch"),
    }
}

fn serve_review(
    ctx: &Context,
    results: &Path,
    labels: &Path,
    mcq: Option<&Path>,
    survey_dir: Option<PathBuf>,
    bind: Option<SocketAddr>,
) -> Result<(), CliError> {
    let results: Vec<DiscriminatorResult> = load_jsonl(results).or_input()?;
    let session = ReviewSession::with_log(results, labels).or_input()?;
    let mcqs = match mcq {
        Some(p) => load_jsonl(p).or_input()?,
        None => Vec::new(),
    };
    let addr = match (bind, &ctx.config) {
        (Some(a), _) => a,
        (None, Some(c)) => c.config.review.bind.parse().map_err(|e| CliError::config(format!("review.bind: {e}")))?,
        (None, None) => SocketAddr::from(([127, 0, 0, 1], 8787)),
    };
    let state = Arc::new(AppState { session: Mutex::new(session), mcqs, seed: ctx.seed, survey_dir });
    let rt = tokio::runtime::Runtime::new().or_pipeline()?;
    rt.block_on(serve(state, addr)).or_pipeline()
}
