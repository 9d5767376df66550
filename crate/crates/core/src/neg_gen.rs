//! Negative proposal, discriminator entropy filtering and threshold
//! calibration.
//!
//! Each positive entity gets four negatives from a text model. A multimodal
//! discriminator then picks the positive out of the five options. When it
//! picks a negative with low entropy, that negative is probably visible in
//! the image and gets replaced; confident mistakes above the threshold are
//! kept as hard negatives.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::client::{ClientError, DistributionMethod, ModelClient};
use crate::jsonl::Record;
use crate::prompts::{PromptId, PromptSet};
use crate::text::{extract_json, with_phrase};
use crate::types::{fold, EntityId, EntityKind, HumanLabel, NegativeSet, NegativeStatus, SceneGraph};
use crate::Seed;

/// Calibration walks misclassifications in batches of this size.
pub const BATCH_SIZE: usize = 10;
/// Reprompts allowed after the first proposal request.
pub const MAX_REPROMPTS: u32 = 3;
const SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NegGenError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("{target}: only {got} of {needed} valid negatives after {MAX_REPROMPTS} reprompts")]
    ProposalExhausted { target: EntityId, got: usize, needed: usize },
    #[error("{target}: {source}")]
    Endpoint {
        target: EntityId,
        #[source]
        source: ClientError,
    },
    #[error("no scene graph for image {0}")]
    MissingGraph(String),
    #[error("{0} is not in its scene graph")]
    UnknownEntity(EntityId),
    #[error("{kind} batch {batch_index} needs labels for {result_ids:?}")]
    InsufficientLabels { kind: EntityKind, batch_index: usize, result_ids: Vec<String> },
}

/// Renormalizes `p` to sum to one. Entries must be finite and non-negative
/// and the sum must already be within 1e-3 of one.
pub fn normalize_distribution(p: &[f64]) -> Result<Vec<f64>, NegGenError> {
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(NegGenError::InvalidDistribution(format!("entry {x} is not a probability")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(NegGenError::InvalidDistribution(format!("sum {sum} deviates from 1 by more than {SUM_TOLERANCE}")));
    }
    Ok(p.iter().map(|x| x / sum).collect())
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
pub fn entropy(p: &[f64]) -> Result<f64, NegGenError> {
    let q = normalize_distribution(p)?;
    let h: f64 = -q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    Ok(h.max(0.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub object: f64,
    pub attribute: f64,
    pub relation: f64,
}

impl Thresholds {
    pub fn get(&self, kind: EntityKind) -> f64 {
        match kind {
            EntityKind::Object => self.object,
            EntityKind::Attribute => self.attribute,
            EntityKind::Relation => self.relation,
        }
    }

    pub fn set(&mut self, kind: EntityKind, theta: f64) {
        match kind {
            EntityKind::Object => self.object = theta,
            EntityKind::Attribute => self.attribute = theta,
            EntityKind::Relation => self.relation = theta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub theta: Thresholds,
    pub max_regen_rounds: u32,
}

impl FilterPolicy {
    pub const DEFAULT_MAX_REGEN_ROUNDS: u32 = 5;

    /// Thresholds used for the CompreCap-derived benchmark.
    pub const C_SG: FilterPolicy = FilterPolicy {
        theta: Thresholds { object: 0.8, attribute: 0.8, relation: 0.4 },
        max_regen_rounds: Self::DEFAULT_MAX_REGEN_ROUNDS,
    };

    /// Thresholds used for the DOCCI-derived benchmark.
    pub const D_SG: FilterPolicy = FilterPolicy {
        theta: Thresholds { object: 0.8, attribute: 0.4, relation: 0.8 },
        max_regen_rounds: Self::DEFAULT_MAX_REGEN_ROUNDS,
    };

    pub fn preset(name: &str) -> Option<FilterPolicy> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "c-sg" | "comprecap" => Some(Self::C_SG),
            "d-sg" | "docci" => Some(Self::D_SG),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let max = 5f64.ln();
        for kind in EntityKind::ALL {
            let t = self.theta.get(kind);
            if !(0.0..=max).contains(&t) {
                return Err(format!("theta for {kind} must lie in [0, ln 5], got {t}"));
            }
        }
        if self.max_regen_rounds == 0 {
            return Err("max_regen_rounds must be positive".into());
        }
        Ok(())
    }
}

/// One discriminator query: the positive and its four negatives as a
/// five-way choice, with probabilities mapped back to canonical order
/// (positive first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorResult {
    pub result_id: String,
    pub target: EntityId,
    pub image_uri: String,
    /// Canonical order: index 0 is the positive, 1..=4 the negatives.
    pub options: [String; 5],
    /// `option_order[i]` is the canonical index shown at position `i`.
    pub option_order: [usize; 5],
    pub probs: [f64; 5],
    pub predicted: usize,
    pub correct: bool,
    pub entropy_nats: f64,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<DistributionMethod>,
}

pub fn result_id(target: &EntityId, round: u32) -> String {
    format!("{}:{}{}:r{round}", target.image_id, target.kind.short(), target.index)
}

impl DiscriminatorResult {
    /// Builds a result from probabilities over the options as shown.
    pub fn from_shown(
        target: &EntityId,
        image_uri: &str,
        options: [String; 5],
        option_order: [usize; 5],
        shown_probs: &[f64; 5],
        round: u32,
    ) -> Result<Self, NegGenError> {
        let shown = normalize_distribution(shown_probs)?;
        let mut probs = [0.0; 5];
        for (pos, &canon) in option_order.iter().enumerate() {
            probs[canon] = shown[pos];
        }
        let predicted = argmax(&probs);
        Ok(DiscriminatorResult {
            result_id: result_id(target, round),
            target: target.clone(),
            image_uri: image_uri.to_string(),
            options,
            option_order,
            probs,
            predicted,
            correct: predicted == 0,
            entropy_nats: entropy(&probs)?,
            round,
            method: None,
        })
    }

    pub fn kind(&self) -> EntityKind {
        self.target.kind
    }

    /// Negative slot (0..4) the discriminator chose, if it chose a negative.
    pub fn offending_slot(&self) -> Option<usize> {
        (self.predicted > 0).then(|| self.predicted - 1)
    }

    pub fn shown_options(&self) -> [String; 5] {
        std::array::from_fn(|i| self.options[self.option_order[i]].clone())
    }
}

impl Record for DiscriminatorResult {
    const SCHEMA: &'static str = "discriminator_audit.v1";

    fn validate(&self) -> Result<(), String> {
        let mut seen = [false; 5];
        for &i in &self.option_order {
            if i > 4 || std::mem::replace(&mut seen[i], true) {
                return Err(format!("{}: option_order is not a permutation", self.result_id));
            }
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.probs.iter().any(|p| *p < 0.0) {
            return Err(format!("{}: probs do not form a distribution", self.result_id));
        }
        if !(0.0..=5f64.ln() + 1e-9).contains(&self.entropy_nats) {
            return Err(format!("{}: entropy out of range", self.result_id));
        }
        if self.correct != (self.predicted == 0) {
            return Err(format!("{}: correct flag disagrees with predicted", self.result_id));
        }
        Ok(())
    }
}

/// True when the result calls for regenerating its chosen negative.
pub fn needs_regeneration(r: &DiscriminatorResult, policy: &FilterPolicy) -> bool {
    !r.correct && r.entropy_nats < policy.theta.get(r.kind())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenItem {
    pub result_id: String,
    pub target: EntityId,
    /// Negative slot 0..4 to replace.
    pub slot: usize,
    pub offending: String,
}

/// Misclassifications below the level threshold. Only the negative the
/// discriminator picked is scheduled for replacement.
pub fn filter_round(results: &[DiscriminatorResult], policy: &FilterPolicy) -> Vec<RegenItem> {
    results
        .iter()
        .filter(|r| needs_regeneration(r, policy))
        .filter_map(|r| {
            let slot = r.offending_slot()?;
            Some(RegenItem {
                result_id: r.result_id.clone(),
                target: r.target.clone(),
                slot,
                offending: r.options[r.predicted].clone(),
            })
        })
        .collect()
}

/// Replaces one negative, recording the old text as rejected.
pub fn apply_regeneration(set: &mut NegativeSet, slot: usize, replacement: String) {
    let old = std::mem::replace(&mut set.negatives[slot].text, replacement);
    set.negatives[slot].status = NegativeStatus::Regenerated;
    set.negatives[slot].regen_count += 1;
    set.rejected.push(old);
}

/// Scores a negative set.
pub trait Discriminator: Sync {
    fn discriminate(&self, sg: &SceneGraph, set: &NegativeSet, round: u32) -> Result<DiscriminatorResult, NegGenError>;
}

/// Produces fresh negatives for an entity.
pub trait NegativeProposer: Sync {
    fn propose(
        &self,
        sg: &SceneGraph,
        target: &EntityId,
        forbidden: &[String],
        count: usize,
    ) -> Result<Vec<String>, NegGenError>;
}

/// Five canonical options for a negative set: the rendered positive, then
/// each negative rendered in the positive's place.
pub fn canonical_options(sg: &SceneGraph, set: &NegativeSet) -> Result<[String; 5], NegGenError> {
    let render = |r: Option<&str>| sg.render(&set.target, r).ok_or_else(|| NegGenError::UnknownEntity(set.target.clone()));
    Ok([
        render(None)?,
        render(Some(&set.negatives[0].text))?,
        render(Some(&set.negatives[1].text))?,
        render(Some(&set.negatives[2].text))?,
        render(Some(&set.negatives[3].text))?,
    ])
}

pub fn discriminator_question(kind: EntityKind) -> &'static str {
    match kind {
        EntityKind::Object => "Which of the following objects can be seen in this image?",
        EntityKind::Attribute => "Which of the following descriptions matches this image?",
        EntityKind::Relation => "Which of the following relations holds in this image?",
    }
}

/// Queries the multimodal model with options shuffled by a seed derived
/// from the target and round.
pub fn discriminate(
    client: &ModelClient,
    endpoint: &str,
    sg: &SceneGraph,
    set: &NegativeSet,
    seed: Seed,
    round: u32,
) -> Result<DiscriminatorResult, NegGenError> {
    let options = canonical_options(sg, set)?;
    let mut order = [0, 1, 2, 3, 4];
    order.shuffle(&mut seed.derive(&format!("disc/{}/r{round}", set.target)).rng());
    let shown: [String; 5] = std::array::from_fn(|i| options[order[i]].clone());
    let dist = client
        .choice_probs(endpoint, &sg.image_uri, discriminator_question(set.target.kind), &shown)
        .map_err(|source| NegGenError::Endpoint { target: set.target.clone(), source })?;
    let mut r = DiscriminatorResult::from_shown(&set.target, &sg.image_uri, options, order, &dist.probs, round)?;
    r.method = Some(dist.method);
    Ok(r)
}

pub struct ModelDiscriminator<'a> {
    pub client: &'a ModelClient,
    pub endpoint: String,
    pub seed: Seed,
}

impl Discriminator for ModelDiscriminator<'_> {
    fn discriminate(&self, sg: &SceneGraph, set: &NegativeSet, round: u32) -> Result<DiscriminatorResult, NegGenError> {
        discriminate(self.client, &self.endpoint, sg, set, self.seed, round)
    }
}

fn parse_candidates(text: &str) -> Vec<String> {
    let list = match extract_json(text) {
        Some(Value::Object(m)) => m.get("negatives").cloned(),
        Some(v @ Value::Array(_)) => Some(v),
        _ => None,
    };
    list.and_then(|v| serde_json::from_value::<Vec<Value>>(v).ok())
        .unwrap_or_default()
        .into_iter()
        .filter_map(|v| v.as_str().map(|s| s.trim().trim_matches('"').trim().to_string()))
        .collect()
}

/// Asks the text model for `count` new negatives, reprompting up to three
/// times. Candidates equal to the positive, already forbidden, or repeated
/// are dropped.
pub fn propose(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoint: &str,
    sg: &SceneGraph,
    target: &EntityId,
    forbidden: &[String],
    count: usize,
) -> Result<Vec<String>, NegGenError> {
    let positive = sg.phrase(target).ok_or_else(|| NegGenError::UnknownEntity(target.clone()))?.to_string();
    let mut banned: Vec<String> = forbidden.iter().map(|s| fold(s)).collect();
    banned.push(fold(&positive));
    let mut got: Vec<String> = Vec::new();
    for attempt in 0..=MAX_REPROMPTS {
        let need = count - got.len();
        let avoid: Vec<String> = forbidden.iter().chain(got.iter()).map(|s| format!("\"{s}\"")).collect();
        let avoid = if avoid.is_empty() { "(none)".to_string() } else { avoid.join(", ") };
        let need_s = need.to_string();
        let attempt_s = (attempt + 1).to_string();
        let prompt = match target.kind {
            EntityKind::Object => prompts.render(
                PromptId::NegObj,
                &[("positive", &positive), ("count", &need_s), ("forbidden", &avoid), ("attempt", &attempt_s)],
            ),
            EntityKind::Attribute => {
                let a = sg.attribute(target).ok_or_else(|| NegGenError::UnknownEntity(target.clone()))?;
                let owner = sg.object_name(&a.owner).unwrap_or_default();
                prompts.render(
                    PromptId::NegAttr,
                    &[("positive", &positive), ("owner", owner), ("count", &need_s), ("forbidden", &avoid), ("attempt", &attempt_s)],
                )
            }
            EntityKind::Relation => {
                let r = sg.relation(target).ok_or_else(|| NegGenError::UnknownEntity(target.clone()))?;
                prompts.render(
                    PromptId::NegRel,
                    &[
                        ("positive", &positive),
                        ("subject", sg.object_name(&r.subject).unwrap_or_default()),
                        ("object", sg.object_name(&r.object).unwrap_or_default()),
                        ("count", &need_s),
                        ("forbidden", &avoid),
                        ("attempt", &attempt_s),
                    ],
                )
            }
        };
        let resp = client
            .complete(&crate::client::ChatRequest::text(endpoint, prompt).max_tokens(256))
            .map_err(|source| NegGenError::Endpoint { target: target.clone(), source })?;
        for cand in parse_candidates(&resp.text) {
            let cand = if target.kind == EntityKind::Attribute { with_phrase(&cand) } else { cand };
            let key = fold(&cand);
            if key.is_empty() || key == "with" || banned.contains(&key) {
                continue;
            }
            banned.push(key);
            got.push(cand);
            if got.len() == count {
                return Ok(got);
            }
        }
        debug!(target = %target, attempt, have = got.len(), count, "reprompting for negatives");
    }
    Err(NegGenError::ProposalExhausted { target: target.clone(), got: got.len(), needed: count })
}

/// Four fresh negatives for `target`.
pub fn propose_negatives(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoint: &str,
    sg: &SceneGraph,
    target: &EntityId,
    forbidden: &[String],
) -> Result<[String; 4], NegGenError> {
    let v = propose(client, prompts, endpoint, sg, target, forbidden, 4)?;
    Ok(v.try_into().expect("propose returns exactly the requested count"))
}

pub struct LlmProposer<'a> {
    pub client: &'a ModelClient,
    pub prompts: &'a PromptSet,
    pub endpoint: String,
}

impl NegativeProposer for LlmProposer<'_> {
    fn propose(&self, sg: &SceneGraph, target: &EntityId, forbidden: &[String], count: usize) -> Result<Vec<String>, NegGenError> {
        propose(self.client, self.prompts, &self.endpoint, sg, target, forbidden, count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalFailure {
    pub target: EntityId,
    pub reason: String,
}

/// Initial negative sets for every object, attribute and relation, in graph
/// order. Entities whose proposal fails are reported instead.
pub fn generate_negative_sets(
    sgs: &[SceneGraph],
    kinds: &[EntityKind],
    proposer: &dyn NegativeProposer,
) -> (Vec<NegativeSet>, Vec<ProposalFailure>) {
    let work: Vec<(&SceneGraph, EntityId)> = sgs
        .iter()
        .flat_map(|sg| kinds.iter().flat_map(move |&k| sg.entities(k).into_iter().map(move |id| (sg, id))))
        .collect();
    let out: Vec<Result<NegativeSet, ProposalFailure>> = work
        .par_iter()
        .map(|(sg, id)| {
            let fail = |e: NegGenError| ProposalFailure { target: id.clone(), reason: e.to_string() };
            let positive = sg.phrase(id).ok_or_else(|| fail(NegGenError::UnknownEntity(id.clone())))?;
            let negs = proposer.propose(sg, id, &[], 4).map_err(fail)?;
            let negs: [String; 4] = negs.try_into().map_err(|v: Vec<String>| ProposalFailure {
                target: id.clone(),
                reason: format!("proposer returned {} negatives", v.len()),
            })?;
            Ok(NegativeSet::new(id.clone(), positive, negs))
        })
        .collect();
    let mut sets = Vec::new();
    let mut failures = Vec::new();
    for r in out {
        match r {
            Ok(s) => sets.push(s),
            Err(f) => failures.push(f),
        }
    }
    (sets, failures)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStats {
    pub entities: usize,
    /// Entities with at least one regenerated negative.
    pub regenerated_entities: usize,
    pub regenerations: u32,
    pub needs_human: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenEvent {
    pub round: u32,
    pub target: EntityId,
    pub slot: usize,
    pub old: String,
    pub new: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    /// Discrimination rounds executed.
    pub rounds: u32,
    pub results: Vec<DiscriminatorResult>,
    pub events: Vec<RegenEvent>,
    pub per_level: BTreeMap<EntityKind, LevelStats>,
    pub failures: Vec<ProposalFailure>,
}

/// Discriminate, filter and regenerate until nothing is flagged.
///
/// Round `r` discriminates every set that changed in round `r - 1` (all
/// sets in round 0). A set flagged after `max_regen_rounds` replacements is
/// marked `needs_human`, as is any set whose discrimination or replacement
/// fails.
pub fn run_filter_loop(
    sgs: &[SceneGraph],
    mut sets: Vec<NegativeSet>,
    policy: &FilterPolicy,
    proposer: &dyn NegativeProposer,
    discriminator: &dyn Discriminator,
) -> (Vec<NegativeSet>, FilterAudit) {
    let graphs: HashMap<&str, &SceneGraph> = sgs.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let mut audit = FilterAudit::default();
    let mut active: Vec<usize> = Vec::new();
    for (i, s) in sets.iter_mut().enumerate() {
        if graphs.contains_key(s.target.image_id.as_str()) {
            active.push(i);
        } else {
            s.needs_human = true;
            audit.failures.push(ProposalFailure {
                target: s.target.clone(),
                reason: NegGenError::MissingGraph(s.target.image_id.clone()).to_string(),
            });
        }
    }

    let mut round = 0u32;
    while !active.is_empty() {
        let results: Vec<Result<DiscriminatorResult, NegGenError>> = active
            .par_iter()
            .map(|&i| discriminator.discriminate(graphs[sets[i].target.image_id.as_str()], &sets[i], round))
            .collect();
        audit.rounds = round + 1;

        let mut regen: Vec<(usize, usize)> = Vec::new();
        for (&i, res) in active.iter().zip(results) {
            let set = &mut sets[i];
            match res {
                Err(e) => {
                    warn!(target = %set.target, error = %e, "discrimination failed");
                    set.needs_human = true;
                    audit.failures.push(ProposalFailure { target: set.target.clone(), reason: e.to_string() });
                }
                Ok(r) => {
                    set.last_entropy = Some(r.entropy_nats);
                    let flagged = needs_regeneration(&r, policy).then(|| r.offending_slot()).flatten();
                    audit.results.push(r);
                    match flagged {
                        None => {
                            for slot in &mut set.negatives {
                                if slot.status == NegativeStatus::Proposed {
                                    slot.status = NegativeStatus::Kept;
                                }
                            }
                        }
                        Some(_) if set.total_regenerations() >= policy.max_regen_rounds => {
                            set.needs_human = true;
                        }
                        Some(slot) => regen.push((i, slot)),
                    }
                }
            }
        }

        let replacements: Vec<Result<String, NegGenError>> = regen
            .par_iter()
            .map(|&(i, _)| {
                let set = &sets[i];
                let mut forbidden: Vec<String> = set.negatives.iter().map(|n| n.text.clone()).collect();
                forbidden.extend(set.rejected.iter().cloned());
                let mut v = proposer.propose(graphs[set.target.image_id.as_str()], &set.target, &forbidden, 1)?;
                v.pop().ok_or_else(|| NegGenError::ProposalExhausted { target: set.target.clone(), got: 0, needed: 1 })
            })
            .collect();

        active.clear();
        for (&(i, slot), rep) in regen.iter().zip(replacements) {
            let set = &mut sets[i];
            match rep {
                Ok(new) => {
                    audit.events.push(RegenEvent {
                        round,
                        target: set.target.clone(),
                        slot,
                        old: set.negatives[slot].text.clone(),
                        new: new.clone(),
                    });
                    apply_regeneration(set, slot, new);
                    active.push(i);
                }
                Err(e) => {
                    warn!(target = %set.target, error = %e, "regeneration failed");
                    set.needs_human = true;
                    audit.failures.push(ProposalFailure { target: set.target.clone(), reason: e.to_string() });
                }
            }
        }
        round += 1;
    }

    for s in &sets {
        let st = audit.per_level.entry(s.target.kind).or_default();
        st.entities += 1;
        let n = s.total_regenerations();
        st.regenerations += n;
        st.regenerated_entities += usize::from(n > 0);
        st.needs_human += usize::from(s.needs_human);
    }
    info!(rounds = audit.rounds, "filter loop finished");
    (sets, audit)
}

/// One human judgement on a discriminator result's chosen negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub result_id: String,
    pub label: HumanLabel,
    pub reviewer_id: String,
    pub timestamp_unix_ms: u64,
}

impl Record for LabelRecord {
    const SCHEMA: &'static str = "labels.v1";

    fn validate(&self) -> Result<(), String> {
        if self.result_id.is_empty() {
            return Err("empty result_id".into());
        }
        Ok(())
    }
}

/// Latest label per result id.
pub fn latest_labels(labels: &[LabelRecord]) -> HashMap<&str, HumanLabel> {
    labels.iter().map(|l| (l.result_id.as_str(), l.label)).collect()
}

/// Misclassified results of one level in ascending entropy order (ties by
/// result id), cut into review batches.
pub fn review_batches(results: &[DiscriminatorResult], kind: EntityKind) -> Vec<Vec<&DiscriminatorResult>> {
    let mut mis: Vec<&DiscriminatorResult> = results.iter().filter(|r| !r.correct && r.kind() == kind).collect();
    mis.sort_by(|a, b| a.entropy_nats.total_cmp(&b.entropy_nats).then_with(|| a.result_id.cmp(&b.result_id)));
    mis.chunks(BATCH_SIZE).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kind: EntityKind,
    pub theta: f64,
    pub misclassified: usize,
    pub batches_walked: usize,
    /// Index of the first batch with no `PresentInImage` label.
    pub clean_batch: Option<usize>,
}

/// Threshold for one level.
///
/// Batches are walked from the lowest entropy up. The threshold is the
/// lowest entropy in the first fully labelled batch without any
/// `PresentInImage` label, so that every earlier (dirty) batch falls below
/// it. With no misclassifications the threshold is 0; when every batch is
/// dirty it is ln 5.
pub fn calibrate_level(
    results: &[DiscriminatorResult],
    labels: &[LabelRecord],
    kind: EntityKind,
) -> Result<Calibration, NegGenError> {
    let batches = review_batches(results, kind);
    let misclassified = batches.iter().map(Vec::len).sum();
    let latest = latest_labels(labels);
    for (b, batch) in batches.iter().enumerate() {
        let missing: Vec<String> = batch
            .iter()
            .filter(|r| !latest.contains_key(r.result_id.as_str()))
            .map(|r| r.result_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(NegGenError::InsufficientLabels { kind, batch_index: b, result_ids: missing });
        }
        if batch.iter().all(|r| latest[r.result_id.as_str()] == HumanLabel::ValidNegative) {
            return Ok(Calibration {
                kind,
                theta: batch[0].entropy_nats,
                misclassified,
                batches_walked: b + 1,
                clean_batch: Some(b),
            });
        }
    }
    Ok(Calibration {
        kind,
        theta: if batches.is_empty() { 0.0 } else { 5f64.ln() },
        misclassified,
        batches_walked: batches.len(),
        clean_batch: None,
    })
}

/// Calibrates all three levels, failing on the first level that still
/// needs labels.
pub fn calibrate_threshold(results: &[DiscriminatorResult], labels: &[LabelRecord]) -> Result<Thresholds, NegGenError> {
    let mut t = Thresholds { object: 0.0, attribute: 0.0, relation: 0.0 };
    for kind in EntityKind::ALL {
        t.set(kind, calibrate_level(results, labels, kind)?.theta);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{CacheMode, ChatResponse, EndpointSpec, ScriptedBackend};
    use std::sync::Arc;

    const LN5: f64 = 1.6094379124341003;

    #[test]
    fn entropy_basics() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.2; 5]).unwrap() - LN5).abs() < 1e-12);
        assert!(entropy(&[0.5, 0.5, 0.1, 0.0, 0.0]).is_err());
        assert!(entropy(&[1.2, -0.2, 0.0, 0.0, 0.0]).is_err());
        // Within tolerance gets renormalized.
        assert!((entropy(&[0.2004, 0.2, 0.2, 0.2, 0.2]).unwrap() - LN5).abs() < 1e-6);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2; 5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.2, 0.1]), 1);
    }

    fn set() -> (SceneGraph, NegativeSet) {
        let mut g = SceneGraph::new("img", "file:///img.jpg");
        let wall = g.add_object("wall");
        let s = NegativeSet::new(wall, "wall", ["ground", "fence", "door", "curtain"].map(String::from));
        (g, s)
    }

    fn fixture_client(score: fn(&str) -> f64) -> ModelClient {
        let b = ScriptedBackend::new(move |req| {
            let opts = crate::client::parse_rendered_options(&req.prompt_text());
            let pairs: Vec<(String, f64)> =
                opts.iter().enumerate().map(|(i, o)| (crate::text::letter(i).to_string(), score(o))).collect();
            let refs: Vec<(&str, f64)> = pairs.iter().map(|(l, p)| (l.as_str(), *p)).collect();
            Ok(ChatResponse::with_distribution(&refs))
        });
        ModelClient::builder()
            .endpoint(EndpointSpec::new("vlm").token_scores(true), Some(Arc::new(b)))
            .mode(CacheMode::Off)
            .build()
            .unwrap()
    }

    #[test]
    fn discriminate_maps_back_to_canonical_order() {
        let (g, s) = set();
        let c = fixture_client(|o| if o == "wall" { 1.0 } else { 0.0 });
        let r = discriminate(&c, "vlm", &g, &s, Seed(3), 0).unwrap();
        assert!(r.correct);
        assert_eq!(r.entropy_nats, 0.0);
        assert_eq!(r.probs, [1.0, 0.0, 0.0, 0.0, 0.0]);

        let c = fixture_client(|o| if o == "door" { 1.0 } else { 0.0 });
        let r = discriminate(&c, "vlm", &g, &s, Seed(3), 0).unwrap();
        assert!(!r.correct);
        assert_eq!(r.predicted, 3);
        assert_eq!(r.offending_slot(), Some(2));
        assert_eq!(r.entropy_nats, 0.0);
        Record::validate(&r).unwrap();

        let c = fixture_client(|_| 1.0);
        let r = discriminate(&c, "vlm", &g, &s, Seed(3), 0).unwrap();
        assert!(r.correct);
        assert!((r.entropy_nats - LN5).abs() < 1e-12);
        for theta in [0.0, 0.4, 0.8, LN5] {
            let p = FilterPolicy { theta: Thresholds { object: theta, attribute: theta, relation: theta }, max_regen_rounds: 5 };
            assert!(filter_round(std::slice::from_ref(&r), &p).is_empty());
        }
    }

    fn result(kind: EntityKind, index: u32, correct: bool, entropy: f64) -> DiscriminatorResult {
        let target = EntityId::new(kind, "img", index);
        DiscriminatorResult {
            result_id: result_id(&target, 0),
            target,
            image_uri: "u".into(),
            options: ["p", "n1", "n2", "n3", "n4"].map(String::from),
            option_order: [0, 1, 2, 3, 4],
            probs: [0.2; 5],
            predicted: if correct { 0 } else { 1 },
            correct,
            entropy_nats: entropy,
            round: 0,
            method: None,
        }
    }

    #[test]
    fn filter_rule() {
        let p = FilterPolicy::C_SG;
        let rs = [
            result(EntityKind::Object, 0, true, 0.01),
            result(EntityKind::Object, 1, false, 0.0119),
            result(EntityKind::Object, 2, false, 1.2),
            result(EntityKind::Relation, 0, false, 0.5),
            result(EntityKind::Attribute, 0, false, 0.5),
        ];
        let w = filter_round(&rs, &p);
        let ids: Vec<&str> = w.iter().map(|x| x.result_id.as_str()).collect();
        assert_eq!(ids, ["img:obj1:r0", "img:attr0:r0"]);
        assert_eq!(w[0].slot, 0);
        assert_eq!(w[0].offending, "n1");
        // Filtering what was kept yields nothing.
        let kept: Vec<DiscriminatorResult> = rs.iter().filter(|r| !w.iter().any(|x| x.result_id == r.result_id)).cloned().collect();
        assert!(filter_round(&kept, &p).is_empty());
    }

    #[test]
    fn presets_are_valid() {
        FilterPolicy::C_SG.validate().unwrap();
        FilterPolicy::D_SG.validate().unwrap();
        assert_eq!(FilterPolicy::preset("D-SG").unwrap().theta.attribute, 0.4);
        let bad = FilterPolicy { theta: Thresholds { object: 2.0, attribute: 0.0, relation: 0.0 }, max_regen_rounds: 5 };
        assert!(bad.validate().is_err());
    }

    fn neg_client(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> ModelClient {
        let b = ScriptedBackend::new(move |req| Ok(ChatResponse::text(reply(&req.prompt_text()))));
        ModelClient::builder()
            .endpoint(EndpointSpec::new("llm"), Some(Arc::new(b)))
            .mode(CacheMode::Off)
            .build()
            .unwrap()
    }

    #[test]
    fn proposal_respects_forbidden_and_positive() {
        let mut g = SceneGraph::new("img", "u");
        let frame = g.add_object("door frame");
        let c = neg_client(|_| r#"{"negatives": ["pillar", "door frame", "ground", "window", "Pillar", "shelf", "ceiling"]}"#.into());
        let negs = propose_negatives(&c, &PromptSet::default(), "llm", &g, &frame, &["ground".to_string()]).unwrap();
        assert_eq!(negs, ["pillar", "window", "shelf", "ceiling"].map(String::from));
    }

    #[test]
    fn proposal_reprompts_then_exhausts() {
        let mut g = SceneGraph::new("img", "u");
        let wall = g.add_object("wall");
        let c = neg_client(|p| {
            if p.contains("Attempt: 1") {
                r#"{"negatives": ["ground", "ceiling"]}"#.into()
            } else {
                r#"{"negatives": ["fence", "door"]}"#.into()
            }
        });
        let negs = propose_negatives(&c, &PromptSet::default(), "llm", &g, &wall, &[]).unwrap();
        assert_eq!(negs, ["ground", "ceiling", "fence", "door"].map(String::from));

        let c = neg_client(|_| r#"{"negatives": ["wall", "ground"]}"#.into());
        let e = propose_negatives(&c, &PromptSet::default(), "llm", &g, &wall, &[]).unwrap_err();
        assert!(matches!(e, NegGenError::ProposalExhausted { got: 1, needed: 4, .. }));
    }

    #[test]
    fn attribute_proposals_use_with_form() {
        let mut g = SceneGraph::new("img", "u");
        let cat = g.add_object("cat");
        let a = g.add_attribute(&cat, "with black fur");
        let c = neg_client(|p| {
            assert!(p.contains("the cat is described as \"with black fur\""));
            r#"{"negatives": ["white fur", "with orange fur", "with grey fur", "with spotted fur"]}"#.into()
        });
        let negs = propose_negatives(&c, &PromptSet::default(), "llm", &g, &a, &[]).unwrap();
        assert_eq!(negs[0], "with white fur");
    }

    fn cal_results(entropies: &[f64]) -> Vec<DiscriminatorResult> {
        entropies.iter().enumerate().map(|(i, &h)| result(EntityKind::Object, i as u32, false, h)).collect()
    }

    fn label(r: &DiscriminatorResult, l: HumanLabel) -> LabelRecord {
        LabelRecord { result_id: r.result_id.clone(), label: l, reviewer_id: "t".into(), timestamp_unix_ms: 0 }
    }

    #[test]
    fn calibration_walk() {
        let hs: Vec<f64> = (0..25).map(|i| 0.01 + i as f64 * 0.05).collect();
        let rs = cal_results(&hs);
        let batches = review_batches(&rs, EntityKind::Object);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), [10, 10, 5]);

        // Nothing labelled yet.
        match calibrate_level(&rs, &[], EntityKind::Object) {
            Err(NegGenError::InsufficientLabels { batch_index: 0, result_ids, .. }) => assert_eq!(result_ids.len(), 10),
            other => panic!("{other:?}"),
        }

        // Dirty first batch; second batch unlabelled.
        let mut labels: Vec<LabelRecord> = batches[0].iter().map(|r| label(r, HumanLabel::ValidNegative)).collect();
        labels[4].label = HumanLabel::PresentInImage;
        assert!(matches!(
            calibrate_level(&rs, &labels, EntityKind::Object),
            Err(NegGenError::InsufficientLabels { batch_index: 1, .. })
        ));
        labels.extend(batches[1].iter().map(|r| label(r, HumanLabel::ValidNegative)));
        let c = calibrate_level(&rs, &labels, EntityKind::Object).unwrap();
        assert_eq!(c.clean_batch, Some(1));
        assert_eq!(c.theta, hs[10]);

        // A later relabel wins.
        labels.push(label(batches[0][4], HumanLabel::ValidNegative));
        assert_eq!(calibrate_level(&rs, &labels, EntityKind::Object).unwrap().theta, hs[0]);

        // No misclassifications at all.
        assert_eq!(calibrate_level(&rs, &[], EntityKind::Relation).unwrap().theta, 0.0);
    }
}
