//! Preference data from long captions and a reference DPO loss.
//!
//! Per caption a text model extracts positive phrases for objects,
//! attributes, relations and a Wh question, then swaps one instance in
//! each for a negative. Templates turn each phrase pair into a positive
//! and a negative preference tuple.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::debug;

use crate::client::{ChatRequest, ClientError, ModelClient};
use crate::jsonl::Record;
use crate::prompts::{PromptId, PromptSet};
use crate::sg_extract::CaptionRecord;
use crate::text::extract_json;
use crate::types::fold;
use crate::Seed;

pub const DEFAULT_CAP: usize = 160_000;
pub const DEFAULT_BETA: f64 = 0.1;
const REPROMPT: &str = "\n\nYour previous answer could not be parsed. Answer with JSON only, exactly in the requested shape.";

/// Question, accept and reject forms; `{}` is the phrase slot.
pub const TEMPLATES: [(&str, &str, &str); 5] = [
    ("Does this image contain {}?", "Yes, this image contains {}.", "No, but this image contains {}."),
    ("Does this image show {}?", "Yes, this image shows {}.", "No, but this image shows {}."),
    ("Does this image include {}?", "Yes, this image includes {}.", "No, but this image includes {}."),
    ("Can you see {} in this image?", "Yes, I can see {} in this image.", "No, but I can see {} in this image."),
    ("Can {} be seen in this image?", "Yes, {} can be seen in this image.", "No, but {} can be seen in this image."),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Obj,
    Attr,
    Rel,
    Wh,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::Obj, Subset::Attr, Subset::Rel, Subset::Wh];

    pub fn key(self) -> &'static str {
        match self {
            Subset::Obj => "obj",
            Subset::Attr => "attr",
            Subset::Rel => "rel",
            Subset::Wh => "wh",
        }
    }

    fn noun(self) -> &'static str {
        match self {
            Subset::Obj => "object",
            Subset::Attr => "attribute",
            Subset::Rel => "relation",
            Subset::Wh => "attribute",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCategory {
    NaturalImage,
    ScreenshotUi,
    ChartGraph,
    DocumentText,
}

impl ImageCategory {
    pub const ALL: [ImageCategory; 4] =
        [ImageCategory::NaturalImage, ImageCategory::ScreenshotUi, ImageCategory::ChartGraph, ImageCategory::DocumentText];

    pub fn label(self) -> &'static str {
        match self {
            ImageCategory::NaturalImage => "natural_image",
            ImageCategory::ScreenshotUi => "screenshot_ui",
            ImageCategory::ChartGraph => "chart_graph",
            ImageCategory::DocumentText => "document_text",
        }
    }

    /// First category label mentioned in `text`.
    pub fn parse(text: &str) -> Option<ImageCategory> {
        let t = text.to_lowercase().replace([' ', '-'], "_");
        ImageCategory::ALL
            .into_iter()
            .filter_map(|c| t.find(c.label()).map(|i| (i, c)))
            .min_by_key(|(i, _)| *i)
            .map(|(_, c)| c)
    }
}

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("{image_id}: {source}")]
    Endpoint {
        image_id: String,
        #[source]
        source: ClientError,
    },
    #[error("{image_id}: unparseable {stage} output {raw_output:?}")]
    UnparseableLlmOutput { image_id: String, stage: &'static str, raw_output: String },
    #[error("{image_id}: empty caption")]
    EmptyCaption { image_id: String },
}

/// A positive phrase and its negative twin with one instance swapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhrasePair {
    pub positive: String,
    pub negative: String,
    pub replaced_instance: String,
    pub replacement: String,
}

impl PhrasePair {
    fn validate(&self) -> Result<(), String> {
        if !self.positive.contains(&self.replaced_instance) {
            return Err(format!("instance {:?} not in {:?}", self.replaced_instance, self.positive));
        }
        if self.positive.replacen(&self.replaced_instance, &self.replacement, 1) != self.negative {
            return Err(format!("{:?} is not {:?} with one instance replaced", self.negative, self.positive));
        }
        if fold(&self.replacement) == fold(&self.replaced_instance) {
            return Err("replacement equals the replaced instance".into());
        }
        Ok(())
    }
}

/// Wh question pair: the positive question and its answer, the negative
/// question with a corrupted premise and its rejecting answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhPair {
    pub question: PhrasePair,
    pub positive_answer: String,
    pub negative_answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseSet {
    pub image_id: String,
    pub image_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obj: Option<PhrasePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<PhrasePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel: Option<PhrasePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wh: Option<WhPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ImageCategory>,
    /// Types dropped because the model output was unusable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omitted: Vec<Subset>,
}

impl PhraseSet {
    pub fn empty(image_id: &str, image_uri: &str) -> Self {
        PhraseSet {
            image_id: image_id.into(),
            image_uri: image_uri.into(),
            obj: None,
            attr: None,
            rel: None,
            wh: None,
            category: None,
            omitted: Vec::new(),
        }
    }

    pub fn pair(&self, subset: Subset) -> Option<&PhrasePair> {
        match subset {
            Subset::Obj => self.obj.as_ref(),
            Subset::Attr => self.attr.as_ref(),
            Subset::Rel => self.rel.as_ref(),
            Subset::Wh => self.wh.as_ref().map(|w| &w.question),
        }
    }

    fn pair_mut(&mut self, subset: Subset) -> &mut Option<PhrasePair> {
        match subset {
            Subset::Obj => &mut self.obj,
            Subset::Attr => &mut self.attr,
            Subset::Rel => &mut self.rel,
            Subset::Wh => unreachable!("wh pairs are stored whole"),
        }
    }
}

impl Record for PhraseSet {
    const SCHEMA: &'static str = "phrase_set.v1";

    fn validate(&self) -> Result<(), String> {
        for s in Subset::ALL {
            if let Some(p) = self.pair(s) {
                p.validate().map_err(|e| format!("{} {}: {e}", self.image_id, s.key()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub tuple_id: String,
    pub image_id: String,
    pub image_uri: String,
    pub subset: Subset,
    pub polarity: Sign,
    pub query: String,
    pub accepted: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<u8>,
}

impl Record for PreferenceTuple {
    const SCHEMA: &'static str = "preference.v1";

    fn validate(&self) -> Result<(), String> {
        if self.accepted == self.rejected {
            return Err(format!("{}: accepted equals rejected", self.tuple_id));
        }
        if self.subset != Subset::Wh {
            let (a, r) = match self.polarity {
                Sign::Plus => ("Yes", "No"),
                Sign::Minus => ("No", "Yes"),
            };
            if !self.accepted.starts_with(a) || !self.rejected.starts_with(r) {
                return Err(format!("{}: accepted must start with {a:?} and rejected with {r:?}", self.tuple_id));
            }
            if !matches!(self.template_id, Some(1..=5)) {
                return Err(format!("{}: template_id must be 1..5", self.tuple_id));
            }
        }
        Ok(())
    }
}

fn ask_json(
    client: &ModelClient,
    endpoint: &str,
    prompt: &str,
    image_id: &str,
    stage: &'static str,
) -> Result<Result<serde_json::Map<String, Value>, DpoError>, DpoError> {
    let mut raw = String::new();
    for attempt in 0..2 {
        let text = if attempt == 0 { prompt.to_string() } else { format!("{prompt}{REPROMPT}") };
        let resp = client
            .complete(&ChatRequest::text(endpoint, text))
            .map_err(|source| DpoError::Endpoint { image_id: image_id.to_string(), source })?;
        if let Some(Value::Object(m)) = extract_json(&resp.text) {
            return Ok(Ok(m));
        }
        raw = resp.text;
    }
    Ok(Err(DpoError::UnparseableLlmOutput { image_id: image_id.to_string(), stage, raw_output: raw }))
}

/// Image category from its caption; `None` when the label is unusable.
pub fn classify_image_category(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoint: &str,
    caption: &CaptionRecord,
) -> Result<Option<ImageCategory>, DpoError> {
    if caption.caption.trim().is_empty() {
        return Err(DpoError::EmptyCaption { image_id: caption.image_id.clone() });
    }
    let prompt = prompts.render(PromptId::DpoCategory, &[("caption", &caption.caption)]);
    let resp = client
        .complete(&ChatRequest::text(endpoint, prompt).max_tokens(16))
        .map_err(|source| DpoError::Endpoint { image_id: caption.image_id.clone(), source })?;
    Ok(ImageCategory::parse(&resp.text))
}

fn str_list(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_str()).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default()
}

/// Asks for a replacement of `instance` and applies it to `text`.
#[allow(clippy::too_many_arguments)]
fn replace_instance(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoint: &str,
    image_id: &str,
    subset: Subset,
    text: &str,
    instance: &str,
    instances: &[String],
) -> Result<Option<PhrasePair>, DpoError> {
    let prompt = prompts.render(PromptId::DpoReplace, &[("phrase", text), ("kind", subset.noun()), ("instance", instance)]);
    let Ok(m) = ask_json(client, endpoint, &prompt, image_id, "dpo_replace")? else { return Ok(None) };
    let Some(rep) = m.get("replacement").and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty()) else {
        return Ok(None);
    };
    if instances.iter().any(|i| fold(i) == fold(rep)) {
        return Ok(None);
    }
    Ok(Some(PhrasePair {
        positive: text.to_string(),
        negative: text.replacen(instance, rep, 1),
        replaced_instance: instance.to_string(),
        replacement: rep.to_string(),
    }))
}

fn pick_instance<'a>(instances: &'a [String], text: &str, seed: Seed, label: &str) -> Option<&'a String> {
    let present: Vec<&String> = instances.iter().filter(|i| text.contains(i.as_str())).collect();
    present.choose(&mut seed.derive(label).rng()).copied()
}

/// Positive phrases and their negatives for one caption. Types the model
/// cannot produce are left out and listed in `omitted`.
pub fn extract_phrase_sets(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoint: &str,
    caption: &CaptionRecord,
    seed: Seed,
) -> Result<PhraseSet, DpoError> {
    let id = caption.image_id.as_str();
    if caption.caption.trim().is_empty() {
        return Err(DpoError::EmptyCaption { image_id: id.to_string() });
    }
    let mut ps = PhraseSet::empty(id, &caption.image_uri);
    let prompt = prompts.render(PromptId::DpoPhrases, &[("caption", &caption.caption)]);
    let phrases = match ask_json(client, endpoint, &prompt, id, "dpo_phrases")? {
        Ok(m) => m,
        Err(e) => {
            debug!(error = %e, "no phrases extracted");
            ps.omitted = Subset::ALL.to_vec();
            return Ok(ps);
        }
    };

    for subset in [Subset::Obj, Subset::Attr, Subset::Rel] {
        let Some(entry) = phrases.get(subset.key()).filter(|v| v.is_object()) else { continue };
        let Some(text) = entry["phrase"].as_str().map(str::trim).filter(|s| !s.is_empty()) else {
            ps.omitted.push(subset);
            continue;
        };
        let instances = str_list(&entry["instances"]);
        let Some(instance) = pick_instance(&instances, text, seed, &format!("{id}/{}/instance", subset.key())) else {
            ps.omitted.push(subset);
            continue;
        };
        match replace_instance(client, prompts, endpoint, id, subset, text, instance, &instances)? {
            Some(p) => *ps.pair_mut(subset) = Some(p),
            None => ps.omitted.push(subset),
        }
    }

    if let Some(entry) = phrases.get("wh").filter(|v| v.is_object()) {
        let question = entry["question"].as_str().map(str::trim).unwrap_or_default();
        let answer = entry["answer"].as_str().map(str::trim).unwrap_or_default();
        let instances = str_list(&entry["instances"]);
        let instance = pick_instance(&instances, question, seed, &format!("{id}/wh/instance"));
        let pair = match instance {
            Some(instance) if !answer.is_empty() => {
                let prompt =
                    prompts.render(PromptId::DpoWhNegative, &[("question", question), ("answer", answer), ("instance", instance)]);
                match ask_json(client, endpoint, &prompt, id, "dpo_wh_negative")? {
                    Ok(m) => {
                        let rep = m.get("replacement").and_then(Value::as_str).map(str::trim).unwrap_or_default();
                        let neg_answer = m.get("answer").and_then(Value::as_str).map(str::trim).unwrap_or_default();
                        let usable = !rep.is_empty()
                            && !neg_answer.is_empty()
                            && neg_answer != answer
                            && !instances.iter().any(|i| fold(i) == fold(rep));
                        usable.then(|| WhPair {
                            question: PhrasePair {
                                positive: question.to_string(),
                                negative: question.replacen(instance.as_str(), rep, 1),
                                replaced_instance: instance.clone(),
                                replacement: rep.to_string(),
                            },
                            positive_answer: answer.to_string(),
                            negative_answer: neg_answer.to_string(),
                        })
                    }
                    Err(_) => None,
                }
            }
            _ => None,
        };
        match pair {
            Some(p) => ps.wh = Some(p),
            None => ps.omitted.push(Subset::Wh),
        }
    }
    Ok(ps)
}

fn fill(template: &str, phrase: &str) -> String {
    template.replacen("{}", phrase, 1)
}

/// Template index (0-based) for one tuple.
pub fn template_choice(image_id: &str, subset: Subset, sign: Sign, seed: Seed) -> usize {
    let s = match sign {
        Sign::Plus => "+",
        Sign::Minus => "-",
    };
    seed.derive(&format!("{image_id}/{}/{s}", subset.key())).rng().gen_range(0..TEMPLATES.len())
}

/// Up to eight preference tuples: a positive and a negative one for each
/// type present.
///
/// Positive: the query and accepted "Yes" use Ψ⁺, the rejected "No" uses
/// Ψ⁻. Negative: the query and rejected "Yes" use Ψ⁻, the accepted "No"
/// restores Ψ⁺. Wh answers are symmetrized: each question's rejected
/// answer is the other question's accepted one.
pub fn compose_tuples(ps: &PhraseSet, seed: Seed) -> Vec<PreferenceTuple> {
    let mut out = Vec::new();
    let id = |subset: Subset, sign: Sign| {
        format!("{}/{}/{}", ps.image_id, subset.key(), if sign == Sign::Plus { '+' } else { '-' })
    };
    for subset in [Subset::Obj, Subset::Attr, Subset::Rel] {
        let Some(p) = ps.pair(subset) else { continue };
        for sign in [Sign::Plus, Sign::Minus] {
            let t = template_choice(&ps.image_id, subset, sign, seed);
            let (q, yes, no) = TEMPLATES[t];
            let (query, accepted, rejected) = match sign {
                Sign::Plus => (fill(q, &p.positive), fill(yes, &p.positive), fill(no, &p.negative)),
                Sign::Minus => (fill(q, &p.negative), fill(no, &p.positive), fill(yes, &p.negative)),
            };
            out.push(PreferenceTuple {
                tuple_id: id(subset, sign),
                image_id: ps.image_id.clone(),
                image_uri: ps.image_uri.clone(),
                subset,
                polarity: sign,
                query,
                accepted,
                rejected,
                template_id: Some(t as u8 + 1),
            });
        }
    }
    if let Some(w) = &ps.wh {
        for (sign, query, accepted, rejected) in [
            (Sign::Plus, &w.question.positive, &w.positive_answer, &w.negative_answer),
            (Sign::Minus, &w.question.negative, &w.negative_answer, &w.positive_answer),
        ] {
            out.push(PreferenceTuple {
                tuple_id: id(Subset::Wh, sign),
                image_id: ps.image_id.clone(),
                image_uri: ps.image_uri.clone(),
                subset: Subset::Wh,
                polarity: sign,
                query: query.clone(),
                accepted: accepted.clone(),
                rejected: rejected.clone(),
                template_id: None,
            });
        }
    }
    out
}

/// Uniform sample of at most `cap` items without replacement (reservoir
/// sampling). The output keeps the input order.
pub fn subsample<T>(items: impl IntoIterator<Item = T>, cap: usize, seed: Seed) -> Vec<T> {
    let mut rng = seed.derive("subsample").rng();
    let mut reservoir: Vec<(usize, T)> = Vec::with_capacity(cap.min(1 << 20));
    for (i, item) in items.into_iter().enumerate() {
        if i < cap {
            reservoir.push((i, item));
        } else {
            let j = rng.gen_range(0..=i);
            if j < cap {
                reservoir[j] = (i, item);
            }
        }
    }
    reservoir.sort_by_key(|(i, _)| *i);
    reservoir.into_iter().map(|(_, t)| t).collect()
}

/// Keeps sets whose category is allowed. Sets without a category pass.
pub fn filter_by_category(sets: Vec<PhraseSet>, allowed: &[ImageCategory]) -> Vec<PhraseSet> {
    sets.into_iter().filter(|s| s.category.is_none_or(|c| allowed.contains(&c))).collect()
}

/// Share of each category among labelled sets.
pub fn category_distribution(sets: &[PhraseSet]) -> BTreeMap<ImageCategory, f64> {
    let labelled: Vec<ImageCategory> = sets.iter().filter_map(|s| s.category).collect();
    let mut out = BTreeMap::new();
    for c in &labelled {
        *out.entry(*c).or_insert(0.0) += 1.0 / labelled.len() as f64;
    }
    out
}

/// Training-ready conversation preference layout.
pub fn trainer_export(tuples: &[PreferenceTuple]) -> Value {
    Value::Array(
        tuples
            .iter()
            .map(|t| {
                json!({
                    "conversations": [{"from": "human", "value": format!("<image>{}", t.query)}],
                    "chosen": {"from": "gpt", "value": t.accepted},
                    "rejected": {"from": "gpt", "value": t.rejected},
                    "images": [t.image_uri],
                })
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoFailure {
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DpoRun {
    pub phrase_sets: Vec<PhraseSet>,
    pub tuples: Vec<PreferenceTuple>,
    pub failures: Vec<DpoFailure>,
    /// Tuples before subsampling.
    pub total_tuples: usize,
}

/// Extraction for all captions, then composition and subsampling. With
/// `classify`, each caption's image category is requested and only sets in
/// `allowed` are composed (all sets when `allowed` is empty).
#[allow(clippy::too_many_arguments)]
pub fn build_dpo(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoint: &str,
    captions: &[CaptionRecord],
    classify: bool,
    allowed: &[ImageCategory],
    cap: usize,
    seed: Seed,
) -> DpoRun {
    let results = client.map_ordered(captions, |c| {
        let mut ps = extract_phrase_sets(client, prompts, endpoint, c, seed)?;
        if classify {
            ps.category = classify_image_category(client, prompts, endpoint, c)?;
        }
        Ok::<_, DpoError>(ps)
    });
    let mut run = DpoRun::default();
    for (c, r) in captions.iter().zip(results) {
        match r {
            Ok(ps) => run.phrase_sets.push(ps),
            Err(e) => run.failures.push(DpoFailure { image_id: c.image_id.clone(), reason: e.to_string() }),
        }
    }
    let kept = if classify && !allowed.is_empty() { filter_by_category(run.phrase_sets.clone(), allowed) } else { run.phrase_sets.clone() };
    let all: Vec<PreferenceTuple> = kept.iter().flat_map(|ps| compose_tuples(ps, seed)).collect();
    run.total_tuples = all.len();
    run.tuples = subsample(all, cap, seed);
    run
}

/// Scalar log-probabilities for one preference tuple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoExample {
    pub logp_policy_accepted: f64,
    pub logp_policy_rejected: f64,
    pub logp_ref_accepted: f64,
    pub logp_ref_rejected: f64,
    pub beta: f64,
}

impl DpoExample {
    pub fn validate(&self) -> Result<(), String> {
        let lps = [self.logp_policy_accepted, self.logp_policy_rejected, self.logp_ref_accepted, self.logp_ref_rejected];
        if lps.iter().any(|l| !l.is_finite() || *l > 0.0) {
            return Err("log-probabilities must be finite and <= 0".into());
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err("beta must be positive".into());
        }
        Ok(())
    }

    /// β((lpa − lpr) − (lra − lrr)).
    pub fn margin(&self) -> f64 {
        self.beta * ((self.logp_policy_accepted - self.logp_policy_rejected) - (self.logp_ref_accepted - self.logp_ref_rejected))
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// −ln σ(margin).
pub fn dpo_loss(ex: &DpoExample) -> f64 {
    softplus(-ex.margin())
}

/// Mean loss over a batch; 0 for an empty batch.
pub fn dpo_batch_loss(batch: &[DpoExample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(dpo_loss).sum::<f64>() / batch.len() as f64
}

/// Partial derivatives with respect to
/// `[policy_accepted, policy_rejected, ref_accepted, ref_rejected]`.
pub fn dpo_gradient(ex: &DpoExample) -> [f64; 4] {
    let g = ex.beta * sigmoid(-ex.margin());
    [-g, g, g, -g]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_set() -> PhraseSet {
        let mut ps = PhraseSet::empty("img", "https://x/img.jpg");
        ps.obj = Some(PhrasePair {
            positive: "a car and a tree".into(),
            negative: "a car and a lamp post".into(),
            replaced_instance: "tree".into(),
            replacement: "lamp post".into(),
        });
        ps.attr = Some(PhrasePair {
            positive: "car with yellow bumper".into(),
            negative: "car with chrome bumper".into(),
            replaced_instance: "yellow".into(),
            replacement: "chrome".into(),
        });
        ps.rel = Some(PhrasePair {
            positive: "dog sitting next to the car".into(),
            negative: "dog sleeping under the car".into(),
            replaced_instance: "sitting next to".into(),
            replacement: "sleeping under".into(),
        });
        ps.wh = Some(WhPair {
            question: PhrasePair {
                positive: "What is the dog with brown fur sitting next to?".into(),
                negative: "What is the dog with white fur sitting next to?".into(),
                replaced_instance: "brown".into(),
                replacement: "white".into(),
            },
            positive_answer: "The dog is sitting next to the car.".into(),
            negative_answer: "The dog does not have white fur; it has brown fur.".into(),
        });
        ps
    }

    #[test]
    fn full_set_gives_eight_valid_tuples() {
        let ps = full_set();
        Record::validate(&ps).unwrap();
        let ts = compose_tuples(&ps, Seed(1));
        assert_eq!(ts.len(), 8);
        for t in &ts {
            Record::validate(t).unwrap();
        }
        let wh: Vec<&PreferenceTuple> = ts.iter().filter(|t| t.subset == Subset::Wh).collect();
        assert_eq!(wh[0].rejected, wh[1].accepted);
        assert_eq!(wh[1].rejected, wh[0].accepted);
    }

    #[test]
    fn template_four_filling() {
        let ps = full_set();
        let seed = (0..1000u64)
            .map(Seed)
            .find(|s| template_choice("img", Subset::Attr, Sign::Plus, *s) == 3)
            .unwrap();
        let t = compose_tuples(&ps, seed).into_iter().find(|t| t.subset == Subset::Attr && t.polarity == Sign::Plus).unwrap();
        assert_eq!(t.template_id, Some(4));
        assert_eq!(t.query, "Can you see car with yellow bumper in this image?");
        assert_eq!(t.accepted, "Yes, I can see car with yellow bumper in this image.");
        assert_eq!(t.rejected, "No, but I can see car with chrome bumper in this image.");
    }

    #[test]
    fn partial_set_skips_missing_types() {
        let mut ps = full_set();
        ps.attr = None;
        ps.wh = None;
        let ts = compose_tuples(&ps, Seed(0));
        assert_eq!(ts.len(), 4);
        assert!(ts.iter().all(|t| t.subset != Subset::Attr));
    }

    #[test]
    fn reservoir_properties() {
        let small = subsample(0..10, 100, Seed(3));
        assert_eq!(small, (0..10).collect::<Vec<_>>());
        let a = subsample(0..10_000, 500, Seed(3));
        let b = subsample(0..10_000, 500, Seed(3));
        assert_eq!(a.len(), 500);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, subsample(0..10_000, 500, Seed(4)));
    }

    #[test]
    fn loss_reference_values() {
        let ex = DpoExample { logp_policy_accepted: -1.0, logp_policy_rejected: -2.0, logp_ref_accepted: -1.0, logp_ref_rejected: -2.0, beta: 0.1 };
        assert!((dpo_loss(&ex) - std::f64::consts::LN_2).abs() < 1e-12);
        let ex = DpoExample { logp_policy_accepted: -1.0, logp_policy_rejected: -11.0, logp_ref_accepted: -3.0, logp_ref_rejected: -3.0, beta: 0.1 };
        assert!((dpo_loss(&ex) - 0.313261687518223).abs() < 1e-12);
        let huge = DpoExample { logp_policy_accepted: -5000.0, logp_policy_rejected: 0.0, logp_ref_accepted: 0.0, logp_ref_rejected: 0.0, beta: 0.1 };
        assert!((dpo_loss(&huge) - 500.0).abs() < 1e-9);
    }

    #[test]
    fn category_parsing_and_fail_open() {
        assert_eq!(ImageCategory::parse("chart_graph"), Some(ImageCategory::ChartGraph));
        assert_eq!(ImageCategory::parse("It is a Document Text image"), Some(ImageCategory::DocumentText));
        assert_eq!(ImageCategory::parse(""), None);
        let mut a = full_set();
        a.category = Some(ImageCategory::ChartGraph);
        let b = full_set();
        let kept = filter_by_category(vec![a, b], &[ImageCategory::NaturalImage]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].category, None);
    }

    #[test]
    fn export_layout() {
        let ts = compose_tuples(&full_set(), Seed(0));
        let v = trainer_export(&ts[..1]);
        assert_eq!(v[0]["conversations"][0]["from"], "human");
        assert!(v[0]["conversations"][0]["value"].as_str().unwrap().starts_with("<image>"));
        assert_eq!(v[0]["chosen"]["value"], ts[0].accepted);
        assert_eq!(v[0]["images"][0], "https://x/img.jpg");
    }
}
