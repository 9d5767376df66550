//! Caption to scene graph extraction.
//!
//! Stage one asks a text model for objects and attributes, stage two asks
//! about each object pair. Every surface string is kept only when it occurs
//! verbatim in the caption. Relation candidates are then checked twice, once
//! against the caption by the text model and once against the image by the
//! multimodal model, and dropped only when both say no.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::client::{ChatRequest, ClientError, ModelClient};
use crate::jsonl::Record;
use crate::prompts::{PromptId, PromptSet};
use crate::text::{extract_json, occurs_verbatim, parse_yes_no, with_phrase};
use crate::types::{fold, EntityId, SceneGraph};
use crate::Seed;

const REPROMPT: &str = "\n\nYour previous answer could not be parsed. Answer with JSON only, exactly in the requested shape.";
const ARTICLES: [&str; 3] = ["a ", "an ", "the "];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub image_uri: String,
    pub caption: String,
}

impl Record for CaptionRecord {
    const SCHEMA: &'static str = "captions.v1";

    fn validate(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        if self.caption.trim().is_empty() {
            return Err(format!("{}: empty caption", self.image_id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    Discarded,
    NeedsHuman,
}

/// One proposed relation with its two support checks. A support flag is
/// `None` when the check could not be made (endpoint failure or an answer
/// that was neither yes nor no).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationCandidate {
    pub image_id: String,
    pub subject: EntityId,
    pub object: EntityId,
    pub predicate_text: String,
    /// `subject predicate object` as shown to the checkers.
    pub statement: String,
    #[serde(default)]
    pub caption_supported: Option<bool>,
    #[serde(default)]
    pub image_supported: Option<bool>,
    #[serde(default)]
    pub verdict: Option<Verdict>,
    /// Kept on a split verdict; candidates for human spot checks.
    #[serde(default)]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RelationCandidate {
    /// Verdict implied by the support flags.
    pub fn decide(caption: Option<bool>, image: Option<bool>) -> (Verdict, bool) {
        match (caption, image) {
            (Some(false), Some(false)) => (Verdict::Discarded, false),
            (Some(true), Some(true)) => (Verdict::Kept, false),
            (Some(_), Some(_)) => (Verdict::Kept, true),
            _ => (Verdict::NeedsHuman, false),
        }
    }
}

impl Record for RelationCandidate {
    const SCHEMA: &'static str = "relation_audit.v1";

    fn validate(&self) -> Result<(), String> {
        if let Some(v) = self.verdict {
            let (expected, _) = RelationCandidate::decide(self.caption_supported, self.image_supported);
            if v != expected {
                return Err(format!("{}: verdict {v:?} inconsistent with support flags", self.statement));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub image_id: String,
    pub stage: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub raw_output: String,
}

impl Record for RejectRecord {
    const SCHEMA: &'static str = "sg_reject.v1";
}

#[derive(Debug, Error)]
pub enum SgError {
    #[error("{image_id}: unparseable {stage} output after one reprompt")]
    UnparseableLlmOutput { image_id: String, stage: &'static str, raw_output: String },
    #[error("{image_id}: {source}")]
    Endpoint {
        image_id: String,
        #[source]
        source: ClientError,
    },
}

impl SgError {
    pub fn to_reject(&self) -> RejectRecord {
        match self {
            SgError::UnparseableLlmOutput { image_id, stage, raw_output } => RejectRecord {
                image_id: image_id.clone(),
                stage: stage.to_string(),
                reason: "unparseable model output".into(),
                raw_output: raw_output.clone(),
            },
            SgError::Endpoint { image_id, source } => RejectRecord {
                image_id: image_id.clone(),
                stage: "endpoint".into(),
                reason: source.to_string(),
                raw_output: String::new(),
            },
        }
    }
}

/// Endpoints used by the extraction pipeline.
#[derive(Clone, Debug)]
pub struct SgEndpoints {
    pub llm: String,
    pub mllm: String,
}

fn strip_article(name: &str) -> &str {
    let t = name.trim();
    for a in ARTICLES {
        if t.len() > a.len() && t[..a.len()].eq_ignore_ascii_case(a) {
            return t[a.len()..].trim_start();
        }
    }
    t
}

/// Sends `prompt`, parses it with `parse`, and retries once with a reprompt
/// suffix when parsing fails.
fn ask_parsed<T>(
    client: &ModelClient,
    endpoint: &str,
    prompt: &str,
    image_id: &str,
    stage: &'static str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<T, SgError> {
    let mut raw = String::new();
    for attempt in 0..2 {
        let text = if attempt == 0 { prompt.to_string() } else { format!("{prompt}{REPROMPT}") };
        let resp = client
            .complete(&ChatRequest::text(endpoint, text))
            .map_err(|source| SgError::Endpoint { image_id: image_id.to_string(), source })?;
        if let Some(v) = parse(&resp.text) {
            return Ok(v);
        }
        debug!(image_id, stage, attempt, "unparseable output");
        raw = resp.text;
    }
    Err(SgError::UnparseableLlmOutput { image_id: image_id.to_string(), stage, raw_output: raw })
}

#[derive(Deserialize)]
struct RawAttr {
    text: String,
    #[serde(default)]
    phrase: Option<String>,
}

#[derive(Deserialize)]
struct RawObject {
    name: String,
    #[serde(default)]
    attributes: Vec<RawAttr>,
}

fn parse_objects(text: &str) -> Option<Vec<RawObject>> {
    let v = extract_json(text)?;
    let objs = match &v {
        Value::Object(m) => m.get("objects")?.clone(),
        Value::Array(_) => v.clone(),
        _ => return None,
    };
    serde_json::from_value(objs).ok()
}

/// Stage one: objects and their attributes, verbatim-filtered against the
/// caption. Attributes are stored as `with ...` phrases.
pub fn extract_objects_attributes(
    client: &ModelClient,
    prompts: &PromptSet,
    llm: &str,
    rec: &CaptionRecord,
) -> Result<SceneGraph, SgError> {
    let prompt = prompts.render(PromptId::SgObjects, &[("caption", &rec.caption)]);
    let raw = ask_parsed(client, llm, &prompt, &rec.image_id, "objects", parse_objects)?;

    let mut sg = SceneGraph::new(&rec.image_id, &rec.image_uri);
    let mut by_name: HashMap<String, EntityId> = HashMap::new();
    for obj in raw {
        let name = strip_article(&obj.name).to_string();
        if name.is_empty() || !occurs_verbatim(&name, &rec.caption) {
            debug!(image_id = %rec.image_id, name = %obj.name, "dropping non-verbatim object");
            continue;
        }
        let id = by_name.entry(fold(&name)).or_insert_with(|| sg.add_object(name.clone())).clone();
        for a in obj.attributes {
            if a.text.trim().is_empty() || !occurs_verbatim(&a.text, &rec.caption) {
                debug!(image_id = %rec.image_id, attr = %a.text, "dropping non-verbatim attribute");
                continue;
            }
            let phrase = match a.phrase.as_deref().map(str::trim) {
                Some(p) if p.to_lowercase().starts_with("with ") && p.len() > 5 => with_phrase(p),
                _ => with_phrase(a.text.trim()),
            };
            if sg.attributes_of(&id).any(|x| fold(&x.phrase) == fold(&phrase)) {
                continue;
            }
            let aid = sg.add_attribute(&id, phrase);
            if let Some(node) = sg.attributes.iter_mut().find(|x| x.id == aid) {
                node.source_text = Some(a.text.trim().to_string());
            }
        }
    }
    Ok(sg)
}

#[derive(Deserialize)]
struct RawRelation {
    #[serde(default)]
    subject: Option<String>,
    #[serde(default)]
    predicate: Option<String>,
    #[serde(default)]
    object: Option<String>,
}

fn parse_relation(text: &str) -> Option<RawRelation> {
    serde_json::from_value(extract_json(text)?).ok()
}

/// Stage two: one query per unordered object pair. Pairs without a stated
/// relation, or whose relation phrase is not verbatim, yield nothing.
pub fn extract_relations(
    client: &ModelClient,
    prompts: &PromptSet,
    llm: &str,
    sg: &SceneGraph,
    rec: &CaptionRecord,
) -> Result<Vec<RelationCandidate>, SgError> {
    let mut out = Vec::new();
    for (i, a) in sg.objects.iter().enumerate() {
        for b in &sg.objects[i + 1..] {
            let prompt = prompts.render(
                PromptId::SgRelations,
                &[("caption", &rec.caption), ("first", &a.name), ("second", &b.name)],
            );
            let raw = ask_parsed(client, llm, &prompt, &rec.image_id, "relations", parse_relation)?;
            let Some(pred) = raw.predicate.map(|p| p.trim().to_string()).filter(|p| !p.is_empty()) else {
                continue;
            };
            if !occurs_verbatim(&pred, &rec.caption) {
                debug!(image_id = %rec.image_id, predicate = %pred, "dropping non-verbatim relation");
                continue;
            }
            let named = |n: &Option<String>, o: &crate::types::ObjectNode| {
                n.as_deref().is_some_and(|n| fold(strip_article(n)) == fold(&o.name))
            };
            let reversed = fold(&a.name) != fold(&b.name) && named(&raw.subject, b) && named(&raw.object, a);
            let (s, o) = if reversed { (b, a) } else { (a, b) };
            out.push(RelationCandidate {
                image_id: rec.image_id.clone(),
                subject: s.id.clone(),
                object: o.id.clone(),
                statement: format!("{} {} {}", s.name, pred, o.name),
                predicate_text: pred,
                caption_supported: None,
                image_supported: None,
                verdict: None,
                flagged: false,
                note: None,
            });
        }
    }
    Ok(out)
}

fn yes_no(client: &ModelClient, req: ChatRequest) -> Result<Option<bool>, ClientError> {
    Ok(parse_yes_no(&client.complete(&req)?.text))
}

/// Sets both support flags and the verdict on every candidate. Endpoint
/// failures do not abort; the candidate becomes `NeedsHuman`.
pub fn validate_relations(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoints: &SgEndpoints,
    rec: &CaptionRecord,
    mut cands: Vec<RelationCandidate>,
) -> Vec<RelationCandidate> {
    for c in &mut cands {
        let mut notes = Vec::new();
        let image_prompt = prompts.render(PromptId::RelImageCheck, &[("relation", &c.statement)]);
        c.image_supported = match yes_no(client, ChatRequest::with_image(&endpoints.mllm, image_prompt, &rec.image_uri).max_tokens(8)) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("image check: {e}"));
                None
            }
        };
        let caption_prompt =
            prompts.render(PromptId::RelCaptionCheck, &[("relation", &c.statement), ("caption", &rec.caption)]);
        c.caption_supported = match yes_no(client, ChatRequest::text(&endpoints.llm, caption_prompt).max_tokens(8)) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("caption check: {e}"));
                None
            }
        };
        let (verdict, flagged) = RelationCandidate::decide(c.caption_supported, c.image_supported);
        c.verdict = Some(verdict);
        c.flagged = flagged;
        if !notes.is_empty() {
            warn!(image_id = %rec.image_id, statement = %c.statement, "relation needs human review");
            c.note = Some(notes.join("; "));
        }
    }
    cands
}

/// Result of running both stages and validation on one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct SgOutcome {
    pub graph: SceneGraph,
    pub candidates: Vec<RelationCandidate>,
}

pub fn extract_scene_graph(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoints: &SgEndpoints,
    rec: &CaptionRecord,
) -> Result<SgOutcome, SgError> {
    let mut graph = extract_objects_attributes(client, prompts, &endpoints.llm, rec)?;
    let cands = if graph.objects.len() >= 2 {
        extract_relations(client, prompts, &endpoints.llm, &graph, rec)?
    } else {
        Vec::new()
    };
    let candidates = validate_relations(client, prompts, endpoints, rec, cands);
    for c in &candidates {
        if c.verdict == Some(Verdict::Kept)
            && !graph
                .relations
                .iter()
                .any(|r| r.subject == c.subject && r.object == c.object && r.predicate == c.predicate_text)
        {
            let id = graph.add_relation(&c.subject, c.predicate_text.clone(), &c.object);
            if let Some(r) = graph.relations.iter_mut().find(|r| r.id == id) {
                r.source_text = Some(c.statement.clone());
            }
        }
    }
    Ok(SgOutcome { graph, candidates })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgRun {
    pub graphs: Vec<SceneGraph>,
    pub audit: Vec<RelationCandidate>,
    pub rejects: Vec<RejectRecord>,
}

/// Runs extraction over all captions concurrently; outputs keep input order.
pub fn run_extraction(
    client: &ModelClient,
    prompts: &PromptSet,
    endpoints: &SgEndpoints,
    captions: &[CaptionRecord],
) -> SgRun {
    let results = client.map_ordered(captions, |rec| extract_scene_graph(client, prompts, endpoints, rec));
    let mut run = SgRun::default();
    for r in results {
        match r {
            Ok(o) => {
                run.graphs.push(o.graph);
                run.audit.extend(o.candidates);
            }
            Err(e) => {
                warn!(error = %e, "caption rejected");
                run.rejects.push(e.to_reject());
            }
        }
    }
    run
}

/// Seeded sample of up to `n` split-verdict candidates for human review.
pub fn audit_sample(audit: &[RelationCandidate], n: usize, seed: Seed) -> Vec<RelationCandidate> {
    let flagged: Vec<&RelationCandidate> = audit.iter().filter(|c| c.flagged).collect();
    let mut rng = seed.derive("relation-audit").rng();
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, flagged.len(), n.min(flagged.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| flagged[i].clone()).collect()
}

/// Pre-structured annotation (object list with attribute texts and
/// relation triplets by object name), as shipped by some caption corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredAnnotation {
    pub image_id: String,
    pub image_uri: String,
    pub objects: Vec<StructuredObject>,
    #[serde(default)]
    pub relations: Vec<StructuredRelation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredObject {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredRelation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    #[serde(default)]
    pub source_text: Option<String>,
}

impl Record for StructuredAnnotation {
    const SCHEMA: &'static str = "structured_annotation.v1";
}

/// Converts a structured annotation without any model calls. Relations
/// naming unknown objects are skipped and reported.
pub fn import_structured(ann: &StructuredAnnotation) -> (SceneGraph, Vec<String>) {
    let mut sg = SceneGraph::new(&ann.image_id, &ann.image_uri);
    let mut skipped = Vec::new();
    let mut ids: HashMap<String, EntityId> = HashMap::new();
    for o in &ann.objects {
        let id = ids.entry(fold(&o.name)).or_insert_with(|| sg.add_object(o.name.trim())).clone();
        for a in &o.attributes {
            let phrase = with_phrase(a);
            if !sg.attributes_of(&id).any(|x| x.phrase == phrase) {
                let aid = sg.add_attribute(&id, phrase);
                if let Some(n) = sg.attributes.iter_mut().find(|x| x.id == aid) {
                    n.source_text = Some(a.clone());
                }
            }
        }
    }
    for r in &ann.relations {
        match (ids.get(&fold(&r.subject)), ids.get(&fold(&r.object))) {
            (Some(s), Some(o)) => {
                let (s, o) = (s.clone(), o.clone());
                if sg.relations.iter().any(|x| x.subject == s && x.object == o && x.predicate == r.predicate) {
                    continue;
                }
                let id = sg.add_relation(&s, r.predicate.trim(), &o);
                if let Some(n) = sg.relations.iter_mut().find(|x| x.id == id) {
                    n.source_text = r.source_text.clone();
                }
            }
            _ => skipped.push(format!("{} {} {}", r.subject, r.predicate, r.object)),
        }
    }
    (sg, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{CacheMode, ChatResponse, EndpointSpec, ScriptedBackend};
    use std::sync::Arc;

    fn rec(caption: &str) -> CaptionRecord {
        CaptionRecord { image_id: "img1".into(), image_uri: "file:///img1.jpg".into(), caption: caption.into() }
    }

    fn client(handler: impl Fn(&ChatRequest) -> Result<ChatResponse, crate::client::BackendError> + Send + Sync + 'static) -> ModelClient {
        let b: Arc<ScriptedBackend> = Arc::new(ScriptedBackend::new(handler));
        ModelClient::builder()
            .endpoint(EndpointSpec::new("llm"), Some(b.clone()))
            .endpoint(EndpointSpec::new("mllm"), Some(b))
            .mode(CacheMode::Off)
            .build()
            .unwrap()
    }

    fn endpoints() -> SgEndpoints {
        SgEndpoints { llm: "llm".into(), mllm: "mllm".into() }
    }

    #[test]
    fn black_cat_on_desk() {
        let c = client(|req| {
            let p = req.prompt_text();
            let set = PromptSet::default();
            Ok(ChatResponse::text(match set.identify(&p) {
                Some(PromptId::SgObjects) => r#"```json
{"objects": [{"name": "cat", "attributes": [{"text": "black", "phrase": "with a black color"}]},
             {"name": "the desk", "attributes": []},
             {"name": "dog", "attributes": [{"text": "brown"}]}]}
```"#
                .to_string(),
                Some(PromptId::SgRelations) => {
                    r#"{"subject": "cat", "predicate": "lying on", "object": "desk"}"#.to_string()
                }
                Some(PromptId::RelImageCheck) => "Yes".into(),
                Some(PromptId::RelCaptionCheck) => "yes".into(),
                _ => "?".into(),
            }))
        });
        let r = rec("A black cat lying on a desk.");
        let out = extract_scene_graph(&c, &PromptSet::default(), &endpoints(), &r).unwrap();
        let g = out.graph;
        let names: Vec<&str> = g.objects.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, ["cat", "desk"]);
        assert_eq!(g.attributes.len(), 1);
        assert_eq!(g.attributes[0].phrase, "with a black color");
        for s in ["cat", "desk", g.attributes[0].source_text.as_deref().unwrap()] {
            assert!(occurs_verbatim(s, &r.caption), "{s}");
        }
        assert_eq!(g.relations.len(), 1);
        assert_eq!(g.render(&g.relations[0].id, None).unwrap(), "cat lying on desk");
        g.validate().unwrap();
    }

    #[test]
    fn empty_extraction_is_accepted() {
        let c = client(|_| Ok(ChatResponse::text(r#"{"objects": []}"#)));
        let g = extract_objects_attributes(&c, &PromptSet::default(), "llm", &rec("It was a beautiful day.")).unwrap();
        assert!(g.objects.is_empty());
    }

    #[test]
    fn reprompts_once_then_rejects() {
        let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c2 = calls.clone();
        let c = client(move |req| {
            c2.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if req.prompt_text().contains("could not be parsed") {
                Ok(ChatResponse::text(r#"{"objects": [{"name": "cat"}]}"#))
            } else {
                Ok(ChatResponse::text("cat, desk"))
            }
        });
        let g = extract_objects_attributes(&c, &PromptSet::default(), "llm", &rec("A cat.")).unwrap();
        assert_eq!(g.objects.len(), 1);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);

        let c = client(|_| Ok(ChatResponse::text("no json here")));
        let e = extract_objects_attributes(&c, &PromptSet::default(), "llm", &rec("A cat.")).unwrap_err();
        assert!(matches!(e, SgError::UnparseableLlmOutput { stage: "objects", .. }));
        assert_eq!(e.to_reject().image_id, "img1");
    }

    #[test]
    fn relation_direction_and_missing_pairs() {
        let c = client(|req| {
            let p = req.prompt_text();
            Ok(ChatResponse::text(if p.contains("\"desk\" and \"cat\"") {
                r#"{"subject": "cat", "predicate": "is lying on", "object": "desk"}"#
            } else {
                r#"{"subject": null, "predicate": null, "object": null}"#
            }))
        });
        let mut sg = SceneGraph::new("img1", "u");
        sg.add_object("desk");
        sg.add_object("cat");
        sg.add_object("lamp");
        let r = rec("The cat is lying on a desk near a lamp.");
        let cands = extract_relations(&c, &PromptSet::default(), "llm", &sg, &r).unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].subject, sg.objects[1].id);
        assert_eq!(cands[0].statement, "cat is lying on desk");

        let mut one = SceneGraph::new("img1", "u");
        one.add_object("cat");
        assert!(extract_relations(&c, &PromptSet::default(), "llm", &one, &r).unwrap().is_empty());
    }

    #[test]
    fn verdict_rule() {
        use Verdict::*;
        assert_eq!(RelationCandidate::decide(Some(true), Some(true)), (Kept, false));
        assert_eq!(RelationCandidate::decide(Some(false), Some(false)), (Discarded, false));
        assert_eq!(RelationCandidate::decide(Some(false), Some(true)), (Kept, true));
        assert_eq!(RelationCandidate::decide(Some(true), Some(false)), (Kept, true));
        assert_eq!(RelationCandidate::decide(None, Some(true)), (NeedsHuman, false));
    }

    #[test]
    fn validation_keeps_split_and_drops_double_no() {
        let c = client(|req| {
            let p = req.prompt_text();
            let image = req.image_uri().is_some();
            Ok(ChatResponse::text(match (p.contains("cat is on desk"), image) {
                (true, true) => "yes",
                (true, false) => "no",
                (false, _) => "No.",
            }))
        });
        let mk = |s: &str| RelationCandidate {
            image_id: "img1".into(),
            subject: EntityId::object("img1", 0),
            object: EntityId::object("img1", 1),
            predicate_text: "x".into(),
            statement: s.into(),
            caption_supported: None,
            image_supported: None,
            verdict: None,
            flagged: false,
            note: None,
        };
        let out = validate_relations(&c, &PromptSet::default(), &endpoints(), &rec("x"), vec![mk("cat is on desk"), mk("cat is under desk")]);
        assert_eq!(out[0].verdict, Some(Verdict::Kept));
        assert!(out[0].flagged);
        assert_eq!(out[1].verdict, Some(Verdict::Discarded));
        for c in &out {
            Record::validate(c).unwrap();
        }
        assert_eq!(audit_sample(&out, 5, Seed(1)).len(), 1);
    }

    #[test]
    fn endpoint_failure_marks_needs_human() {
        let c = client(|req| {
            if req.image_uri().is_some() {
                Err(crate::client::BackendError::new(Some(400), "bad image"))
            } else {
                Ok(ChatResponse::text("yes"))
            }
        });
        let cand = RelationCandidate {
            image_id: "img1".into(),
            subject: EntityId::object("img1", 0),
            object: EntityId::object("img1", 1),
            predicate_text: "on".into(),
            statement: "cat on desk".into(),
            caption_supported: None,
            image_supported: None,
            verdict: None,
            flagged: false,
            note: None,
        };
        let out = validate_relations(&c, &PromptSet::default(), &endpoints(), &rec("x"), vec![cand]);
        assert_eq!(out[0].verdict, Some(Verdict::NeedsHuman));
        assert!(out[0].note.as_deref().unwrap().contains("image check"));
    }

    #[test]
    fn structured_import() {
        let ann = StructuredAnnotation {
            image_id: "i".into(),
            image_uri: "u".into(),
            objects: vec![
                StructuredObject { name: "cat".into(), attributes: vec!["black".into()] },
                StructuredObject { name: "door frame".into(), attributes: vec![] },
            ],
            relations: vec![
                StructuredRelation { subject: "cat".into(), predicate: "next to".into(), object: "door frame".into(), source_text: None },
                StructuredRelation { subject: "cat".into(), predicate: "on".into(), object: "sofa".into(), source_text: None },
            ],
        };
        let (g, skipped) = import_structured(&ann);
        g.validate().unwrap();
        assert_eq!(g.attributes[0].phrase, "with black");
        assert_eq!(g.relations.len(), 1);
        assert_eq!(skipped, vec!["cat on sofa"]);
    }
}
