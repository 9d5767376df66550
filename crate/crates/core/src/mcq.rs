//! Paired multiple-choice question construction.
//!
//! Every benchmark item is a pair: a positive question whose premise holds
//! in the image and a negative twin that differs in exactly one entity.
//! Yes/no style settings use the template
//!
//! ```text
//! Q: Can you see {X} in this image?
//! Yes, I can see {Y} in this image.
//! No, but I can see {Z_j} in this image.   (j = 1..4)
//! ```
//!
//! Wh questions instead offer four object answers plus a correction
//! sentence about an attribute of the context object.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatRequest, ClientError, ModelClient};
use crate::jsonl::Record;
use crate::prompts::{PromptId, PromptSet};
use crate::text::{capitalize, join_entities};
use crate::types::{fold, EntityId, EntityKind, NegativeSet, SceneGraph};
use crate::Seed;

pub const LADDER_LEVELS: usize = 7;
const WH_REPROMPT: &str = "\n\nYour previous answer was not usable. Reply with one question that contains {context} exactly once.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    MultiObj,
    MultiAttr,
    MultiRel,
    Wh,
    Granularity,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::MultiObj, Setting::MultiAttr, Setting::MultiRel, Setting::Wh, Setting::Granularity];

    pub fn short(self) -> &'static str {
        match self {
            Setting::MultiObj => "obj",
            Setting::MultiAttr => "attr",
            Setting::MultiRel => "rel",
            Setting::Wh => "wh",
            Setting::Granularity => "granularity",
        }
    }

    pub fn parse(s: &str) -> Option<Setting> {
        Setting::ALL.into_iter().find(|x| x.short() == s.trim())
    }

    pub fn multi(kind: EntityKind) -> Setting {
        match kind {
            EntityKind::Object => Setting::MultiObj,
            EntityKind::Attribute => Setting::MultiAttr,
            EntityKind::Relation => Setting::MultiRel,
        }
    }

    pub fn kind(self) -> Option<EntityKind> {
        match self {
            Setting::MultiObj => Some(EntityKind::Object),
            Setting::MultiAttr => Some(EntityKind::Attribute),
            Setting::MultiRel => Some(EntityKind::Relation),
            _ => None,
        }
    }

    /// Largest entity count built for a multi setting.
    pub fn k_max(self) -> usize {
        match self {
            Setting::MultiObj => 6,
            Setting::MultiAttr | Setting::MultiRel => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> char {
        match self {
            Polarity::Positive => '+',
            Polarity::Negative => '-',
        }
    }
}

/// Whether an option accepts the question's premise (a "Yes" or an object
/// answer) or rejects it (a "No, but" or a correction).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionRole {
    Affirm,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mcq {
    pub mcq_id: String,
    pub pair_id: String,
    pub setting: Setting,
    pub polarity: Polarity,
    pub image_id: String,
    pub image_uri: String,
    pub question: String,
    pub options: [String; 5],
    pub option_roles: [OptionRole; 5],
    pub answer_index: usize,
    pub entity_count: usize,
    /// Entities the question talks about, in phrase order.
    pub entities: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negated_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negated_entity: Option<EntityId>,
    /// Which of the four negatives fills the negative question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_index: Option<usize>,
    /// Wh questions: the context attribute that is corrupted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted_attribute: Option<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity_level: Option<u8>,
    /// Set on rotation variants: the pair whose positive they share.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_of: Option<String>,
    pub shuffle_seed: Seed,
}

impl Mcq {
    pub fn correct_option(&self) -> &str {
        &self.options[self.answer_index]
    }

    /// Pair whose positive MCQ this question is scored against.
    pub fn base_pair_id(&self) -> &str {
        self.rotation_of.as_deref().unwrap_or(&self.pair_id)
    }
}

impl Record for Mcq {
    const SCHEMA: &'static str = "mcq.v1";

    fn validate(&self) -> Result<(), String> {
        if self.answer_index > 4 {
            return Err(format!("{}: answer_index {} out of range", self.mcq_id, self.answer_index));
        }
        let distinct: HashSet<String> = self.options.iter().map(|o| fold(o)).collect();
        if distinct.len() != 5 {
            return Err(format!("{}: options are not pairwise distinct", self.mcq_id));
        }
        if self.entity_count == 0 {
            return Err(format!("{}: entity_count must be positive", self.mcq_id));
        }
        if let Some(p) = self.negated_position {
            if p >= self.entity_count.max(self.entities.len()) {
                return Err(format!("{}: negated_position {p} out of range", self.mcq_id));
            }
        }
        if self.polarity == Polarity::Negative {
            let marked = if self.setting == Setting::Wh {
                self.corrupted_attribute.is_some()
            } else {
                self.negated_position.is_some()
            };
            if !marked {
                return Err(format!("{}: negative question without its corrupted element", self.mcq_id));
            }
        }
        if let Some(l) = self.granularity_level {
            if !(1..=LADDER_LEVELS as u8).contains(&l) {
                return Err(format!("{}: granularity_level {l} out of range", self.mcq_id));
            }
        }
        Ok(())
    }
}

/// Yes/no rendering of a granularity level. The expected answer is always
/// "No".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryQuery {
    pub query_id: String,
    pub image_id: String,
    pub image_uri: String,
    pub granularity_level: u8,
    pub question: String,
    pub expected_answer: String,
}

impl Record for BinaryQuery {
    const SCHEMA: &'static str = "binary_query.v1";
}

/// Ordered surface parts and their joined phrase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityPhrase {
    pub parts: Vec<(EntityId, String)>,
    pub joined: String,
}

impl EntityPhrase {
    pub fn new(parts: Vec<(EntityId, String)>) -> Self {
        let joined = join_entities(&parts.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>());
        EntityPhrase { parts, joined }
    }

    /// Same phrase with one slot's surface replaced.
    pub fn replace(&self, slot: usize, surface: String) -> Self {
        let mut parts = self.parts.clone();
        parts[slot].1 = surface;
        EntityPhrase::new(parts)
    }
}

#[derive(Debug, Error)]
pub enum McqError {
    #[error("{image_id}: need {needed} entities, found {available}")]
    InsufficientEntities { image_id: String, needed: usize, available: usize },
    #[error("{image_id}: no {what} has a usable negative set")]
    MissingNegatives { image_id: String, what: String },
    #[error("{image_id}: {reason}")]
    InsufficientNegatives { image_id: String, reason: String },
    #[error("{image_id}: unusable question template {raw_output:?}")]
    UnparseableLlmOutput { image_id: String, raw_output: String },
    #[error("{image_id}: {source}")]
    Endpoint {
        image_id: String,
        #[source]
        source: ClientError,
    },
    #[error("{pair_id}: rotations need exactly 3 entities, found {k}")]
    WrongArity { pair_id: String, k: usize },
    #[error("{pair_id}: pair is missing a polarity")]
    OrphanPair { pair_id: String },
    #[error("{0} is not in its scene graph")]
    UnknownEntity(EntityId),
}

/// Negative sets by target, skipping sets flagged for human review.
#[derive(Debug, Default)]
pub struct NegIndex<'a> {
    sets: HashMap<&'a EntityId, &'a NegativeSet>,
}

impl<'a> NegIndex<'a> {
    pub fn new(sets: &'a [NegativeSet]) -> Self {
        NegIndex { sets: sets.iter().filter(|s| !s.needs_human).map(|s| (&s.target, s)).collect() }
    }

    pub fn get(&self, id: &EntityId) -> Option<&'a NegativeSet> {
        self.sets.get(id).copied()
    }

    pub fn negatives(&self, id: &EntityId) -> Option<[String; 4]> {
        self.get(id).map(|s| s.texts().map(String::from))
    }
}

pub fn pair_id(setting: Setting, image_id: &str, suffix: &str) -> String {
    format!("{}/{image_id}/{suffix}", setting.short())
}

pub fn mcq_id(pair_id: &str, polarity: Polarity) -> String {
    format!("{pair_id}{}", polarity.sign())
}

fn yes_question(x: &str) -> String {
    format!("Can you see {x} in this image?")
}

fn yes_option(y: &str) -> String {
    format!("Yes, I can see {y} in this image.")
}

fn no_option(z: &str) -> String {
    format!("No, but I can see {z} in this image.")
}

/// Shuffles `(text, role, correct)` options with a per-question seed.
fn shuffled(options: Vec<(String, OptionRole, bool)>, seed: Seed) -> ([String; 5], [OptionRole; 5], usize) {
    let mut options = options;
    options.shuffle(&mut seed.rng());
    let answer = options.iter().position(|o| o.2).expect("one option is correct");
    let roles = std::array::from_fn(|i| options[i].1);
    let texts = std::array::from_fn(|i| std::mem::take(&mut options[i].0));
    (texts, roles, answer)
}

/// Metadata shared by both questions of a yes/no pair.
#[derive(Clone, Debug)]
struct PairMeta {
    pair_id: String,
    setting: Setting,
    image_id: String,
    image_uri: String,
    entities: Vec<EntityId>,
    entity_count: usize,
    negated_position: usize,
    negative_index: usize,
    granularity_level: Option<u8>,
    rotation_of: Option<String>,
}

impl PairMeta {
    fn mcq(&self, polarity: Polarity, question: String, options: Vec<(String, OptionRole, bool)>, root: Seed) -> Mcq {
        let mcq_id = mcq_id(&self.pair_id, polarity);
        let shuffle_seed = root.derive(&mcq_id);
        let (options, option_roles, answer_index) = shuffled(options, shuffle_seed);
        Mcq {
            mcq_id,
            pair_id: self.pair_id.clone(),
            setting: self.setting,
            polarity,
            image_id: self.image_id.clone(),
            image_uri: self.image_uri.clone(),
            question,
            options,
            option_roles,
            answer_index,
            entity_count: self.entity_count,
            entities: self.entities.clone(),
            negated_position: Some(self.negated_position),
            negated_entity: self.entities.get(self.negated_position).cloned(),
            negative_index: Some(self.negative_index),
            corrupted_attribute: None,
            granularity_level: self.granularity_level,
            rotation_of: self.rotation_of.clone(),
            shuffle_seed,
        }
    }

    fn positive(&self, pos: &str, negs: &[String; 4], root: Seed) -> Mcq {
        let mut options = vec![(yes_option(pos), OptionRole::Affirm, true)];
        options.extend(negs.iter().map(|n| (no_option(n), OptionRole::Reject, false)));
        self.mcq(Polarity::Positive, yes_question(pos), options, root)
    }

    fn negative(&self, pos: &str, negs: &[String; 4], root: Seed) -> Mcq {
        let j = self.negative_index;
        let mut options = vec![(yes_option(&negs[j]), OptionRole::Affirm, false), (no_option(pos), OptionRole::Reject, true)];
        options.extend(negs.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, n)| (no_option(n), OptionRole::Reject, false)));
        self.mcq(Polarity::Negative, yes_question(&negs[j]), options, root)
    }
}

/// Surface form of an entity inside a multi-entity phrase.
fn surface(sg: &SceneGraph, id: &EntityId, replacement: Option<&str>) -> Result<String, McqError> {
    sg.render(id, replacement).ok_or_else(|| McqError::UnknownEntity(id.clone()))
}

/// Positive phrase and the four corrupted phrases for `entities` with the
/// entity at `slot` negated.
fn corrupted_phrases(
    sg: &SceneGraph,
    entities: &[EntityId],
    slot: usize,
    negatives: &[String; 4],
) -> Result<(EntityPhrase, [String; 4]), McqError> {
    let parts = entities.iter().map(|id| Ok((id.clone(), surface(sg, id, None)?))).collect::<Result<Vec<_>, McqError>>()?;
    let positive = EntityPhrase::new(parts);
    let target = &entities[slot];
    let mut negs: [String; 4] = Default::default();
    for (i, n) in negatives.iter().enumerate() {
        negs[i] = positive.replace(slot, surface(sg, target, Some(n))?).joined;
    }
    Ok((positive, negs))
}

/// One positive/negative pair over `k` entities of `kind`.
///
/// The negated entity is drawn uniformly from entities with a negative
/// set, the remaining `k - 1` are sampled without replacement, and the
/// negated entity is placed at a uniform position.
pub fn build_multi_mcq_pair(
    sg: &SceneGraph,
    negs: &NegIndex,
    kind: EntityKind,
    k: usize,
    seed: Seed,
) -> Result<(Mcq, Mcq), McqError> {
    let setting = Setting::multi(kind);
    let all = sg.entities(kind);
    if k == 0 || all.len() < k {
        return Err(McqError::InsufficientEntities { image_id: sg.image_id.clone(), needed: k.max(1), available: all.len() });
    }
    let eligible: Vec<&EntityId> = all.iter().filter(|id| negs.get(id).is_some()).collect();
    if eligible.is_empty() {
        return Err(McqError::MissingNegatives { image_id: sg.image_id.clone(), what: kind.to_string() });
    }
    let pid = pair_id(setting, &sg.image_id, &format!("k{k}"));
    let mut rng = seed.derive(&pid).rng();
    let negated = (*eligible.choose(&mut rng).expect("non-empty")).clone();
    let others: Vec<&EntityId> = all.iter().filter(|id| **id != negated).collect();
    let mut entities: Vec<EntityId> = index::sample(&mut rng, others.len(), k - 1).into_iter().map(|i| others[i].clone()).collect();
    let position = rng.gen_range(0..k);
    entities.insert(position, negated.clone());
    let j = rng.gen_range(0..4);

    let negatives = negs.negatives(&negated).expect("eligible entity has negatives");
    let (positive, corrupted) = corrupted_phrases(sg, &entities, position, &negatives)?;
    let meta = PairMeta {
        pair_id: pid,
        setting,
        image_id: sg.image_id.clone(),
        image_uri: sg.image_uri.clone(),
        entities,
        entity_count: k,
        negated_position: position,
        negative_index: j,
        granularity_level: None,
        rotation_of: None,
    };
    Ok((meta.positive(&positive.joined, &corrupted, seed), meta.negative(&positive.joined, &corrupted, seed)))
}

/// Negative variants of a three-entity pair with the negated entity moved
/// cyclically to each position. The positive partner is shared with the
/// base pair.
pub fn build_positional_rotations(sg: &SceneGraph, negs: &NegIndex, negative: &Mcq, seed: Seed) -> Result<[Mcq; 3], McqError> {
    if negative.entities.len() != 3 || negative.polarity != Polarity::Negative {
        return Err(McqError::WrongArity { pair_id: negative.pair_id.clone(), k: negative.entities.len() });
    }
    let from = negative.negated_position.expect("negative multi question has a negated position");
    let negated = &negative.entities[from];
    let negatives = negs
        .negatives(negated)
        .ok_or_else(|| McqError::MissingNegatives { image_id: sg.image_id.clone(), what: negated.to_string() })?;
    let j = negative.negative_index.unwrap_or(0);
    let build = |p: usize| -> Result<Mcq, McqError> {
        let shift = (p + 3 - from) % 3;
        let mut entities = negative.entities.clone();
        entities.rotate_right(shift);
        let (positive, corrupted) = corrupted_phrases(sg, &entities, p, &negatives)?;
        let meta = PairMeta {
            pair_id: format!("{}#rot{p}", negative.pair_id),
            setting: negative.setting,
            image_id: negative.image_id.clone(),
            image_uri: negative.image_uri.clone(),
            entities,
            entity_count: 3,
            negated_position: p,
            negative_index: j,
            granularity_level: None,
            rotation_of: Some(negative.pair_id.clone()),
        };
        Ok(meta.negative(&positive.joined, &corrupted, seed))
    };
    Ok([build(0)?, build(1)?, build(2)?])
}

/// Produces the attribute-conditional question template `q(A)`, which must
/// contain `{context}` exactly once.
pub trait WhTemplater: Sync {
    fn template(&self, image_id: &str, description: &str, context_noun: &str, fallback: &str) -> Result<String, McqError>;
}

/// Rule-based templates for offline runs.
pub struct OfflineWh;

impl WhTemplater for OfflineWh {
    fn template(&self, _: &str, _: &str, _: &str, fallback: &str) -> Result<String, McqError> {
        Ok(fallback.to_string())
    }
}

pub struct LlmWh<'a> {
    pub client: &'a ModelClient,
    pub prompts: &'a PromptSet,
    pub endpoint: String,
}

fn parse_wh_template(text: &str) -> Option<String> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line.trim_matches(|c| c == '"' || c == '`' || c == '\'').trim();
    (line.matches("{context}").count() == 1 && line.ends_with('?')).then(|| line.to_string())
}

impl WhTemplater for LlmWh<'_> {
    fn template(&self, image_id: &str, description: &str, context_noun: &str, _: &str) -> Result<String, McqError> {
        let prompt = self.prompts.render(PromptId::WhQuestion, &[("description", description), ("context_noun", context_noun)]);
        let mut last = String::new();
        for attempt in 0..2 {
            let text = if attempt == 0 { prompt.clone() } else { format!("{prompt}{WH_REPROMPT}") };
            let resp = self
                .client
                .complete(&ChatRequest::text(&self.endpoint, text).max_tokens(64))
                .map_err(|source| McqError::Endpoint { image_id: image_id.to_string(), source })?;
            if let Some(t) = parse_wh_template(&resp.text) {
                return Ok(t);
            }
            last = resp.text;
        }
        Err(McqError::UnparseableLlmOutput { image_id: image_id.to_string(), raw_output: last })
    }
}

fn strip_copula(pred: &str) -> Option<&str> {
    ["is ", "are "].iter().find_map(|c| pred.strip_prefix(c))
}

/// Offline template for one orientation.
pub fn fallback_wh_template(predicate: &str, target_is_object: bool) -> String {
    if target_is_object {
        match strip_copula(predicate) {
            Some(rest) => format!("What is {{context}} {rest}?"),
            None => format!("What is {{context}} {predicate}?"),
        }
    } else {
        format!("What {predicate} {{context}}?")
    }
}

/// Positive and negative Wh questions for one relation triplet.
///
/// The answer target is drawn uniformly from the orientations whose
/// context object has an attribute with negatives and whose target object
/// has negatives.
pub fn build_wh_mcq_pair(
    sg: &SceneGraph,
    negs: &NegIndex,
    relation: &EntityId,
    seed: Seed,
    templater: &dyn WhTemplater,
) -> Result<(Mcq, Mcq), McqError> {
    let rel = sg.relation(relation).ok_or_else(|| McqError::UnknownEntity(relation.clone()))?;
    let pid = pair_id(Setting::Wh, &sg.image_id, &format!("rel{}", relation.index));
    let mut rng = seed.derive(&pid).rng();

    let context_attrs = |obj: &EntityId| -> Vec<EntityId> {
        sg.entities(EntityKind::Attribute)
            .into_iter()
            .filter(|a| sg.attribute(a).is_some_and(|n| n.owner == *obj) && negs.get(a).is_some())
            .collect()
    };
    // (target_is_object, context, target)
    let orientations: Vec<(bool, &EntityId, &EntityId)> = [(true, &rel.subject, &rel.object), (false, &rel.object, &rel.subject)]
        .into_iter()
        .filter(|(_, ctx, tgt)| !context_attrs(ctx).is_empty() && negs.get(tgt).is_some())
        .collect();
    let Some(&(target_is_object, context, target)) = orientations.choose(&mut rng) else {
        return Err(McqError::InsufficientNegatives {
            image_id: sg.image_id.clone(),
            reason: format!("{relation}: no orientation has an attribute negative for the context and object negatives for the target"),
        });
    };
    let candidates = context_attrs(context);
    let attr = candidates.choose(&mut rng).expect("eligible orientation has attributes").clone();
    let j = rng.gen_range(0..4);
    let target_negs = negs.negatives(target).expect("eligible target has negatives");
    let picked: Vec<String> = index::sample(&mut rng, 4, 3).into_iter().map(|i| target_negs[i].clone()).collect();

    let ctx_name = sg.object_name(context).ok_or_else(|| McqError::UnknownEntity(context.clone()))?;
    let tgt_name = sg.object_name(target).ok_or_else(|| McqError::UnknownEntity(target.clone()))?;
    let a_pos = sg.phrase(&attr).expect("attribute exists").to_string();
    let a_neg = negs.negatives(&attr).expect("eligible attribute has negatives")[j].clone();
    let all_attrs: Vec<(EntityId, String)> = sg
        .entities(EntityKind::Attribute)
        .into_iter()
        .filter_map(|a| {
            let n = sg.attribute(&a)?;
            (n.owner == *context).then(|| (a.clone(), n.phrase.clone()))
        })
        .collect();
    let context_phrase = |value: &str| -> String {
        let parts: Vec<&str> = all_attrs.iter().map(|(id, p)| if *id == attr { value } else { p.as_str() }).collect();
        format!("the {ctx_name} {}", join_entities(&parts))
    };

    let context_noun = format!("the {ctx_name}");
    let (description, fallback) = if target_is_object {
        (format!("{context_noun} {} [TARGET]", rel.predicate), fallback_wh_template(&rel.predicate, true))
    } else {
        (format!("[TARGET] {} {context_noun}", rel.predicate), fallback_wh_template(&rel.predicate, false))
    };
    let template = templater.template(&sg.image_id, &description, &context_noun, &fallback)?;
    let question = |value: &str| capitalize(&template.replacen("{context}", &context_phrase(value), 1));

    let entities = vec![context.clone(), relation.clone(), target.clone()];
    let make = |polarity: Polarity| -> Mcq {
        let (q, correction, correct_is_object) = match polarity {
            Polarity::Positive => (question(&a_pos), format!("The {ctx_name} is not {a_pos}, but is {a_neg}."), true),
            Polarity::Negative => (question(&a_neg), format!("The {ctx_name} is not {a_neg}, but is {a_pos}."), false),
        };
        let mut options = vec![(tgt_name.to_string(), OptionRole::Affirm, correct_is_object)];
        options.extend(picked.iter().map(|o| (o.clone(), OptionRole::Affirm, false)));
        options.push((correction, OptionRole::Reject, !correct_is_object));
        let mcq_id = mcq_id(&pid, polarity);
        let shuffle_seed = seed.derive(&mcq_id);
        let (options, option_roles, answer_index) = shuffled(options, shuffle_seed);
        Mcq {
            mcq_id,
            pair_id: pid.clone(),
            setting: Setting::Wh,
            polarity,
            image_id: sg.image_id.clone(),
            image_uri: sg.image_uri.clone(),
            question: q,
            options,
            option_roles,
            answer_index,
            entity_count: 1,
            entities: entities.clone(),
            negated_position: None,
            negated_entity: None,
            negative_index: Some(j),
            corrupted_attribute: (polarity == Polarity::Negative).then(|| attr.clone()),
            granularity_level: None,
            rotation_of: None,
            shuffle_seed,
        }
    };
    Ok((make(Polarity::Positive), make(Polarity::Negative)))
}

#[derive(Clone, Debug, PartialEq)]
enum Element {
    Object(EntityId),
    Attribute(EntityId),
    /// A relation and the object it brings in, attached to `parent`.
    Edge { relation: EntityId, parent: EntityId, child: EntityId },
}

impl Element {
    fn ids(&self) -> Vec<EntityId> {
        match self {
            Element::Object(id) | Element::Attribute(id) => vec![id.clone()],
            Element::Edge { relation, child, .. } => vec![relation.clone(), child.clone()],
        }
    }
}

fn attrs_of(sg: &SceneGraph, obj: &EntityId) -> Vec<EntityId> {
    sg.entities(EntityKind::Attribute).into_iter().filter(|a| sg.attribute(a).is_some_and(|n| n.owner == *obj)).collect()
}

/// Element order: A, first attribute of A, the relation with B, first
/// attribute of B, remaining attributes of A then B, then further
/// relations reaching new objects breadth-first, each followed by that
/// object's attributes.
fn ladder_elements(sg: &SceneGraph, a: &EntityId, rel: &EntityId) -> Vec<Element> {
    let r = sg.relation(rel).expect("relation exists");
    let b = if r.subject == *a { r.object.clone() } else { r.subject.clone() };
    let a_attrs = attrs_of(sg, a);
    let b_attrs = attrs_of(sg, &b);
    let mut out = vec![Element::Object(a.clone())];
    out.extend(a_attrs.first().cloned().map(Element::Attribute));
    out.push(Element::Edge { relation: rel.clone(), parent: a.clone(), child: b.clone() });
    out.extend(b_attrs.first().cloned().map(Element::Attribute));
    out.extend(a_attrs.iter().skip(1).cloned().map(Element::Attribute));
    out.extend(b_attrs.iter().skip(1).cloned().map(Element::Attribute));

    let mut seen: Vec<EntityId> = vec![a.clone(), b.clone()];
    let mut used: Vec<EntityId> = vec![rel.clone()];
    let mut frontier = 0;
    while frontier < seen.len() && out.len() < LADDER_LEVELS {
        let parent = seen[frontier].clone();
        for rid in sg.entities(EntityKind::Relation) {
            if used.contains(&rid) {
                continue;
            }
            let rn = sg.relation(&rid).expect("relation exists");
            let other = if rn.subject == parent {
                &rn.object
            } else if rn.object == parent {
                &rn.subject
            } else {
                continue;
            };
            if seen.contains(other) {
                continue;
            }
            used.push(rid.clone());
            seen.push(other.clone());
            out.push(Element::Edge { relation: rid, parent: parent.clone(), child: other.clone() });
            out.extend(attrs_of(sg, other).into_iter().map(Element::Attribute));
        }
        frontier += 1;
    }
    out
}

/// Noun phrase rooted at `obj` using only the included elements.
fn ladder_np(sg: &SceneGraph, obj: &EntityId, included: &[Element], anchor: &EntityId, replacement: Option<&str>) -> String {
    let name = match replacement {
        Some(r) if obj == anchor => r.to_string(),
        _ => sg.object_name(obj).unwrap_or_default().to_string(),
    };
    let attrs: Vec<&str> = included
        .iter()
        .filter_map(|e| match e {
            Element::Attribute(id) => sg.attribute(id).filter(|a| a.owner == *obj).map(|a| a.phrase.as_str()),
            _ => None,
        })
        .collect();
    let mut np = name;
    if !attrs.is_empty() {
        np = format!("{np} {}", join_entities(&attrs));
    }
    let clauses: Vec<String> = included
        .iter()
        .filter_map(|e| match e {
            Element::Edge { relation, parent, child } if parent == obj => {
                let r = sg.relation(relation)?;
                let child_np = ladder_np(sg, child, included, anchor, replacement);
                Some(if r.subject == *obj {
                    format!("that {} {child_np}", r.predicate)
                } else {
                    format!("that {child_np} {}", r.predicate)
                })
            }
            _ => None,
        })
        .collect();
    if !clauses.is_empty() {
        np = format!("{np} {}", clauses.join(" and "));
    }
    np
}

/// Seven question pairs of increasing granularity around one negated
/// object, plus their yes/no renderings.
///
/// Level `L` describes the first `L` elements of a fixed composition
/// order starting from an object `A` that has negatives and a relation
/// `r(A, B)`. Every level negates `A` and nothing else.
pub fn build_granularity_ladder(sg: &SceneGraph, negs: &NegIndex, seed: Seed) -> Result<(Vec<Mcq>, Vec<BinaryQuery>), McqError> {
    let objects = sg.entities(EntityKind::Object);
    let relations = sg.entities(EntityKind::Relation);
    if objects.len() < 2 || relations.is_empty() {
        return Err(McqError::InsufficientEntities {
            image_id: sg.image_id.clone(),
            needed: LADDER_LEVELS,
            available: objects.len() + relations.len() + sg.entities(EntityKind::Attribute).len(),
        });
    }
    let mut anchored = false;
    let mut best = 0;
    let mut feasible: Vec<(EntityId, EntityId, Vec<Element>)> = Vec::new();
    for rid in &relations {
        let r = sg.relation(rid).expect("relation exists");
        for a in [&r.subject, &r.object] {
            if negs.get(a).is_none() {
                continue;
            }
            anchored = true;
            let elements = ladder_elements(sg, a, rid);
            best = best.max(elements.len());
            if elements.len() >= LADDER_LEVELS {
                feasible.push((a.clone(), rid.clone(), elements));
            }
        }
    }
    if !anchored {
        return Err(McqError::MissingNegatives { image_id: sg.image_id.clone(), what: "related object".into() });
    }
    let base = pair_id(Setting::Granularity, &sg.image_id, "");
    let mut rng = seed.derive(&base).rng();
    let Some((anchor, _, elements)) = feasible.choose(&mut rng).cloned() else {
        return Err(McqError::InsufficientEntities { image_id: sg.image_id.clone(), needed: LADDER_LEVELS, available: best });
    };
    let j = rng.gen_range(0..4);
    let negatives = negs.negatives(&anchor).expect("anchor has negatives");

    let mut mcqs = Vec::with_capacity(2 * LADDER_LEVELS);
    let mut binary = Vec::with_capacity(LADDER_LEVELS);
    for level in 1..=LADDER_LEVELS {
        let included = &elements[..level];
        let positive = ladder_np(sg, &anchor, included, &anchor, None);
        let corrupted: [String; 4] = std::array::from_fn(|i| ladder_np(sg, &anchor, included, &anchor, Some(&negatives[i])));
        let entities: Vec<EntityId> = included.iter().flat_map(Element::ids).collect();
        let meta = PairMeta {
            pair_id: format!("{base}L{level}"),
            setting: Setting::Granularity,
            image_id: sg.image_id.clone(),
            image_uri: sg.image_uri.clone(),
            entity_count: entities.len(),
            entities,
            negated_position: 0,
            negative_index: j,
            granularity_level: Some(level as u8),
            rotation_of: None,
        };
        mcqs.push(meta.positive(&positive, &corrupted, seed));
        mcqs.push(meta.negative(&positive, &corrupted, seed));
        binary.push(BinaryQuery {
            query_id: format!("{base}L{level}?"),
            image_id: sg.image_id.clone(),
            image_uri: sg.image_uri.clone(),
            granularity_level: level as u8,
            question: format!("{} Answer Yes or No.", yes_question(&corrupted[j])),
            expected_answer: "No".into(),
        });
    }
    Ok((mcqs, binary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub image_id: String,
    pub setting: Setting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub reason: String,
}

impl Record for SkipRecord {
    const SCHEMA: &'static str = "mcq_skip.v1";
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub settings: Vec<Setting>,
    pub seed: Seed,
    /// Also emit positional rotation variants for three-entity pairs.
    pub rotations: bool,
    /// Per-setting overrides of the largest entity count.
    pub k_max: BTreeMap<Setting, usize>,
}

impl BuildOptions {
    pub fn new(settings: Vec<Setting>, seed: Seed) -> Self {
        BuildOptions { settings, seed, rotations: false, k_max: BTreeMap::new() }
    }

    pub fn max_k(&self, setting: Setting) -> usize {
        self.k_max.get(&setting).copied().unwrap_or_else(|| setting.k_max())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct McqBuild {
    pub mcqs: Vec<Mcq>,
    pub binary: Vec<BinaryQuery>,
    pub skipped: Vec<SkipRecord>,
}

/// Builds every requested setting for every image. Multi settings yield
/// one pair per feasible `k` from 1 to the setting's maximum.
pub fn build_benchmark(sgs: &[SceneGraph], sets: &[NegativeSet], opts: &BuildOptions, templater: &dyn WhTemplater) -> McqBuild {
    let negs = NegIndex::new(sets);
    let per_image: Vec<McqBuild> = sgs
        .par_iter()
        .map(|sg| {
            let mut out = McqBuild::default();
            let skip = |setting: Setting, k: Option<usize>, e: McqError| SkipRecord {
                image_id: sg.image_id.clone(),
                setting,
                k,
                reason: e.to_string(),
            };
            let mut skipped = Vec::new();
            for &setting in &opts.settings {
                match setting {
                    Setting::MultiObj | Setting::MultiAttr | Setting::MultiRel => {
                        let kind = setting.kind().expect("multi setting");
                        for k in 1..=opts.max_k(setting) {
                            match build_multi_mcq_pair(sg, &negs, kind, k, opts.seed) {
                                Ok((p, n)) => {
                                    let rot = (opts.rotations && k == 3).then(|| build_positional_rotations(sg, &negs, &n, opts.seed));
                                    out.mcqs.push(p);
                                    out.mcqs.push(n);
                                    match rot {
                                        Some(Ok(r)) => out.mcqs.extend(r),
                                        Some(Err(e)) => skipped.push(skip(setting, Some(k), e)),
                                        None => {}
                                    }
                                }
                                Err(McqError::InsufficientEntities { .. }) if k > 1 => break,
                                Err(e) => {
                                    skipped.push(skip(setting, Some(k), e));
                                    break;
                                }
                            }
                        }
                    }
                    Setting::Wh => {
                        for rel in sg.entities(EntityKind::Relation) {
                            match build_wh_mcq_pair(sg, &negs, &rel, opts.seed, templater) {
                                Ok((p, n)) => out.mcqs.extend([p, n]),
                                Err(e) => skipped.push(skip(setting, None, e)),
                            }
                        }
                    }
                    Setting::Granularity => match build_granularity_ladder(sg, &negs, opts.seed) {
                        Ok((m, b)) => {
                            out.mcqs.extend(m);
                            out.binary.extend(b);
                        }
                        Err(e) => skipped.push(skip(setting, None, e)),
                    },
                }
            }
            out.skipped = skipped;
            out
        })
        .collect();
    let mut all = McqBuild::default();
    for b in per_image {
        all.mcqs.extend(b.mcqs);
        all.binary.extend(b.binary);
        all.skipped.extend(b.skipped);
    }
    all
}

/// Pair ids lacking one of the two polarities. Rotation variants are
/// checked against their base pair.
pub fn orphan_pairs(mcqs: &[Mcq]) -> Vec<String> {
    let mut seen: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for m in mcqs.iter().filter(|m| m.rotation_of.is_none()) {
        let e = seen.entry(m.pair_id.as_str()).or_default();
        match m.polarity {
            Polarity::Positive => e.0 = true,
            Polarity::Negative => e.1 = true,
        }
    }
    let mut orphans: Vec<String> = seen.iter().filter(|(_, (p, n))| !(*p && *n)).map(|(id, _)| id.to_string()).collect();
    for m in mcqs.iter().filter(|m| m.rotation_of.is_some()) {
        if !seen.get(m.base_pair_id()).is_some_and(|(p, _)| *p) {
            orphans.push(m.pair_id.clone());
        }
    }
    orphans
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    pub pairs: usize,
    pub mcqs: usize,
    /// Pairs per entity count.
    pub per_k: BTreeMap<usize, usize>,
    #[serde(default)]
    pub rotation_variants: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub schema: String,
    pub seed: u64,
    pub settings: BTreeMap<Setting, SettingCounts>,
    pub total_pairs: usize,
    pub total_mcqs: usize,
    pub binary_queries: usize,
}

pub fn benchmark_manifest(mcqs: &[Mcq], binary: &[BinaryQuery], seed: Seed) -> BenchmarkManifest {
    let mut settings: BTreeMap<Setting, SettingCounts> = BTreeMap::new();
    for m in mcqs {
        let c = settings.entry(m.setting).or_default();
        if m.rotation_of.is_some() {
            c.rotation_variants += 1;
            continue;
        }
        c.mcqs += 1;
        if m.polarity == Polarity::Positive {
            c.pairs += 1;
            *c.per_k.entry(m.entity_count).or_default() += 1;
        }
    }
    BenchmarkManifest {
        schema: "benchmark_manifest.v1".into(),
        seed: seed.value(),
        total_pairs: settings.values().map(|c| c.pairs).sum(),
        total_mcqs: settings.values().map(|c| c.mcqs).sum(),
        settings,
        binary_queries: binary.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyItem {
    pub item_id: String,
    pub pair_id: String,
    pub mcq_id: String,
    pub polarity: Polarity,
    pub image_uri: String,
    pub question: String,
    pub options: [String; 5],
    pub answer_index: usize,
}

/// Two questionnaire versions; each pair contributes its positive to one
/// version and its negative to the other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyExport {
    pub version_a: Vec<SurveyItem>,
    pub version_b: Vec<SurveyItem>,
}

pub fn survey_split(mcqs: &[Mcq], seed: Seed) -> Result<SurveyExport, McqError> {
    let mut pairs: Vec<(&str, Option<&Mcq>, Option<&Mcq>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for m in mcqs.iter().filter(|m| m.rotation_of.is_none()) {
        let i = *slot.entry(m.pair_id.as_str()).or_insert_with(|| {
            pairs.push((m.pair_id.as_str(), None, None));
            pairs.len() - 1
        });
        match m.polarity {
            Polarity::Positive => pairs[i].1 = Some(m),
            Polarity::Negative => pairs[i].2 = Some(m),
        }
    }
    let item = |m: &Mcq| SurveyItem {
        item_id: m.mcq_id.clone(),
        pair_id: m.pair_id.clone(),
        mcq_id: m.mcq_id.clone(),
        polarity: m.polarity,
        image_uri: m.image_uri.clone(),
        question: m.question.clone(),
        options: m.options.clone(),
        answer_index: m.answer_index,
    };
    let mut out = SurveyExport { version_a: Vec::new(), version_b: Vec::new() };
    for (pid, pos, neg) in pairs {
        let (Some(pos), Some(neg)) = (pos, neg) else {
            return Err(McqError::OrphanPair { pair_id: pid.to_string() });
        };
        if seed.derive(&format!("survey/{pid}")).rng().gen_bool(0.5) {
            out.version_a.push(item(pos));
            out.version_b.push(item(neg));
        } else {
            out.version_a.push(item(neg));
            out.version_b.push(item(pos));
        }
    }
    Ok(out)
}
