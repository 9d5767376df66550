//! Shared domain model: scene graphs and negative sets.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::jsonl::Record;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Object,
    Attribute,
    Relation,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Object, EntityKind::Attribute, EntityKind::Relation];

    pub fn short(self) -> &'static str {
        match self {
            EntityKind::Object => "obj",
            EntityKind::Attribute => "attr",
            EntityKind::Relation => "rel",
        }
    }

    pub fn parse_short(s: &str) -> Option<EntityKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "obj" | "object" | "objects" => Some(EntityKind::Object),
            "attr" | "attribute" | "attributes" => Some(EntityKind::Attribute),
            "rel" | "relation" | "relations" => Some(EntityKind::Relation),
            _ => None,
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Identity of an object, attribute or relation within one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub kind: EntityKind,
    pub image_id: String,
    pub index: u32,
}

impl EntityId {
    pub fn new(kind: EntityKind, image_id: impl Into<String>, index: u32) -> Self {
        EntityId { kind, image_id: image_id.into(), index }
    }

    pub fn object(image_id: impl Into<String>, index: u32) -> Self {
        Self::new(EntityKind::Object, image_id, index)
    }

    pub fn attribute(image_id: impl Into<String>, index: u32) -> Self {
        Self::new(EntityKind::Attribute, image_id, index)
    }

    pub fn relation(image_id: impl Into<String>, index: u32) -> Self {
        Self::new(EntityKind::Relation, image_id, index)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.image_id, self.kind.short(), self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: EntityId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeNode {
    pub id: EntityId,
    pub owner: EntityId,
    /// Normalized `with ...` phrase.
    pub phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationNode {
    pub id: EntityId,
    pub subject: EntityId,
    pub predicate: String,
    pub object: EntityId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub image_uri: String,
    #[serde(default)]
    pub objects: Vec<ObjectNode>,
    #[serde(default)]
    pub attributes: Vec<AttributeNode>,
    #[serde(default)]
    pub relations: Vec<RelationNode>,
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>, image_uri: impl Into<String>) -> Self {
        SceneGraph {
            image_id: image_id.into(),
            image_uri: image_uri.into(),
            ..Default::default()
        }
    }

    pub fn add_object(&mut self, name: impl Into<String>) -> EntityId {
        let id = EntityId::object(&self.image_id, next_index(self.objects.iter().map(|o| &o.id)));
        self.objects.push(ObjectNode { id: id.clone(), name: name.into() });
        id
    }

    pub fn add_attribute(&mut self, owner: &EntityId, phrase: impl Into<String>) -> EntityId {
        let id = EntityId::attribute(&self.image_id, next_index(self.attributes.iter().map(|a| &a.id)));
        self.attributes.push(AttributeNode {
            id: id.clone(),
            owner: owner.clone(),
            phrase: phrase.into(),
            source_text: None,
        });
        id
    }

    pub fn add_relation(&mut self, subject: &EntityId, predicate: impl Into<String>, object: &EntityId) -> EntityId {
        let id = EntityId::relation(&self.image_id, next_index(self.relations.iter().map(|r| &r.id)));
        self.relations.push(RelationNode {
            id: id.clone(),
            subject: subject.clone(),
            predicate: predicate.into(),
            object: object.clone(),
            source_text: None,
        });
        id
    }

    pub fn object(&self, id: &EntityId) -> Option<&ObjectNode> {
        self.objects.iter().find(|o| &o.id == id)
    }

    pub fn attribute(&self, id: &EntityId) -> Option<&AttributeNode> {
        self.attributes.iter().find(|a| &a.id == id)
    }

    pub fn relation(&self, id: &EntityId) -> Option<&RelationNode> {
        self.relations.iter().find(|r| &r.id == id)
    }

    pub fn object_name(&self, id: &EntityId) -> Option<&str> {
        self.object(id).map(|o| o.name.as_str())
    }

    pub fn attributes_of<'a>(&'a self, owner: &'a EntityId) -> impl Iterator<Item = &'a AttributeNode> + 'a {
        self.attributes.iter().filter(move |a| &a.owner == owner)
    }

    pub fn entities(&self, kind: EntityKind) -> Vec<EntityId> {
        match kind {
            EntityKind::Object => self.objects.iter().map(|o| o.id.clone()).collect(),
            EntityKind::Attribute => self.attributes.iter().map(|a| a.id.clone()).collect(),
            EntityKind::Relation => self.relations.iter().map(|r| r.id.clone()).collect(),
        }
    }

    /// The surface phrase that negatives replace: object name, attribute
    /// phrase, or relation predicate.
    pub fn phrase(&self, id: &EntityId) -> Option<&str> {
        match id.kind {
            EntityKind::Object => self.object(id).map(|o| o.name.as_str()),
            EntityKind::Attribute => self.attribute(id).map(|a| a.phrase.as_str()),
            EntityKind::Relation => self.relation(id).map(|r| r.predicate.as_str()),
        }
    }

    /// The entity rendered as a standalone noun phrase, with `replacement`
    /// substituted for its own phrase when given.
    pub fn render(&self, id: &EntityId, replacement: Option<&str>) -> Option<String> {
        match id.kind {
            EntityKind::Object => {
                let o = self.object(id)?;
                Some(replacement.unwrap_or(&o.name).to_string())
            }
            EntityKind::Attribute => {
                let a = self.attribute(id)?;
                let owner = self.object_name(&a.owner)?;
                Some(format!("{} {}", owner, replacement.unwrap_or(&a.phrase)))
            }
            EntityKind::Relation => {
                let r = self.relation(id)?;
                let s = self.object_name(&r.subject)?;
                let o = self.object_name(&r.object)?;
                Some(format!("{} {} {}", s, replacement.unwrap_or(&r.predicate), o))
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        let mut seen = HashSet::new();
        let mut check_id = |id: &EntityId, kind: EntityKind| -> Result<(), String> {
            if id.kind != kind {
                return Err(format!("{id} listed as {kind}"));
            }
            if id.image_id != self.image_id {
                return Err(format!("{id} belongs to another image"));
            }
            if !seen.insert(id.clone()) {
                return Err(format!("duplicate entity id {id}"));
            }
            Ok(())
        };
        for o in &self.objects {
            check_id(&o.id, EntityKind::Object)?;
            if o.name.trim().is_empty() {
                return Err(format!("{} has an empty name", o.id));
            }
        }
        for a in &self.attributes {
            check_id(&a.id, EntityKind::Attribute)?;
        }
        for r in &self.relations {
            check_id(&r.id, EntityKind::Relation)?;
        }
        for a in &self.attributes {
            if self.object(&a.owner).is_none() {
                return Err(format!("{} references missing object {}", a.id, a.owner));
            }
            if !a.phrase.starts_with("with ") || a.phrase.trim().len() <= 4 {
                return Err(format!("{} phrase {:?} is not a `with ...` phrase", a.id, a.phrase));
            }
        }
        let mut triplets = HashSet::new();
        for r in &self.relations {
            for end in [&r.subject, &r.object] {
                if self.object(end).is_none() {
                    return Err(format!("{} references missing object {}", r.id, end));
                }
            }
            if r.predicate.trim().is_empty() {
                return Err(format!("{} has an empty predicate", r.id));
            }
            if !triplets.insert((&r.subject, r.predicate.as_str(), &r.object)) {
                return Err(format!("duplicate relation triplet at {}", r.id));
            }
        }
        Ok(())
    }
}

fn next_index<'a>(ids: impl Iterator<Item = &'a EntityId>) -> u32 {
    ids.map(|id| id.index + 1).max().unwrap_or(0)
}

impl Record for SceneGraph {
    const SCHEMA: &'static str = "scene_graph.v1";

    fn validate(&self) -> Result<(), String> {
        SceneGraph::validate(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStatus {
    Proposed,
    Kept,
    Regenerated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanLabel {
    ValidNegative,
    PresentInImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSlot {
    pub text: String,
    pub status: NegativeStatus,
    #[serde(default)]
    pub regen_count: u32,
}

impl NegativeSlot {
    pub fn proposed(text: impl Into<String>) -> Self {
        NegativeSlot { text: text.into(), status: NegativeStatus::Proposed, regen_count: 0 }
    }
}

/// Four negative counterparts for one positive entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub target: EntityId,
    pub positive: String,
    pub negatives: [NegativeSlot; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<HumanLabel>,
    #[serde(default)]
    pub needs_human: bool,
    /// Proposals rejected in earlier rounds; never proposed again.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<String>,
}

impl NegativeSet {
    pub fn new(target: EntityId, positive: impl Into<String>, negatives: [String; 4]) -> Self {
        NegativeSet {
            target,
            positive: positive.into(),
            negatives: negatives.map(NegativeSlot::proposed),
            last_entropy: None,
            human_label: None,
            needs_human: false,
            rejected: Vec::new(),
        }
    }

    pub fn texts(&self) -> [&str; 4] {
        [
            self.negatives[0].text.as_str(),
            self.negatives[1].text.as_str(),
            self.negatives[2].text.as_str(),
            self.negatives[3].text.as_str(),
        ]
    }

    pub fn total_regenerations(&self) -> u32 {
        self.negatives.iter().map(|n| n.regen_count).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = fold(&self.positive);
        if positive.is_empty() {
            return Err(format!("{}: empty positive", self.target));
        }
        let mut seen = HashSet::new();
        for slot in &self.negatives {
            let key = fold(&slot.text);
            if key.is_empty() {
                return Err(format!("{}: empty negative", self.target));
            }
            if key == positive {
                return Err(format!("{}: negative {:?} equals the positive", self.target, slot.text));
            }
            if !seen.insert(key) {
                return Err(format!("{}: duplicate negative {:?}", self.target, slot.text));
            }
        }
        if let Some(h) = self.last_entropy {
            if !h.is_finite() || h < 0.0 {
                return Err(format!("{}: invalid entropy {h}", self.target));
            }
        }
        Ok(())
    }
}

/// Comparison key for phrase equality: trimmed, lowercased, single-spaced.
pub fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl Record for NegativeSet {
    const SCHEMA: &'static str = "negative_set.v1";

    fn validate(&self) -> Result<(), String> {
        NegativeSet::validate(self)
    }
}
