//! Versioned prompt templates.
//!
//! The default set is compiled in from `prompts/v1/`. A directory holding
//! files with the same names overrides individual templates. Placeholders
//! use `{{name}}` syntax.

use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::render;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    SgObjects,
    SgRelations,
    RelCaptionCheck,
    RelImageCheck,
    NegObj,
    NegAttr,
    NegRel,
    WhQuestion,
    DpoCategory,
    DpoPhrases,
    DpoReplace,
    DpoWhNegative,
}

impl PromptId {
    pub const ALL: [PromptId; 12] = [
        PromptId::SgObjects,
        PromptId::SgRelations,
        PromptId::RelCaptionCheck,
        PromptId::RelImageCheck,
        PromptId::NegObj,
        PromptId::NegAttr,
        PromptId::NegRel,
        PromptId::WhQuestion,
        PromptId::DpoCategory,
        PromptId::DpoPhrases,
        PromptId::DpoReplace,
        PromptId::DpoWhNegative,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptId::SgObjects => "sg_objects.txt",
            PromptId::SgRelations => "sg_relations.txt",
            PromptId::RelCaptionCheck => "rel_caption_check.txt",
            PromptId::RelImageCheck => "rel_image_check.txt",
            PromptId::NegObj => "neg_obj.txt",
            PromptId::NegAttr => "neg_attr.txt",
            PromptId::NegRel => "neg_rel.txt",
            PromptId::WhQuestion => "wh_question.txt",
            PromptId::DpoCategory => "dpo_category.txt",
            PromptId::DpoPhrases => "dpo_phrases.txt",
            PromptId::DpoReplace => "dpo_replace.txt",
            PromptId::DpoWhNegative => "dpo_wh_negative.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptId::SgObjects => include_str!("../prompts/v1/sg_objects.txt"),
            PromptId::SgRelations => include_str!("../prompts/v1/sg_relations.txt"),
            PromptId::RelCaptionCheck => include_str!("../prompts/v1/rel_caption_check.txt"),
            PromptId::RelImageCheck => include_str!("../prompts/v1/rel_image_check.txt"),
            PromptId::NegObj => include_str!("../prompts/v1/neg_obj.txt"),
            PromptId::NegAttr => include_str!("../prompts/v1/neg_attr.txt"),
            PromptId::NegRel => include_str!("../prompts/v1/neg_rel.txt"),
            PromptId::WhQuestion => include_str!("../prompts/v1/wh_question.txt"),
            PromptId::DpoCategory => include_str!("../prompts/v1/dpo_category.txt"),
            PromptId::DpoPhrases => include_str!("../prompts/v1/dpo_phrases.txt"),
            PromptId::DpoReplace => include_str!("../prompts/v1/dpo_replace.txt"),
            PromptId::DpoWhNegative => include_str!("../prompts/v1/dpo_wh_negative.txt"),
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub version: String,
    templates: Vec<(PromptId, String)>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            version: "v1".into(),
            templates: PromptId::ALL.iter().map(|&id| (id, id.builtin().to_string())).collect(),
        }
    }
}

impl PromptSet {
    /// Built-in templates with any same-named files in `dir` taking
    /// precedence.
    pub fn with_overrides(dir: &Path) -> io::Result<Self> {
        let mut set = PromptSet { version: format!("v1+{}", dir.display()), ..Default::default() };
        for (id, text) in &mut set.templates {
            let p = dir.join(id.file_name());
            if p.exists() {
                *text = std::fs::read_to_string(&p)?;
            }
        }
        Ok(set)
    }

    pub fn template(&self, id: PromptId) -> &str {
        self.templates
            .iter()
            .find(|(t, _)| *t == id)
            .map(|(_, s)| s.as_str())
            .expect("every prompt id has a template")
    }

    pub fn render(&self, id: PromptId, vars: &[(&str, &str)]) -> String {
        render(self.template(id), vars)
    }

    /// Which template produced `prompt`, judged by its first line.
    pub fn identify(&self, prompt: &str) -> Option<PromptId> {
        let first = prompt.lines().next()?.trim();
        self.templates
            .iter()
            .find(|(_, t)| t.lines().next().map(str::trim) == Some(first))
            .map(|(id, _)| *id)
    }
}

/// Value of a `Label: value` line inside a rendered prompt.
pub fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}
