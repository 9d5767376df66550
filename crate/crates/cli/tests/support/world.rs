//! A deterministic stand-in for the text and image models, driven by a
//! hand-written description of each fixture image. Used only to record the
//! shipped response cache.

use std::collections::{BTreeMap, HashSet};

use finer_core::client::parse_rendered_options;
use finer_core::mcq::fallback_wh_template;
use finer_core::prompts::{field, PromptId, PromptSet};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Deserialize)]
pub struct World {
    pub pools: BTreeMap<String, Vec<String>>,
    pub images: Vec<Image>,
    pub replacements: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Image {
    pub image_id: String,
    pub image_uri: String,
    pub category: String,
    pub objects: Vec<Value>,
    pub relations: Vec<Relation>,
    pub caption_rejects: Vec<String>,
    pub image_rejects: Vec<String>,
    pub visible_extras: Vec<String>,
    pub dpo: Value,
    pub dpo_wh: Option<Value>,
    #[serde(skip)]
    pub caption: String,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Relation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

const FILLER: &[&str] = &[
    "a", "an", "the", "with", "is", "are", "of", "in", "on", "this", "image", "i", "can", "see", "yes", "no", "but", "and", "not",
    "color", "texture", "surface", "size", "shape", "body", "finish", "what", "does", "answer", "or",
];

const LETTERS: [&str; 5] = ["A", "B", "C", "D", "E"];

fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !FILLER.contains(t))
        .map(str::to_string)
        .collect()
}

pub fn hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

impl World {
    pub fn load(world_json: &str, captions_jsonl: &str) -> World {
        let mut w: World = serde_json::from_str(world_json).expect("world.json parses");
        for line in captions_jsonl.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line).expect("caption line parses");
            let id = v["image_id"].as_str().unwrap();
            if let Some(img) = w.images.iter_mut().find(|i| i.image_id == id) {
                img.caption = v["caption"].as_str().unwrap().to_string();
            }
        }
        w
    }

    fn by_caption(&self, prompt: &str) -> &Image {
        self.images.iter().find(|i| !i.caption.is_empty() && prompt.contains(&i.caption)).expect("prompt names a known caption")
    }

    fn by_uri(&self, uri: &str) -> &Image {
        self.images.iter().find(|i| i.image_uri == uri).expect("request names a known image")
    }

    /// OpenAI-style response body for a chat-completions request body.
    pub fn respond(&self, body: &Value) -> Value {
        let msg = body["messages"].as_array().and_then(|m| m.last()).expect("request has messages");
        let (text, image) = match &msg["content"] {
            Value::String(s) => (s.clone(), None),
            Value::Array(parts) => {
                let text = parts.iter().find_map(|p| p["text"].as_str()).unwrap_or_default().to_string();
                let img = parts.iter().find_map(|p| p["image_url"]["url"].as_str()).map(str::to_string);
                (text, img)
            }
            _ => (String::new(), None),
        };
        if body["logprobs"].as_bool() == Some(true) {
            let img = self.by_uri(image.as_deref().expect("scored request has an image"));
            return self.discriminate(img, &text);
        }
        let content = self.answer(&text, image.as_deref());
        json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})
    }

    fn answer(&self, prompt: &str, image: Option<&str>) -> String {
        let prompts = PromptSet::default();
        match prompts.identify(prompt) {
            Some(PromptId::SgObjects) => json!({"objects": self.by_caption(prompt).objects}).to_string(),
            Some(PromptId::SgRelations) => self.relation(prompt),
            Some(PromptId::RelCaptionCheck) => {
                let img = self.by_caption(prompt);
                let stmt = quoted_after(prompt, "explicitly state that ");
                if img.caption_rejects.contains(&stmt) { "No." } else { "Yes." }.to_string()
            }
            Some(PromptId::RelImageCheck) => {
                let img = self.by_uri(image.expect("image check has an image"));
                let stmt = quoted_after(prompt, "statement true for this image: ");
                if img.image_rejects.contains(&stmt) { "no" } else { "yes" }.to_string()
            }
            Some(id @ (PromptId::NegObj | PromptId::NegAttr | PromptId::NegRel)) => self.propose(id, prompt),
            Some(PromptId::WhQuestion) => {
                let desc = field(prompt, "A scene contains the relation:").unwrap_or_default().trim_end_matches('.').to_string();
                let noun = quoted_after(prompt, "exactly once for ");
                let (pred, target_is_object) = match desc.strip_suffix("[TARGET]") {
                    Some(rest) => (rest.trim().strip_prefix(noun.as_str()).unwrap_or(rest).trim().to_string(), true),
                    None => {
                        let rest = desc.strip_prefix("[TARGET]").unwrap_or(&desc).trim();
                        (rest.strip_suffix(noun.as_str()).unwrap_or(rest).trim().to_string(), false)
                    }
                };
                fallback_wh_template(&pred, target_is_object)
            }
            Some(PromptId::DpoCategory) => self.by_caption(prompt).category.clone(),
            Some(PromptId::DpoPhrases) => self.by_caption(prompt).dpo.to_string(),
            Some(PromptId::DpoReplace) => {
                let inst = quoted_after(prompt, &format!("Replace the {} ", field_word(prompt)));
                match self.replacements.get(&inst) {
                    Some(r) => json!({"replacement": r}).to_string(),
                    None => "I am not sure.".to_string(),
                }
            }
            Some(PromptId::DpoWhNegative) => {
                let q = quoted_after(prompt, "Question: ");
                let img = self.images.iter().find(|i| i.dpo["wh"]["question"].as_str() == Some(q.as_str()));
                match img.and_then(|i| i.dpo_wh.clone()) {
                    Some(v) => v.to_string(),
                    None => "{}".to_string(),
                }
            }
            None => {
                let img = self.by_uri(image.expect("evaluation prompt has an image"));
                if prompt.contains("Answer Yes or No.") {
                    self.yes_no(img, prompt)
                } else {
                    self.choose(img, prompt)
                }
            }
        }
    }

    fn relation(&self, prompt: &str) -> String {
        let objs = field(prompt, "Objects:").unwrap_or_default();
        let names: Vec<&str> = objs.split('"').filter(|s| !s.trim().is_empty() && s.trim() != "and").collect();
        let (a, b) = (names[0], names[1]);
        let img = self.by_caption(prompt);
        match img.relations.iter().find(|r| (r.subject == a && r.object == b) || (r.subject == b && r.object == a)) {
            Some(r) => json!({"subject": r.subject, "predicate": r.predicate, "object": r.object}).to_string(),
            None => json!({"subject": a, "predicate": null, "object": b}).to_string(),
        }
    }

    fn propose(&self, id: PromptId, prompt: &str) -> String {
        let (pool, positive) = match id {
            PromptId::NegObj => (&self.pools["obj"], quoted_after(prompt, "contains the object ")),
            PromptId::NegAttr => (&self.pools["attr"], quoted_after(prompt, "is described as ")),
            _ => (&self.pools["rel"], {
                let head = prompt.lines().nth(1).unwrap_or_default();
                head.split("have an opposite or clearly different meaning from ").nth(1).unwrap_or_default().trim_matches(|c| c == '"' || c == '.').to_string()
            }),
        };
        let count: usize = prompt
            .split("Propose ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .unwrap_or(4);
        let forbidden: HashSet<String> = field(prompt, "Do not propose any of:")
            .or_else(|| prompt.split("do not propose any of:").nth(1).and_then(|s| s.lines().next()))
            .unwrap_or_default()
            .split('"')
            .map(|s| s.trim().to_lowercase())
            .collect();
        let attempt = field(prompt, "Attempt:").unwrap_or("1");
        let start = (hash(&format!("{positive}/{attempt}")) % pool.len() as u64) as usize;
        let picked: Vec<&String> = (0..pool.len())
            .map(|i| &pool[(start + i) % pool.len()])
            .filter(|c| !forbidden.contains(&c.to_lowercase()) && c.to_lowercase() != positive.to_lowercase())
            .take(count)
            .collect();
        json!({"negatives": picked}).to_string()
    }

    fn caption_score(img: &Image, text: &str) -> f64 {
        let cap: HashSet<String> = tokens(&img.caption).into_iter().collect();
        let t = tokens(text);
        if t.is_empty() {
            return 0.0;
        }
        t.iter().filter(|x| cap.contains(*x)).count() as f64 / t.len() as f64
    }

    fn shows_extra(img: &Image, option: &str) -> bool {
        let o = option.to_lowercase();
        img.visible_extras.iter().any(|e| o.contains(&e.to_lowercase()))
    }

    /// Letter scores for a five-way discrimination: a visible distractor
    /// wins outright, otherwise the caption-consistent option leads.
    fn discriminate(&self, img: &Image, prompt: &str) -> Value {
        let options = parse_rendered_options(prompt);
        let scores: Vec<f64> = options.iter().map(|o| Self::caption_score(img, o)).collect();
        let best = scores.iter().cloned().fold(f64::MIN, f64::max);
        let logits: Vec<f64> = options
            .iter()
            .zip(&scores)
            .map(|(o, &s)| {
                let h = hash(&format!("{}/{o}", img.image_id));
                if Self::shows_extra(img, o) {
                    8.0
                } else if s == best {
                    3.0
                } else if h.is_multiple_of(6) {
                    3.3
                } else {
                    (h % 100) as f64 / 100.0
                }
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let top: Vec<Value> = logits
            .iter()
            .enumerate()
            .map(|(i, l)| json!({"token": LETTERS[i], "logprob": l - z.ln()}))
            .collect();
        let best_i = logits.iter().enumerate().fold(0, |b, (i, l)| if *l > logits[b] { i } else { b });
        json!({"choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": LETTERS[best_i]},
            "logprobs": {"content": [{"token": LETTERS[best_i], "logprob": logits[best_i] - z.ln(), "top_logprobs": top}]},
        }]})
    }

    /// Multiple-choice answer from a model that usually trusts the caption,
    /// sometimes checks the question's premise, and sometimes guesses.
    fn choose(&self, img: &Image, prompt: &str) -> String {
        let question = prompt.lines().next().unwrap_or_default();
        let options = parse_rendered_options(prompt);
        let h = hash(prompt);
        let premise_false = Self::caption_score(img, question) < 1.0;
        let rejects = |o: &str| o.starts_with("No") || o.contains(" is not ");
        let pick = if h.is_multiple_of(7) {
            (h / 7 % 5) as usize
        } else if let Some(i) = options.iter().position(|o| o.starts_with("Yes") && Self::shows_extra(img, o)) {
            i
        } else {
            let checks_premise = h % 5 < 3;
            let mut best = 0;
            let mut best_score = f64::MIN;
            for (i, o) in options.iter().enumerate() {
                let mut s = Self::caption_score(img, o);
                if checks_premise && premise_false == rejects(o) {
                    s += 1.0;
                }
                s += (hash(&format!("{h}/{i}")) % 100) as f64 / 1e4;
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            best
        };
        let l = LETTERS[pick];
        match h % 11 {
            0 => format!("{l}."),
            1 => format!("({l})"),
            2 => format!("Answer: {l}"),
            3 => l.to_lowercase(),
            4 if h.is_multiple_of(3) => "I cannot tell".to_string(),
            _ => l.to_string(),
        }
    }

    fn yes_no(&self, img: &Image, prompt: &str) -> String {
        let question = prompt.lines().next().unwrap_or_default();
        let truthful = Self::caption_score(img, question) >= 1.0;
        let flip = hash(prompt).is_multiple_of(4);
        if truthful != flip { "Yes" } else { "No" }.to_string()
    }
}

fn field_word(prompt: &str) -> String {
    prompt
        .split("Replace the ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap_or_default()
        .to_string()
}

/// First double-quoted string after `marker`.
fn quoted_after(prompt: &str, marker: &str) -> String {
    prompt
        .split(marker)
        .nth(1)
        .and_then(|s| s.split('"').nth(1))
        .unwrap_or_default()
        .to_string()
}
