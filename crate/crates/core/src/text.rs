//! Small text helpers shared by the pipelines: verbatim matching, LLM output
//! parsing and entity-list joining.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercased alphanumeric tokens with a trailing plural `s` removed.
pub fn match_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(depluralize)
        .collect()
}

fn depluralize(t: &str) -> String {
    if t.len() > 3 && t.ends_with('s') && !t.ends_with("ss") {
        t[..t.len() - 1].to_string()
    } else {
        t.to_string()
    }
}

/// True when `phrase` occurs in `source` as a contiguous token run, ignoring
/// case, punctuation, plural `s` and leading articles of the phrase.
pub fn occurs_verbatim(phrase: &str, source: &str) -> bool {
    let mut needle = match_tokens(phrase);
    while needle.first().is_some_and(|t| ARTICLES.contains(&t.as_str())) {
        needle.remove(0);
    }
    if needle.is_empty() {
        return false;
    }
    let hay = match_tokens(source);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Rewrites an attribute mention into the `with ...` surface form.
pub fn with_phrase(attr: &str) -> String {
    let t = attr.split_whitespace().collect::<Vec<_>>().join(" ");
    let t = t.trim_end_matches(['.', ',', ';']);
    if t.to_lowercase().starts_with("with ") {
        format!("with {}", &t[5..])
    } else {
        format!("with {t}")
    }
}

/// Joins entity phrases: `a`, `a and b`, `a, b, and c`.
pub fn join_entities<S: AsRef<str>>(parts: &[S]) -> String {
    match parts {
        [] => String::new(),
        [one] => one.as_ref().to_string(),
        [a, b] => format!("{} and {}", a.as_ref(), b.as_ref()),
        [init @ .., last] => {
            let head: Vec<&str> = init.iter().map(|s| s.as_ref()).collect();
            format!("{}, and {}", head.join(", "), last.as_ref())
        }
    }
}

/// First JSON object or array embedded in model output, tolerating code
/// fences and surrounding prose.
pub fn extract_json(text: &str) -> Option<Value> {
    for (i, c) in text.char_indices() {
        if c == '{' || c == '[' {
            let mut it = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            if let Some(Ok(v)) = it.next() {
                return Some(v);
            }
        }
    }
    None
}

/// Parses a leading yes/no answer.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let first = text
        .split(|c: char| !c.is_alphanumeric())
        .find(|t| !t.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" | "true" => Some(true),
        "no" | "false" => Some(false),
        _ => None,
    }
}

static LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-E])\b").expect("static regex"));

pub const LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

/// Option letter for a 0-based index.
pub fn letter(index: usize) -> char {
    LETTERS[index]
}

/// First standalone option letter A-E after upper-casing, as a 0-based
/// index. Total: never panics, `None` marks unparseable output.
pub fn parse_choice_letter(text: &str) -> Option<usize> {
    let upper = text.to_uppercase();
    let caps = LETTER.captures(&upper)?;
    let c = caps.get(1)?.as_str().chars().next()?;
    LETTERS.iter().position(|&l| l == c)
}

/// Renders `{{key}}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// Upper-cases the first character.
pub fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbatim_matching() {
        let cap = "A black cat is lying on a desk next to the door frame.";
        assert!(occurs_verbatim("cat", cap));
        assert!(occurs_verbatim("the door frame", cap));
        assert!(occurs_verbatim("Door Frames", cap));
        assert!(occurs_verbatim("black", cap));
        assert!(occurs_verbatim("is lying on", cap));
        assert!(!occurs_verbatim("dog", cap));
        assert!(!occurs_verbatim("the", cap));
        assert!(!occurs_verbatim("lying desk", cap));
    }

    #[test]
    fn with_phrase_normalizes() {
        assert_eq!(with_phrase("black fur"), "with black fur");
        assert_eq!(with_phrase("With  a red collar."), "with a red collar");
    }

    #[test]
    fn joins() {
        assert_eq!(join_entities(&["cat"]), "cat");
        assert_eq!(join_entities(&["cat", "door frame"]), "cat and door frame");
        assert_eq!(join_entities(&["dog", "ball", "tree"]), "dog, ball, and tree");
        assert_eq!(join_entities::<&str>(&[]), "");
    }

    #[test]
    fn json_extraction() {
        let v = extract_json("Sure!\n```json\n{\"a\": [1, 2]}\n```").unwrap();
        assert_eq!(v["a"][1], 2);
        assert_eq!(extract_json("[\"x\"] trailing"), Some(serde_json::json!(["x"])));
        assert!(extract_json("no json {here").is_none());
    }

    #[test]
    fn yes_no() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no("  no, it is not"), Some(false));
        assert_eq!(parse_yes_no("Maybe"), None);
    }

    #[test]
    fn render_placeholders() {
        assert_eq!(render("x={{a}} {b} {{a}}", &[("a", "1")]), "x=1 {b} 1");
    }
}
