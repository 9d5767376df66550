//! Line-delimited JSON interchange.
//!
//! Each line is a standalone object carrying a `schema` field (for example
//! `"scene_graph.v1"`) followed by the record's own fields.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// A record type with a versioned schema id and invariants checked on load.
pub trait Record: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line_no}: malformed JSON line: {message}")]
    MalformedLine { path: PathBuf, line_no: usize, message: String },
    #[error("{path}:{line_no}: schema violation: {reason}")]
    SchemaViolation { path: PathBuf, line_no: usize, reason: String },
}

impl JsonlError {
    pub fn line_no(&self) -> Option<usize> {
        match self {
            JsonlError::MalformedLine { line_no, .. } | JsonlError::SchemaViolation { line_no, .. } => Some(*line_no),
            JsonlError::Io { .. } => None,
        }
    }
}

#[derive(Serialize)]
struct Line<'a, T> {
    schema: &'static str,
    #[serde(flatten)]
    record: &'a T,
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn to_line<T: Record>(record: &T) -> serde_json::Result<String> {
    serde_json::to_string(&Line { schema: T::SCHEMA, record })
}

/// Parses one line; `Err((malformed, message))`.
pub fn from_line<T: Record>(line: &str) -> Result<T, (bool, String)> {
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| (true, e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| (true, "line is not a JSON object".to_string()))?;
    match obj.remove("schema") {
        Some(serde_json::Value::String(s)) if s == T::SCHEMA => {}
        Some(other) => return Err((false, format!("expected schema {:?}, found {}", T::SCHEMA, other))),
        None => return Err((false, format!("missing schema field (expected {:?})", T::SCHEMA))),
    }
    let record: T = serde_json::from_value(value).map_err(|e| (false, e.to_string()))?;
    record.validate().map_err(|reason| (false, reason))?;
    Ok(record)
}

/// Reads all records in file order. Blank lines are skipped; the first
/// malformed or invalid line aborts the load.
pub fn load_jsonl<T: Record>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| JsonlError::Io { path: path.into(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        match from_line::<T>(&line) {
            Ok(r) => out.push(r),
            Err((true, message)) => return Err(JsonlError::MalformedLine { path: path.into(), line_no, message }),
            Err((false, reason)) => return Err(JsonlError::SchemaViolation { path: path.into(), line_no, reason }),
        }
    }
    Ok(out)
}

pub fn save_jsonl<'a, T, I>(records: I, path: impl AsRef<Path>) -> Result<(), JsonlError>
where
    T: Record + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let path = path.as_ref();
    let io_err = |source| JsonlError::Io { path: path.into(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = to_line(r).map_err(|e| io_err(io::Error::other(e)))?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes pretty JSON with a trailing newline.
pub fn save_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> io::Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EntityId, HumanLabel, NegativeSet, SceneGraph};

    fn graph() -> SceneGraph {
        let mut g = SceneGraph::new("img-é", "https://example.org/é.jpg");
        let cat = g.add_object("chat noir « félin »");
        let desk = g.add_object("desk");
        g.add_attribute(&cat, "with ünïcödé whiskers");
        g.add_relation(&cat, "is lying on", &desk);
        g
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_jsonl::<SceneGraph>(&p).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_unicode_graph() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        let gs = vec![graph()];
        save_jsonl(&gs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"schema\":\"scene_graph.v1\""));
        assert_eq!(load_jsonl::<SceneGraph>(&p).unwrap(), gs);
    }

    #[test]
    fn roundtrip_negative_set_with_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.jsonl");
        let mut n = NegativeSet::new(EntityId::object("i", 0), "wall", ["ceiling", "fence", "door", "curtain"].map(String::from));
        n.human_label = Some(HumanLabel::PresentInImage);
        n.last_entropy = Some(0.0119);
        n.rejected.push("ground".into());
        save_jsonl([&n], &p).unwrap();
        assert_eq!(load_jsonl::<NegativeSet>(&p).unwrap(), vec![n]);
    }

    #[test]
    fn dangling_attribute_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = to_line(&graph()).unwrap();
        let bad = good.replace(
            "\"owner\":{\"kind\":\"object\",\"image_id\":\"img-é\",\"index\":0}",
            "\"owner\":{\"kind\":\"object\",\"image_id\":\"img-é\",\"index\":7}",
        );
        assert_ne!(good, bad);
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match load_jsonl::<SceneGraph>(&p) {
            Err(JsonlError::SchemaViolation { line_no, reason, .. }) => {
                assert_eq!(line_no, 2);
                assert!(reason.contains("missing object"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_wrong_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{not json\n").unwrap();
        assert!(matches!(load_jsonl::<SceneGraph>(&p), Err(JsonlError::MalformedLine { line_no: 1, .. })));
        let line = to_line(&graph()).unwrap().replace("scene_graph.v1", "negative_set.v1");
        std::fs::write(&p, line).unwrap();
        assert!(matches!(load_jsonl::<SceneGraph>(&p), Err(JsonlError::SchemaViolation { .. })));
    }
}
