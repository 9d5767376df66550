//! On-disk response cache keyed by a content hash of the request.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, Message};

#[derive(Serialize)]
struct KeyMaterial<'a> {
    endpoint_id: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    want_choice_distribution: bool,
    samples: u32,
}

/// Stable hex digest of the request fields that determine the response.
/// Image bytes are not hashed, only their URIs.
pub fn cache_key(req: &ChatRequest) -> String {
    let material = KeyMaterial {
        endpoint_id: &req.endpoint_id,
        messages: &req.messages,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
        want_choice_distribution: req.want_choice_distribution,
        samples: req.samples,
    };
    let bytes = serde_json::to_vec(&material).expect("request key serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    key: String,
    request: ChatRequest,
    response: ChatResponse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writes: u64,
}

/// One JSON file per entry under `root/<2 hex>/<key>.json`. Writes go
/// through a temp file and rename, so readers never see partial entries.
#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    writes: AtomicU64,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ResponseCache {
            root,
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, req: &ChatRequest) -> Option<ChatResponse> {
        let key = cache_key(req);
        let found = fs::read(self.path_for(&key))
            .ok()
            .and_then(|bytes| serde_json::from_slice::<Entry>(&bytes).ok())
            .filter(|e| e.key == key);
        match found {
            Some(e) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                let mut resp = e.response;
                resp.cached = true;
                Some(resp)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, req: &ChatRequest, resp: &ChatResponse) -> io::Result<()> {
        let key = cache_key(req);
        let path = self.path_for(&key);
        let dir = path.parent().expect("entry has a parent dir");
        let mut stored = resp.clone();
        stored.cached = false;
        let entry = Entry { key, request: req.clone(), response: stored };
        let mut bytes = serde_json::to_vec_pretty(&entry).map_err(io::Error::other)?;
        bytes.push(b'\n');

        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.persist(&path).map_err(|e| e.error)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
        }
    }
}
