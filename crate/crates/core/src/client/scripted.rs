use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

type Handler = dyn Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync;

/// Backend driven by a closure. Used for tests, fixtures and offline runs.
pub struct ScriptedBackend {
    handler: Box<Handler>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new<F>(handler: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend { handler: Box::new(handler), calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend").field("calls", &self.calls()).finish()
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.handler)(req)
    }
}
