//! In-process backends for tests and simulation.

use std::collections::VecDeque;
use std::sync::Mutex;

use super::{BackendError, ChatBackend, ChatMessage, GenerationParams};

/// Replays a fixed list of replies in order, then fails with
/// [`BackendError::ScriptExhausted`]. Calls are serialized.
pub struct ScriptedBackend {
    name: String,
    vision: bool,
    script: Mutex<VecDeque<Result<String, BackendError>>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(name: impl Into<String>, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(name, replies.into_iter().map(|r| Ok(r.into())))
    }

    /// Script entries may also be errors, to exercise failure paths.
    pub fn from_results(
        name: impl Into<String>,
        replies: impl IntoIterator<Item = Result<String, BackendError>>,
    ) -> Self {
        ScriptedBackend {
            name: name.into(),
            vision: false,
            script: Mutex::new(replies.into_iter().collect()),
        }
    }

    pub fn with_vision(mut self, vision: bool) -> Self {
        self.vision = vision;
        self
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn supports_vision(&self) -> bool {
        self.vision
    }

    fn complete(&self, _: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or(Err(BackendError::ScriptExhausted))
    }
}

type Responder = dyn Fn(&[ChatMessage], &GenerationParams) -> Result<String, BackendError> + Send + Sync;

/// Computes each reply from the request alone. Deterministic whenever the
/// closure is, regardless of call interleaving.
pub struct FnBackend {
    name: String,
    vision: bool,
    responder: Box<Responder>,
}

impl FnBackend {
    pub fn new<F>(name: impl Into<String>, vision: bool, responder: F) -> Self
    where
        F: Fn(&[ChatMessage], &GenerationParams) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        FnBackend {
            name: name.into(),
            vision,
            responder: Box::new(responder),
        }
    }
}

impl ChatBackend for FnBackend {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn supports_vision(&self) -> bool {
        self.vision
    }

    fn complete(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        (self.responder)(messages, params)
    }
}

/// Wraps another backend and keeps every request it forwards.
pub struct RecordingBackend<B> {
    inner: B,
    calls: Mutex<Vec<Vec<ChatMessage>>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls.lock().unwrap().clone()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn supports_vision(&self) -> bool {
        self.inner.supports_vision()
    }

    fn complete(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        self.calls.lock().unwrap().push(messages.to_vec());
        self.inner.complete(messages, params)
    }
}
