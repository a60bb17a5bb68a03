//! Model backends. The questioning, captioning and selection agents are
//! text-only chat endpoints; the VQA model is a chat endpoint that also
//! accepts images. Image embeddings come from an external encoder and are
//! only read here.

mod embedding;
mod remote;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{cosine_similarity, load_embedding_index, EmbeddingError, EmbeddingIndex};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy};
pub use scripted::{FnBackend, RecordingBackend, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response has no assistant content")]
    MissingContent,
    #[error("backend {0} does not accept images")]
    VisionUnsupported(String),
    #[error("message list is empty")]
    EmptyMessages,
    #[error("message #{0} has no content parts")]
    EmptyMessage(usize),
    #[error("image parts are only allowed in user messages (message #{0})")]
    ImageOutsideUserMessage(usize),
    #[error("cannot read image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// Worth retrying: transport errors, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentPart {
    Text(String),
    ImageRef(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::text(Role::Assistant, text)
    }

    /// A user turn carrying images followed by the question text.
    pub fn user_with_images(text: impl Into<String>, image_refs: &[String]) -> Self {
        let mut content: Vec<ContentPart> =
            image_refs.iter().cloned().map(ContentPart::ImageRef).collect();
        content.push(ContentPart::Text(text.into()));
        ChatMessage {
            role: Role::User,
            content,
        }
    }

    /// Concatenated text parts.
    pub fn text_content(&self) -> String {
        let texts: Vec<&str> = self
            .content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::ImageRef(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    pub fn image_refs(&self) -> impl Iterator<Item = &str> {
        self.content.iter().filter_map(|p| match p {
            ContentPart::ImageRef(r) => Some(r.as_str()),
            ContentPart::Text(_) => None,
        })
    }

    pub fn has_images(&self) -> bool {
        self.image_refs().next().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl GenerationParams {
    /// Greedy decoding used for evaluation and for the selection agent.
    pub const fn evaluation() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 4096,
        }
    }

    /// Slightly stochastic decoding used while generating synthetic QA data.
    pub const fn curation() -> Self {
        GenerationParams {
            temperature: 0.1,
            max_tokens: 4096,
        }
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::evaluation()
    }
}

/// A chat-completion endpoint. Implementations must be shareable across
/// threads; conversation state always lives with the caller.
pub trait ChatBackend: Send + Sync {
    /// Model identifier recorded in logs.
    fn model_name(&self) -> &str;

    fn supports_vision(&self) -> bool;

    /// Raw completion call. Use [`chat`] to get precondition checks.
    fn complete(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError>;
}

/// Validates the request shape and forwards to the backend.
pub fn chat(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &GenerationParams,
) -> Result<String, BackendError> {
    if messages.is_empty() {
        return Err(BackendError::EmptyMessages);
    }
    for (i, msg) in messages.iter().enumerate() {
        if msg.content.is_empty() {
            return Err(BackendError::EmptyMessage(i));
        }
        if msg.has_images() {
            if msg.role != Role::User {
                return Err(BackendError::ImageOutsideUserMessage(i));
            }
            if !backend.supports_vision() {
                return Err(BackendError::VisionUnsupported(backend.model_name().to_string()));
            }
        }
    }
    backend.complete(messages, params)
}
