//! Model-collaboration pipeline: corpora, caption metrics, chat backends,
//! few-shot retrieval, the question/answer inference loop, data curation
//! and a simulated world for checking all of it offline.

pub mod corpus;
pub mod metrics;
pub mod seed;
pub mod text;
pub mod backends;
pub mod retrieval;
pub mod orchestrator;
pub mod curation;
pub mod simharness;

pub use backends::{BackendError, ChatBackend, ChatMessage, EmbeddingIndex, GenerationParams};
pub use corpus::{CaptionedCase, Corpus, CorpusError, Split};
pub use curation::{CurationReport, MemoryEntry, SelectionStrategy, VqaExample};
pub use metrics::{MetricsReport, TokenSequence};
pub use orchestrator::{Backends, Conversation, ConversationTurn, OrchestratorConfig, StopReason};
pub use retrieval::{FewShotConfig, FewShotStrategy};
pub use simharness::{AblationKind, FindingWorld, SimConfig};
