//! Backend interaction: prompt synthesis, strict response parsing, and two
//! interchangeable backends (scripted ground-truth oracle, live HTTP).

pub mod http;
pub mod prompt;
pub mod response;
pub mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::{GroundTruthFrame, SimScene};
use crate::task_memory::SubtaskNode;

pub use prompt::{Mode, PromptBundle, PromptConfig, SectionTag};
pub use response::{parse_response, ActionCommand, ActionTarget, ResponseKind, Verb, VlmResponse};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VlmError {
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no active subtask")]
    NoActiveSubtask,
    #[error("backend config: {0}")]
    Config(String),
}

/// Structured side of a query. Scripted backends read it; live backends see
/// only the rendered text and images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum QueryContext {
    Segmentation { frame: u64 },
    Relationships { frame: u64, pairs: Vec<(String, String)> },
    Plan,
    Action { frame: u64, mode: Mode, subtask: SubtaskNode, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmQuery {
    pub kind: ResponseKind,
    pub text: String,
    /// Base64-encoded PNG frames.
    pub images: Vec<String>,
    pub context: QueryContext,
}

impl VlmQuery {
    pub fn new(kind: ResponseKind, text: String, context: QueryContext) -> Self {
        VlmQuery { kind, text, images: Vec::new(), context }
    }

    /// Stable digest of the query, used to seed scripted randomness.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        h.update(serde_json::to_vec(&self.context).expect("context serializes"));
        h.update(self.text.as_bytes());
        h.finalize().into()
    }
}

/// Ground truth visible to scripted backends.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a> {
    pub scene: &'a SimScene,
    pub frame: Option<&'a GroundTruthFrame>,
}

pub trait VlmBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Raw response text for a query.
    fn complete(&self, query: &VlmQuery, oracle: &Oracle<'_>) -> Result<String, VlmError>;
}

/// Sends a query and parses the answer against the expected kind.
pub fn request(backend: &dyn VlmBackend, query: &VlmQuery, oracle: &Oracle<'_>) -> Result<VlmResponse, VlmError> {
    let raw = backend.complete(query, oracle)?;
    parse_response(&raw, query.kind)
}
