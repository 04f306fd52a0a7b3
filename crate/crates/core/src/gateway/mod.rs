//! Single abstraction for all model calls: embedding, summarization, and
//! per-role chat. Two backends implement it — a deterministic rule-driven
//! stub for offline runs and tests, and a remote HTTP client for real
//! deployments.

mod remote;
mod stub;

pub use remote::{RemoteBackend, RemoteConfig};
pub use stub::{StubBackend, StubConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agent roles. The reasoner is the only role billed as large-model; the
/// tam_builder is a system role that exists for memory access control only
/// and never issues chat calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Planner,
    Navigator,
    Retriever,
    Verifier,
    Reasoner,
    Summarizer,
    Embedder,
    TamBuilder,
}

impl ModelRole {
    /// All roles, for exhaustive policy iteration.
    pub const ALL: [ModelRole; 8] = [
        ModelRole::Planner,
        ModelRole::Navigator,
        ModelRole::Retriever,
        ModelRole::Verifier,
        ModelRole::Reasoner,
        ModelRole::Summarizer,
        ModelRole::Embedder,
        ModelRole::TamBuilder,
    ];

    /// Whether calls under this role count as large-model cost.
    pub fn is_large_model(&self) -> bool {
        matches!(self, ModelRole::Reasoner)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelRole::Planner => "planner",
            ModelRole::Navigator => "navigator",
            ModelRole::Retriever => "retriever",
            ModelRole::Verifier => "verifier",
            ModelRole::Reasoner => "reasoner",
            ModelRole::Summarizer => "summarizer",
            ModelRole::Embedder => "embedder",
            ModelRole::TamBuilder => "tam_builder",
        }
    }
}

impl std::fmt::Display for ModelRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Abstraction level requested from the summarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstractionLevel {
    /// Entity–relation abstraction over a leaf group.
    Mid,
    /// Topic abstraction over a mid group.
    High,
    /// Corpus-level abstraction.
    Root,
}

impl AbstractionLevel {
    pub fn tag(&self) -> &'static str {
        match self {
            AbstractionLevel::Mid => "mid",
            AbstractionLevel::High => "high",
            AbstractionLevel::Root => "root",
        }
    }
}

/// One chat call. Decoding is always greedy (temperature 0), so identical
/// requests yield identical replies on deterministic backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: ModelRole,
    pub system: Option<String>,
    pub user: String,
    pub temperature: f32,
}

impl ChatRequest {
    pub fn new(role: ModelRole, user: impl Into<String>) -> Self {
        ChatRequest {
            role,
            system: None,
            user: user.into(),
            temperature: 0.0,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }
}

/// Reply text plus token usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Fixed-dimension, L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wrap raw components and normalize to unit L2 norm. Zero vectors are
    /// rejected.
    pub fn normalized(mut components: Vec<f32>) -> Result<Self> {
        let norm = components.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("embedding has zero or non-finite norm"));
        }
        for x in &mut components {
            *x = (*x as f64 / norm) as f32;
        }
        Ok(EmbeddingVector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
    }

    /// Cosine similarity, accumulated in f64 and clamped into `[-1, 1]`.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// The backend contract shared by stub and remote implementations.
///
/// Backends are read-only services: concurrent calls are allowed and stub
/// backends are pure functions of input and seed.
pub trait ModelBackend: Send + Sync {
    /// Embed a non-empty text into the backend's fixed dimension.
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    /// Condense child texts into one abstraction at the given level.
    fn summarize(&self, children: &[String], level: AbstractionLevel) -> Result<String>;

    /// Answer a role-addressed chat request.
    fn chat(&self, request: &ChatRequest) -> Result<ChatReply>;
}

/// Whitespace token count used by stub backends for usage accounting.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_vectors_have_unit_norm() {
        let v = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
        assert!((v.components()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_rejected() {
        assert!(EmbeddingVector::normalized(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_is_clamped_and_symmetric() {
        let a = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        let b = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        let c = EmbeddingVector::normalized(vec![0.0, 1.0]).unwrap();
        assert!((a.cosine(&b) - 1.0).abs() < 1e-9);
        assert!(a.cosine(&c).abs() < 1e-9);
        assert_eq!(a.cosine(&c), c.cosine(&a));
    }

    #[test]
    fn only_reasoner_is_large_model() {
        for role in ModelRole::ALL {
            assert_eq!(role.is_large_model(), role == ModelRole::Reasoner);
        }
    }
}
