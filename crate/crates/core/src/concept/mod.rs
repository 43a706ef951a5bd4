//! Frozen concept embeddings, text prompts and the trainable text projection.

mod prompt;
mod table;

pub use prompt::{build_prompt, Prompt, PromptSubset, Span, SpanKind, CLS, PAD, SEP};
pub use table::{
    embed_concepts, fixture_embedding, read_alias_file, read_embedding_file, write_embedding_file, ConceptTable,
    EmbedMode, EmbeddingManifest, Provenance, DEFAULT_EMBED_DIM,
};

use rand::Rng;

use crate::numerics::{init_uniform, Graph, NumericsError, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ConceptError {
    #[error("unknown name {0:?}")]
    UnknownName(String),
    #[error("embedding file is missing names: {0:?}")]
    MissingNames(Vec<String>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vocabulary has no object names")]
    EmptyVocabulary,
    #[error("sampled prompt subset is empty")]
    EmptySubset,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Affine map from concept space (`text_dim`) to edge-feature space (`edge_dim`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextProjection {
    prefix: String,
    text_dim: usize,
    edge_dim: usize,
}

impl TextProjection {
    pub fn new(prefix: impl Into<String>, text_dim: usize, edge_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            text_dim,
            edge_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    /// Registers uniformly initialized parameters.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), NumericsError> {
        store.insert(
            &self.weight_name(),
            init_uniform(&[self.text_dim, self.edge_dim], self.text_dim, rng),
            true,
        )?;
        store.insert(&self.bias_name(), Tensor::zeros(&[self.edge_dim]), true)
    }

    /// Registers an identity weight (square only) and zero bias.
    pub fn init_identity(&self, store: &mut ParamStore) -> Result<(), ConceptError> {
        if self.text_dim != self.edge_dim {
            return Err(ConceptError::DimensionMismatch {
                expected: self.text_dim,
                got: self.edge_dim,
            });
        }
        store.insert(&self.weight_name(), Tensor::identity(self.text_dim), true)?;
        store.insert(&self.bias_name(), Tensor::zeros(&[self.edge_dim]), true)?;
        Ok(())
    }

    /// Projects each row of `words` (`n × text_dim`).
    pub fn apply(&self, g: &mut Graph, words: Var) -> Result<Var, NumericsError> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let y = g.matmul(words, w)?;
        g.add_row(y, b)
    }
}

/// Value-level projection of a single concept embedding.
pub fn project_text(word: &[f64], projection: &TextProjection, store: &ParamStore) -> Result<Vec<f64>, ConceptError> {
    if word.len() != projection.text_dim {
        return Err(ConceptError::DimensionMismatch {
            expected: projection.text_dim,
            got: word.len(),
        });
    }
    let w = store.tensor(&projection.weight_name())?;
    let b = store.tensor(&projection.bias_name())?;
    if w.shape() != [projection.text_dim, projection.edge_dim] || b.len() != projection.edge_dim {
        return Err(ConceptError::DimensionMismatch {
            expected: projection.text_dim * projection.edge_dim,
            got: w.len(),
        });
    }
    let x = Tensor::matrix(1, word.len(), word.to_vec())?;
    let y = x.matmul(w)?;
    Ok(y.data().iter().zip(b.data()).map(|(a, c)| a + c).collect())
}
