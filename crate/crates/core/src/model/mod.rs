//! Set-prediction scene-graph model over frozen visual tokens.

mod features;
mod inference;
mod network;

pub use features::{parse_feature_ref, FeatureCache, FeatureMap, FeatureStore, FEATURE_FORMAT};
pub use inference::{
    decode_nodes, edge_alignment_scores, edge_features, node_similarity, predict_scene_graph, prediction_set, read_predictions,
    write_predictions, EdgeFeature, PredictedTriplet, PredictionMeta, PredictionRecord, PredictionSet, OBJECTNESS_METHOD,
};
pub use network::{canonical_token_order, positional_encoding, NodeOutput, SceneGraphModel};

use serde::{Deserialize, Serialize};

use crate::concept::ConceptError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary has no object names")]
    EmptyVocabulary,
    #[error("subject and object are the same query ({0})")]
    SelfPair(usize),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Object queries decoded per image.
    pub num_queries: usize,
    /// Relation queries averaged by the edge head.
    pub relation_queries: usize,
    pub feature_dim: usize,
    /// Node feature width; equals the concept embedding width.
    pub node_dim: usize,
    pub edge_dim: usize,
    pub relation_hidden: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub box_hidden: usize,
    /// Queries kept (by objectness) when forming pairs at inference.
    pub top_n_detections: usize,
    /// At most one predicate per ordered pair at inference.
    pub graph_constraint: bool,
    /// Length of the ranked triplet list emitted per image.
    pub max_triplets: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            relation_queries: 1,
            feature_dim: 96,
            node_dim: 64,
            edge_dim: 64,
            relation_hidden: 128,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 128,
            box_hidden: 64,
            top_n_detections: 100,
            graph_constraint: true,
            max_triplets: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_queries == 0 || self.relation_queries == 0 {
            return fail("num_queries and relation_queries must be at least 1".into());
        }
        if self.top_n_detections == 0 || self.top_n_detections > self.num_queries {
            return fail(format!(
                "top_n_detections {} must be in 1..={}",
                self.top_n_detections, self.num_queries
            ));
        }
        if self.heads == 0 || self.node_dim % self.heads != 0 {
            return fail(format!("node_dim {} not divisible by heads {}", self.node_dim, self.heads));
        }
        let dims = [
            self.feature_dim,
            self.node_dim,
            self.edge_dim,
            self.relation_hidden,
            self.ffn_dim,
            self.box_hidden,
            self.decoder_layers,
            self.max_triplets,
        ];
        if dims.contains(&0) {
            return fail("dimensions, depth and max_triplets must be positive".into());
        }
        Ok(())
    }
}
