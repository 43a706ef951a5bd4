//! Scene-graph data model: boxes, nodes and edges, vocabularies and datasets.

mod bbox;
mod dataset;
mod scene;
mod vocab;

pub use bbox::{box_convert, giou, BBox, ConvertDirection};
pub use dataset::{Dataset, DatasetReport, Record};
pub use scene::{
    validate_scene_graph, Edge, Issue, IssueKind, Node, SceneGraph, Severity, Triplet, ValidationReport,
};
pub use vocab::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum TypesError {
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
