//! Benchmark splits, synthetic scenes and SGDET evaluation.

mod eval;
mod split;
mod synth;

pub use eval::{
    evaluate_sgdet, match_image, EvalConfig, EvalReport, ImageRecall, MatchedTriplet, Slice, SliceRecall, DEFAULT_IOU,
    DEFAULT_KS,
};
pub use split::{
    build_split, split_leaks, split_vocabulary, Setting, Split, SplitManifest, SplitSpec, REFERENCE_OVDR_TRAIN_IMAGES,
    REFERENCE_OVD_TRAIN_IMAGES, REFERENCE_TRAIN_IMAGES,
};
pub use synth::{
    box_code, caption_for, generate_synthetic, label_edges, write_synthetic, Rule, SynthData, SynthManifest, SynthSpec,
    BACKGROUND, DATASET_FILE, FEATURE_FILE, MANIFEST_FILE,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::types::TypesError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Types(#[from] TypesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
