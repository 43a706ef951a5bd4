//! Training loops: detector warm-up, caption pretraining and fine-tuning with retention.

mod checkpoint;
mod pipeline;
mod step;

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};
pub use pipeline::{
    build_pseudo_dataset, finetune, load_feature_maps, predict_dataset, pretrain, train_images, FinetuneOutcome,
    PretrainOutcome, PseudoSummary,
};
pub use step::{image_step, run_training, StepLog, Teacher, TrainImage, TrainVocab};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::BenchError;
use crate::concept::{ConceptError, EmbedMode, DEFAULT_EMBED_DIM};
use crate::losses::{LossConfig, LossError};
use crate::matching::{MatchCost, MatchError};
use crate::model::ModelError;
use crate::numerics::{NumericsError, SgdConfig};
use crate::types::TypesError;
use crate::weak::{ObjectScore, WeakError, DEFAULT_THRESHOLD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty pseudo-label set: no caption triplet survived grounding")]
    EmptyPseudoLabels,
    #[error("no training images with annotations")]
    NoTrainingData,
    #[error("distillation weight {0} > 0 needs a teacher checkpoint")]
    MissingTeacher(f64),
    #[error("vocabulary mismatch: checkpoint cannot score {}", .missing.iter().cloned().collect::<Vec<_>>().join(", "))]
    VocabularyMismatch { missing: BTreeSet<String> },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Types(#[from] TypesError),
    #[error(transparent)]
    Weak(#[from] WeakError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

/// Learning-rate schedule over the steps of one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the configured rate to zero.
    #[default]
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if steps <= 1 => base,
            Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps of the main stage.
    pub steps: usize,
    /// Optimizer steps of the detector warm-up before caption grounding.
    pub detector_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub matching: MatchCost,
    pub embedding: EmbedMode,
    /// Grounding gate on endpoint confidences.
    pub pseudo_threshold: f64,
    pub object_score: ObjectScore,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            detector_steps: 150,
            batch_size: 8,
            seed: 0,
            log_every: 10,
            sgd: SgdConfig::default(),
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            matching: MatchCost::default(),
            embedding: EmbedMode::Fixture { dim: DEFAULT_EMBED_DIM },
            pseudo_threshold: DEFAULT_THRESHOLD,
            object_score: ObjectScore::MatchedPhrase,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        self.matching.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.sgd.learning_rate > 0.0 && self.sgd.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.sgd.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return Err(TrainError::InvalidConfig(format!("momentum {}", self.sgd.momentum)));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold) {
            return Err(TrainError::InvalidConfig(format!("pseudo threshold {}", self.pseudo_threshold)));
        }
        Ok(())
    }
}
