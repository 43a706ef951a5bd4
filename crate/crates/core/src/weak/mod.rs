//! Caption parsing and pseudo-label grounding.

mod grounding;
mod parser;

pub use grounding::{
    ground_phrases, ground_triplets, ground_triplets_with, merge_labels, ObjectScore, PhraseMatch, PseudoLabel,
    DEFAULT_THRESHOLD,
};
pub use parser::{parse_caption, CaptionParser, CaptionTriplet, Lexicon, ParserRules};

use rayon::prelude::*;
use thiserror::Error;

use crate::concept::{ConceptError, ConceptTable};
use crate::matching::MatchError;
use crate::model::{ModelError, PredictionSet};

pub const CAPTION_PROVENANCE: &str = "caption";

#[derive(Debug, Error)]
pub enum WeakError {
    #[error("no predictions available for grounding")]
    NoPredictions,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("{0}")]
    Io(String),
    #[error("invalid parser rules: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

/// Parses a batch of captions in parallel, preserving order.
pub fn parse_corpus<S: AsRef<str> + Sync>(parser: &CaptionParser, captions: &[S]) -> Vec<Vec<CaptionTriplet>> {
    captions.par_iter().map(|c| parser.parse(c.as_ref())).collect()
}

/// Parses every caption of one image, grounds each separately and merges the results.
pub fn label_image<S: AsRef<str>>(
    parser: &CaptionParser,
    image_id: &str,
    captions: &[S],
    preds: &PredictionSet,
    concepts: &ConceptTable,
    threshold: f64,
    score: ObjectScore,
) -> Result<PseudoLabel, WeakError> {
    let labels = captions
        .iter()
        .map(|c| ground_triplets_with(&parser.parse(c.as_ref()), preds, concepts, threshold, score))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge_labels(image_id, &labels))
}
