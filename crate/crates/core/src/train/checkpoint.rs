use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::concept::{embed_concepts, ConceptTable, EmbedMode};
use crate::model::{ModelConfig, SceneGraphModel};
use crate::numerics::{checkpoint, ParamStore};
use crate::types::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    Pretrain,
    Finetune,
}

/// Everything besides the weights needed to reuse a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub model: ModelConfig,
    pub embedding: EmbedMode,
    pub concept_fingerprint: String,
    /// Names the weights were trained on.
    pub object_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub lambda: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SceneGraphModel,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: ParamStore, meta: CheckpointMeta) -> Result<Self, TrainError> {
        let model = SceneGraphModel::new(meta.model.clone())?;
        Ok(Self { model, params, meta })
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        checkpoint::save(dir, &self.params, serde_json::to_value(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let (params, meta) = checkpoint::load(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| {
            TrainError::Io(format!("{}: checkpoint metadata is invalid: {e}", dir.display()))
        })?;
        let ck = Self::new(params, meta)?;
        // Building the parameter layout afresh catches missing or misshapen tensors.
        let expected = ck.model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, p) in expected.iter() {
            match ck.params.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => {
                    return Err(TrainError::Io(format!(
                        "{}: tensor {name} has shape {:?}, expected {:?}",
                        dir.display(),
                        q.value.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(TrainError::Io(format!("{}: tensor {name} missing", dir.display()))),
            }
        }
        Ok(ck)
    }

    /// Names in `vocab` this checkpoint cannot score: base names it was not trained on,
    /// plus any name its embedding source cannot embed.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<ConceptTable, TrainError> {
        let trained_objects: BTreeSet<&String> = self.meta.object_names.iter().collect();
        let trained_relations: BTreeSet<&String> = self.meta.relation_names.iter().collect();
        let mut missing: BTreeSet<String> = vocab
            .base_objects()
            .into_iter()
            .filter(|n| !trained_objects.contains(n))
            .chain(vocab.base_relations().into_iter().filter(|n| !trained_relations.contains(n)))
            .collect();
        let names = self.all_names(vocab);
        match embed_concepts(&names, &self.meta.embedding) {
            Ok(table) if missing.is_empty() => Ok(table),
            Ok(_) => Err(TrainError::VocabularyMismatch { missing }),
            Err(crate::concept::ConceptError::MissingNames(names)) => {
                missing.extend(names);
                Err(TrainError::VocabularyMismatch { missing })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Concept table covering the checkpoint's names and those of `vocab`.
    pub fn concepts_for(&self, vocab: &Vocabulary) -> Result<ConceptTable, TrainError> {
        Ok(embed_concepts(&self.all_names(vocab), &self.meta.embedding)?)
    }

    fn all_names(&self, vocab: &Vocabulary) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.meta
            .object_names
            .iter()
            .chain(&self.meta.relation_names)
            .chain(vocab.object_names())
            .chain(vocab.relation_names())
            .filter(|n| seen.insert(n.as_str()))
            .cloned()
            .collect()
    }
}
