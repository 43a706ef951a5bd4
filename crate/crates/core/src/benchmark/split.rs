use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::types::{Dataset, Record, Vocabulary};

/// Image count of the full benchmark training split, kept for reference.
pub const REFERENCE_TRAIN_IMAGES: usize = 50_107;
/// Training images left after removing novel objects.
pub const REFERENCE_OVD_TRAIN_IMAGES: usize = 44_333;
/// Training images left after removing novel objects and relations.
pub const REFERENCE_OVDR_TRAIN_IMAGES: usize = 36_425;

const OBJECT_STREAM: u64 = 1;
const RELATION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Closed,
    Ovd,
    Ovr,
    OvdR,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::Closed, Setting::Ovd, Setting::Ovr, Setting::OvdR];

    pub fn hides_objects(self) -> bool {
        matches!(self, Setting::Ovd | Setting::OvdR)
    }

    pub fn hides_relations(self) -> bool {
        matches!(self, Setting::Ovr | Setting::OvdR)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Closed => "closed",
            Setting::Ovd => "ovd",
            Setting::Ovr => "ovr",
            Setting::OvdR => "ovd_r",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| BenchError::InvalidSpec(format!("unknown setting {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub setting: Setting,
    pub base_object_fraction: f64,
    /// Number of novel relations; `None` hides 30% of the relation vocabulary.
    pub novel_relations: Option<usize>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            setting: Setting::Closed,
            base_object_fraction: 0.7,
            novel_relations: None,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(setting: Setting, seed: u64) -> Self {
        Self {
            setting,
            seed,
            ..Self::default()
        }
    }

    /// Checks the fraction even for settings that do not use it, so a bad config never
    /// passes silently.
    pub fn validate(&self) -> Result<(), BenchError> {
        let f = self.base_object_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(BenchError::InvalidSpec(format!("base object fraction {f} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn base_object_count(&self, objects: usize) -> Result<usize, BenchError> {
        self.validate()?;
        let f = self.base_object_fraction;
        let n = ((f * objects as f64) - 1e-9).ceil().max(0.0) as usize;
        if n == 0 {
            return Err(BenchError::InvalidSpec("split selects zero base object categories".into()));
        }
        Ok(n.min(objects))
    }

    pub fn novel_relation_count(&self, relations: usize) -> Result<usize, BenchError> {
        let n = match self.novel_relations {
            Some(n) => n,
            None => ((relations as f64 * 0.3).round() as usize).max(1),
        };
        if n >= relations {
            return Err(BenchError::InvalidSpec(format!(
                "{n} novel relations leaves no base relation out of {relations}"
            )));
        }
        Ok(n)
    }
}

/// Names and seeds describing a split, written next to the split datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub setting: Setting,
    pub seed: u64,
    pub object_stream: u64,
    pub relation_stream: u64,
    pub base_object_fraction: f64,
    pub base_objects: Vec<String>,
    pub novel_objects: Vec<String>,
    pub base_relations: Vec<String>,
    pub novel_relations: Vec<String>,
    pub train_images: usize,
    pub eval_images: usize,
    pub dropped_images: Vec<String>,
}

pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
    pub manifest: SplitManifest,
}

fn choose(n: usize, k: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Base/novel masks for `vocab` under `spec`.
pub fn split_vocabulary(vocab: &Vocabulary, spec: &SplitSpec) -> Result<Vocabulary, BenchError> {
    let (no, nr) = (vocab.object_names().len(), vocab.relation_names().len());
    let mut objects = vec![true; no];
    let mut relations = vec![true; nr];
    if spec.setting.hides_objects() {
        let k = spec.base_object_count(no)?;
        objects = vec![false; no];
        for i in choose(no, k, spec.seed, OBJECT_STREAM) {
            objects[i] = true;
        }
    }
    if spec.setting.hides_relations() {
        let k = spec.novel_relation_count(nr)?;
        for i in choose(nr, k, spec.seed, RELATION_STREAM) {
            relations[i] = false;
        }
    }
    Ok(vocab.with_masks(objects, relations)?)
}

/// Builds training and evaluation datasets for one setting.
///
/// Training graphs lose novel-object nodes (with their edges) and novel-predicate
/// edges; images left without edges are dropped. Evaluation keeps everything.
pub fn build_split(ds: &Dataset, spec: &SplitSpec) -> Result<Split, BenchError> {
    spec.validate()?;
    let vocab = if spec.setting == Setting::Closed {
        ds.vocabulary.clone()
    } else {
        split_vocabulary(&ds.vocabulary, spec)?
    };
    let mut records = Vec::with_capacity(ds.records.len());
    let mut dropped = Vec::new();
    for r in &ds.records {
        if spec.setting == Setting::Closed {
            records.push(r.clone());
            continue;
        }
        let mut graph = r.graph.clone();
        if spec.setting.hides_objects() {
            graph.retain_nodes(|n| !vocab.is_novel_object(&n.concept));
        }
        if spec.setting.hides_relations() {
            graph.edges.retain(|e| !vocab.is_novel_relation(&e.predicate));
        }
        if graph.edges.is_empty() {
            dropped.push(r.image_id.clone());
            continue;
        }
        graph.resolve(&vocab);
        records.push(Record { graph, ..r.clone() });
    }
    let train = Dataset::new(vocab.clone(), records)?;
    let mut eval = Dataset::new(vocab.clone(), ds.records.clone())?;
    eval.resolve();
    let manifest = SplitManifest {
        setting: spec.setting,
        seed: spec.seed,
        object_stream: OBJECT_STREAM,
        relation_stream: RELATION_STREAM,
        base_object_fraction: spec.base_object_fraction,
        base_objects: vocab.base_objects(),
        novel_objects: vocab.novel_objects(),
        base_relations: vocab.base_relations(),
        novel_relations: vocab.novel_relations(),
        train_images: train.records.len(),
        eval_images: eval.records.len(),
        dropped_images: dropped,
    };
    Ok(Split { train, eval, manifest })
}

/// Novel names that appear in training graphs; empty for a sound split.
pub fn split_leaks(train: &Dataset, setting: Setting) -> Vec<String> {
    let v = &train.vocabulary;
    let mut leaks = HashSet::new();
    for r in &train.records {
        if setting.hides_objects() {
            leaks.extend(r.graph.nodes.iter().filter(|n| v.is_novel_object(&n.concept)).map(|n| n.concept.clone()));
        }
        if setting.hides_relations() {
            leaks.extend(
                r.graph
                    .edges
                    .iter()
                    .filter(|e| v.is_novel_relation(&e.predicate))
                    .map(|e| e.predicate.clone()),
            );
        }
    }
    let mut out: Vec<String> = leaks.into_iter().collect();
    out.sort();
    out
}
