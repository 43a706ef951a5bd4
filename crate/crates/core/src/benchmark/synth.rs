use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::concept::{fixture_embedding, DEFAULT_EMBED_DIM};
use crate::model::{FeatureMap, FeatureStore};
use crate::numerics::Tensor;
use crate::types::{BBox, Dataset, Edge, Node, Record, SceneGraph, Vocabulary};

pub const FEATURE_FILE: &str = "features.bin";
pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "synth_manifest.json";
pub const BACKGROUND: &str = "__background__";
const BOX_CODE: usize = 8;

const OBJECT_NAMES: [&str; 40] = [
    "man", "dog", "cat", "horse", "car", "tree", "table", "chair", "cup", "bottle", "bag", "boat", "bike", "bird",
    "book", "box", "lamp", "plate", "shirt", "hat", "sign", "window", "door", "bench", "clock", "kite", "phone",
    "vase", "train", "bus", "truck", "sheep", "cow", "bear", "umbrella", "pizza", "laptop", "bowl", "pillow", "woman",
];

/// Geometric predicate rules, in priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Inside,
    Overlapping,
    Above,
    Below,
    LeftOf,
    Near,
    RightOf,
    FarFrom,
}

impl Rule {
    pub const ORDER: [Rule; 8] = [
        Rule::Inside,
        Rule::Overlapping,
        Rule::Above,
        Rule::Below,
        Rule::LeftOf,
        Rule::Near,
        Rule::RightOf,
        Rule::FarFrom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Inside => "in",
            Rule::Overlapping => "overlapping",
            Rule::Above => "above",
            Rule::Below => "below",
            Rule::LeftOf => "left of",
            Rule::Near => "near",
            Rule::RightOf => "right of",
            Rule::FarFrom => "far from",
        }
    }

    /// Whether `s` relates to `o` under this rule alone.
    pub fn holds(self, s: &BBox, o: &BBox, near: f64) -> bool {
        let [sx1, sy1, sx2, sy2] = s.corners();
        let [ox1, oy1, ox2, oy2] = o.corners();
        let x_overlap = sx1 < ox2 && ox1 < sx2;
        let y_overlap = sy1 < oy2 && oy1 < sy2;
        let intersects = x_overlap && y_overlap;
        let gap = (ox1 - sx2).max(sx1 - ox2).max(0.0).hypot((oy1 - sy2).max(sy1 - oy2).max(0.0));
        match self {
            Rule::Inside => s.inside(o),
            Rule::Overlapping => intersects && !s.inside(o) && !o.inside(s),
            Rule::Above => sy2 <= oy1 && x_overlap,
            Rule::Below => sy1 >= oy2 && x_overlap,
            Rule::LeftOf => sx2 <= ox1 && y_overlap,
            Rule::RightOf => sx1 >= ox2 && y_overlap,
            Rule::Near => !intersects && gap < near,
            Rule::FarFrom => gap > 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub scenes: usize,
    pub objects: usize,
    pub relations: usize,
    pub noise: f64,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Tokens per image; the rest after object tokens are background.
    pub tokens: usize,
    pub feature_dim: usize,
    pub concept_dim: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub near_threshold: f64,
    /// Chance that a new box is nested in an earlier one.
    pub inside_rate: f64,
    /// Chance that a new box partially overlaps an earlier one.
    pub overlap_rate: f64,
    pub anchor_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scenes: 32,
            objects: 12,
            relations: 6,
            noise: 0.05,
            seed: 0,
            min_objects: 3,
            max_objects: 8,
            tokens: 12,
            feature_dim: 96,
            concept_dim: DEFAULT_EMBED_DIM,
            min_size: 0.08,
            max_size: 0.3,
            near_threshold: 0.1,
            inside_rate: 0.15,
            overlap_rate: 0.15,
            anchor_jitter: 0.02,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.objects < 2 || self.relations < 2 {
            return bad(format!("need at least 2 objects and 2 relations, got {} and {}", self.objects, self.relations));
        }
        if self.relations > Rule::ORDER.len() {
            return bad(format!("at most {} geometric relations", Rule::ORDER.len()));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return bad(format!("object range {}..={}", self.min_objects, self.max_objects));
        }
        if self.max_objects > self.objects {
            return bad(format!("{} objects per scene but only {} concepts", self.max_objects, self.objects));
        }
        if self.tokens < self.max_objects {
            return bad(format!("{} tokens cannot hold {} objects", self.tokens, self.max_objects));
        }
        if self.feature_dim < self.concept_dim + BOX_CODE {
            return bad(format!("feature dim {} < concept dim {} + {BOX_CODE}", self.feature_dim, self.concept_dim));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad(format!("box size range {}..{}", self.min_size, self.max_size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {}", self.noise));
        }
        Ok(())
    }

    pub fn object_names(&self) -> Vec<String> {
        (0..self.objects)
            .map(|i| OBJECT_NAMES.get(i).map_or_else(|| format!("thing{i}"), |s| s.to_string()))
            .collect()
    }

    pub fn rules(&self) -> &'static [Rule] {
        &Rule::ORDER[..self.relations]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub dataset: String,
    pub features: String,
    pub rules: Vec<Rule>,
}

pub struct SynthData {
    pub dataset: Dataset,
    pub features: FeatureStore,
    /// `feature_dim × (concept_dim + 8)` with orthonormal columns.
    pub projection: Tensor,
}

/// Box code appended to the concept embedding: center, size and corners.
pub fn box_code(b: &BBox) -> [f64; BOX_CODE] {
    let [x1, y1, x2, y2] = b.corners();
    [b.cx(), b.cy(), b.w(), b.h(), x1, y1, x2, y2]
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        // Two passes of Gram-Schmidt keep the columns orthogonal to machine precision.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, x) in b.iter().enumerate() {
            data[i * cols + j] = *x;
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn random_box(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let h = rng.random_range(spec.min_size..=spec.max_size);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BBox::new(cx, cy, w, h).expect("box fits the image")
}

fn nested_box(outer: &BBox, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let max_w = outer.w() * 0.6;
    let max_h = outer.h() * 0.6;
    let min = spec.min_size * 0.5;
    if max_w < min || max_h < min {
        return None;
    }
    let w = rng.random_range(min..=max_w);
    let h = rng.random_range(min..=max_h);
    let [x1, y1, x2, y2] = outer.corners();
    let cx = rng.random_range(x1 + w / 2.0..=x2 - w / 2.0);
    let cy = rng.random_range(y1 + h / 2.0..=y2 - h / 2.0);
    BBox::new(cx, cy, w, h).ok()
}

fn shifted_box(base: &BBox, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let h = rng.random_range(spec.min_size..=spec.max_size);
    let dx = rng.random_range(0.3..0.8) * (base.w() + w) / 2.0 * if rng.random() { 1.0 } else { -1.0 };
    let dy = rng.random_range(0.0..0.5) * (base.h() + h) / 2.0 * if rng.random() { 1.0 } else { -1.0 };
    let (cx, cy) = (base.cx() + dx, base.cy() + dy);
    if cx - w / 2.0 < 0.0 || cx + w / 2.0 > 1.0 || cy - h / 2.0 < 0.0 || cy + h / 2.0 > 1.0 {
        return None;
    }
    BBox::new(cx, cy, w, h).ok()
}

/// Places `n` boxes: mostly disjoint, some nested, some partially overlapping.
fn place_boxes(n: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<BBox>, BenchError> {
    const TRIES: usize = 2000;
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        let mode: f64 = rng.random();
        if !boxes.is_empty() && mode < spec.inside_rate + spec.overlap_rate {
            let base = boxes[rng.random_range(0..boxes.len())];
            let cand = if mode < spec.inside_rate {
                nested_box(&base, spec, rng)
            } else {
                shifted_box(&base, spec, rng)
            };
            placed = cand;
        }
        if placed.is_none() {
            for _ in 0..TRIES {
                let b = random_box(spec, rng);
                if boxes.iter().all(|o| b.intersection(o) == 0.0) {
                    placed = Some(b);
                    break;
                }
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(BenchError::InfeasibleGeometry(format!(
                    "could not place box {} of {n} without overlap after {TRIES} attempts",
                    boxes.len() + 1
                )))
            }
        }
    }
    Ok(boxes)
}

/// Edges from the first applicable rule for every ordered pair.
pub fn label_edges(boxes: &[BBox], rules: &[Rule], names: &[String], near: f64) -> Vec<Edge> {
    let mut edges = Vec::new();
    for s in 0..boxes.len() {
        for o in 0..boxes.len() {
            if s == o {
                continue;
            }
            if let Some(r) = rules.iter().find(|r| r.holds(&boxes[s], &boxes[o], near)) {
                edges.push(Edge::new(s, o, names[Rule::ORDER.iter().position(|x| x == r).expect("known rule")].clone()));
            }
        }
    }
    edges
}

/// One templated sentence per edge, joined into a caption.
pub fn caption_for(graph: &SceneGraph) -> String {
    graph
        .edges
        .iter()
        .map(|e| {
            format!(
                "a {} {} a {}",
                graph.nodes[e.subject].concept, e.predicate, graph.nodes[e.object].concept
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn encode(projection: &Tensor, concept: &[f64], b: &BBox, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z = concept.to_vec();
    z.extend(box_code(b));
    (0..projection.rows())
        .map(|i| {
            let clean: f64 = projection.row(i).iter().zip(&z).map(|(p, x)| p * x).sum();
            let eps: f64 = StandardNormal.sample(rng);
            clean + noise * eps
        })
        .collect()
}

fn jitter(b: &BBox, amount: f64, rng: &mut ChaCha8Rng) -> BBox {
    let mut n = || -> f64 { StandardNormal.sample(rng) };
    let cx = (b.cx() + amount * b.w() * n()).clamp(0.0, 1.0);
    let cy = (b.cy() + amount * b.h() * n()).clamp(0.0, 1.0);
    let w = (b.w() * (1.0 + amount * n())).clamp(1e-3, 1.0);
    let h = (b.h() * (1.0 + amount * n())).clamp(1e-3, 1.0);
    BBox::new(cx, cy, w, h).expect("clamped")
}

/// Generates scenes, annotations, captions and token features, all from `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData, BenchError> {
    spec.validate()?;
    let objects = spec.object_names();
    let relations: Vec<String> = spec.rules().iter().map(|r| r.name().to_string()).collect();
    let all_rule_names: Vec<String> = Rule::ORDER.iter().map(|r| r.name().to_string()).collect();
    let vocab = Vocabulary::all_base(objects.clone(), relations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let projection = orthonormal_columns(spec.feature_dim, spec.concept_dim + BOX_CODE, &mut rng);
    let embeddings: Vec<Vec<f64>> = objects.iter().map(|n| fixture_embedding(n, spec.concept_dim)).collect();
    let background = fixture_embedding(BACKGROUND, spec.concept_dim);

    let mut records = Vec::with_capacity(spec.scenes);
    let mut store = FeatureStore::new();
    for i in 0..spec.scenes {
        let image_id = format!("synth_{i:05}");
        let mut graph = SceneGraph::new(&image_id);
        for attempt in 0.. {
            let n = rng.random_range(spec.min_objects..=spec.max_objects);
            let mut concepts: Vec<usize> = (0..objects.len()).collect();
            concepts.shuffle(&mut rng);
            let boxes = place_boxes(n, spec, &mut rng)?;
            let nodes: Vec<Node> = boxes
                .iter()
                .zip(&concepts)
                .map(|(b, &c)| {
                    let mut node = Node::new(*b, objects[c].clone());
                    node.concept_id = Some(c);
                    node
                })
                .collect();
            graph.edges = label_edges(&boxes, spec.rules(), &all_rule_names, spec.near_threshold);
            graph.nodes = nodes;
            if !graph.edges.is_empty() || attempt >= 20 {
                break;
            }
        }

        let mut tokens: Vec<(Vec<f64>, BBox)> = graph
            .nodes
            .iter()
            .map(|node| {
                let c = node.concept_id.expect("set above");
                let f = encode(&projection, &embeddings[c], &node.bbox, spec.noise, &mut rng);
                (f, jitter(&node.bbox, spec.anchor_jitter, &mut rng))
            })
            .collect();
        while tokens.len() < spec.tokens {
            let b = random_box(spec, &mut rng);
            let f = encode(&projection, &background, &b, spec.noise, &mut rng);
            tokens.push((f, b));
        }
        tokens.shuffle(&mut rng);
        let (feats, anchors): (Vec<Vec<f64>>, Vec<BBox>) = tokens.into_iter().unzip();
        let map = FeatureMap::new(Tensor::new(vec![feats.len(), spec.feature_dim], feats.concat())?, anchors)?;
        let idx = store.push(map)?;

        records.push(Record {
            image_id,
            features: format!("{FEATURE_FILE}:{idx}"),
            caption: Some(caption_for(&graph)),
            provenance: Some("synthetic".into()),
            graph,
        });
    }
    Ok(SynthData {
        dataset: Dataset::new(vocab, records)?,
        features: store,
        projection,
    })
}

/// Writes the dataset, features and manifest into `dir`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec, data: &SynthData) -> Result<SynthManifest, BenchError> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;
    data.dataset.save(&dir.join(DATASET_FILE))?;
    data.features.save(&dir.join(FEATURE_FILE))?;
    let manifest = SynthManifest {
        spec: spec.clone(),
        dataset: DATASET_FILE.into(),
        features: FEATURE_FILE.into(),
        rules: spec.rules().to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;
    Ok(manifest)
}
