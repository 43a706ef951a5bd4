use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureMap, ModelError, NodeOutput, SceneGraphModel};
use crate::concept::{ConceptError, ConceptTable};
use crate::numerics::{sigmoid, Graph, ParamStore, Tensor};
use crate::types::{BBox, Vocabulary};

pub const OBJECTNESS_METHOD: &str = "max_concept_score";

/// Decoded nodes for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `K × d` node features.
    pub features: Tensor,
    pub boxes: Vec<BBox>,
    /// `K × C` raw concept logits.
    pub logits: Tensor,
    /// Sigmoid of `logits`.
    pub scores: Tensor,
    /// Highest concept score per query.
    pub objectness: Vec<f64>,
    /// Original token index each query started from.
    pub tokens: Vec<usize>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Index of the best concept for query `q` (first on ties).
    pub fn best_concept(&self, q: usize) -> usize {
        argmax(self.logits.row(q))
    }
}

/// Edge feature for an ordered pair of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeature {
    pub subject: usize,
    pub object: usize,
    pub values: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn to_bbox(b: &[f64]) -> BBox {
    let c = |x: f64| x.clamp(0.0, 1.0);
    let e = |x: f64| x.clamp(1e-9, 1.0);
    BBox::new(c(b[0]), c(b[1]), e(b[2]), e(b[3])).expect("clamped box is valid")
}

/// `σ(⟨w, v⟩)`.
pub fn node_similarity(v: &[f64], w: &[f64]) -> Result<f64, ModelError> {
    if v.len() != w.len() {
        return Err(ModelError::Dimension(format!("node {} vs concept {}", v.len(), w.len())));
    }
    Ok(sigmoid(v.iter().zip(w).map(|(a, b)| a * b).sum()))
}

pub fn decode_nodes<S: AsRef<str>>(
    model: &SceneGraphModel,
    params: &ParamStore,
    fm: &FeatureMap,
    concepts: &ConceptTable,
    object_names: &[S],
) -> Result<PredictionSet, ModelError> {
    if object_names.is_empty() {
        return Err(ModelError::EmptyVocabulary);
    }
    let matrix = concepts.matrix(object_names)?;
    let mut g = Graph::new(params);
    let out = model.forward_nodes(&mut g, fm, &matrix)?;
    Ok(prediction_set(&g, &out))
}

/// Values of a node decoding, read out of the graph that produced them.
pub fn prediction_set(g: &Graph, out: &NodeOutput) -> PredictionSet {
    let logits = g.value(out.logits).clone();
    let scores = logits.map(sigmoid);
    let boxes_t = g.value(out.boxes);
    let boxes = (0..boxes_t.rows()).map(|r| to_bbox(boxes_t.row(r))).collect();
    let objectness = (0..scores.rows())
        .map(|r| scores.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    PredictionSet {
        features: g.value(out.features).clone(),
        boxes,
        logits,
        scores,
        objectness,
        tokens: out.tokens.clone(),
    }
}

pub fn edge_features(
    model: &SceneGraphModel,
    params: &ParamStore,
    preds: &PredictionSet,
    pairs: &[(usize, usize)],
) -> Result<Vec<EdgeFeature>, ModelError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(params);
    let nodes = g.constant(preds.features.clone());
    let e = model.edge_features(&mut g, nodes, pairs)?;
    let e = g.value(e);
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, o))| EdgeFeature {
            subject: s,
            object: o,
            values: e.row(i).to_vec(),
        })
        .collect())
}

/// Raw relation logits of one edge feature against every name in `relation_names`.
pub fn edge_alignment_scores<S: AsRef<str>>(
    model: &SceneGraphModel,
    params: &ParamStore,
    edge: &EdgeFeature,
    relations: &ConceptTable,
    relation_names: &[S],
) -> Result<Vec<f64>, ModelError> {
    let proj = model.text_projection();
    if edge.values.len() != proj.edge_dim() {
        return Err(ModelError::Dimension(format!(
            "edge feature {} vs projection {}",
            edge.values.len(),
            proj.edge_dim()
        )));
    }
    let mut out = Vec::with_capacity(relation_names.len());
    for n in relation_names {
        let w = relations
            .get(n.as_ref())
            .ok_or_else(|| ConceptError::UnknownName(n.as_ref().to_string()))?;
        let f = crate::concept::project_text(w, proj, params)?;
        out.push(edge.values.iter().zip(&f).map(|(a, b)| a * b).sum());
    }
    Ok(out)
}

/// One ranked triplet; query indices are kept for diagnostics but not serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedTriplet {
    pub s_box: BBox,
    pub o_box: BBox,
    pub s_name: String,
    pub o_name: String,
    pub predicate: String,
    pub score: f64,
    #[serde(skip)]
    pub subject: usize,
    #[serde(skip)]
    pub object: usize,
}

/// Ranked triplets for every ordered pair among the most confident queries.
pub fn predict_scene_graph(
    model: &SceneGraphModel,
    params: &ParamStore,
    fm: &FeatureMap,
    vocab: &Vocabulary,
    concepts: &ConceptTable,
) -> Result<Vec<PredictedTriplet>, ModelError> {
    let cfg = model.config();
    let objects = vocab.object_names();
    let relations = vocab.relation_names();
    if objects.is_empty() {
        return Err(ModelError::EmptyVocabulary);
    }
    let preds = decode_nodes(model, params, fm, concepts, objects)?;
    if relations.is_empty() {
        return Ok(Vec::new());
    }
    let mut keep: Vec<usize> = (0..preds.len()).collect();
    keep.sort_by(|&a, &b| preds.objectness[b].total_cmp(&preds.objectness[a]).then(a.cmp(&b)));
    keep.truncate(cfg.top_n_detections);
    keep.sort_unstable();
    let pairs: Vec<(usize, usize)> = keep
        .iter()
        .flat_map(|&s| keep.iter().filter(move |&&o| o != s).map(move |&o| (s, o)))
        .collect();
    if pairs.is_empty() {
        return Ok(Vec::new());
    }

    let rel_matrix = concepts.matrix(relations)?;
    let mut g = Graph::new(params);
    let nodes = g.constant(preds.features.clone());
    let e = model.edge_features(&mut g, nodes, &pairs)?;
    let logits = model.edge_logits(&mut g, e, &rel_matrix)?;
    let logits = g.value(logits);

    let label: Vec<usize> = (0..preds.len()).map(|q| preds.best_concept(q)).collect();
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, &(s, o)) in pairs.iter().enumerate() {
        let node_score = preds.objectness[s] * preds.objectness[o];
        let row = logits.row(pi);
        if cfg.graph_constraint {
            let r = argmax(row);
            scored.push((node_score * sigmoid(row[r]), pi, r));
        } else {
            scored.extend(row.iter().enumerate().map(|(r, &x)| (node_score * sigmoid(x), pi, r)));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored.truncate(cfg.max_triplets);
    Ok(scored
        .into_iter()
        .map(|(score, pi, r)| {
            let (s, o) = pairs[pi];
            PredictedTriplet {
                s_box: preds.boxes[s],
                o_box: preds.boxes[o],
                s_name: objects[label[s]].clone(),
                o_name: objects[label[o]].clone(),
                predicate: relations[r].clone(),
                score,
                subject: s,
                object: o,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub triplets: Vec<PredictedTriplet>,
}

/// Sidecar describing how a prediction dump was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionMeta {
    pub graph_constraint: bool,
    pub objectness: String,
    pub top_n_detections: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes one JSON line per image and a `<stem>.meta.json` sidecar.
pub fn write_predictions(path: &Path, records: &[PredictionRecord], meta: &PredictionMeta) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    fs::write(meta_path(path), serde_json::to_vec_pretty(meta)?).map_err(io)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<(Vec<PredictionRecord>, Option<PredictionMeta>), ModelError> {
    let io = |e: std::io::Error| ModelError::Io(format!("{}: {e}", path.display()));
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    let meta = match fs::read(meta_path(path)) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(_) => None,
    };
    Ok((out, meta))
}
