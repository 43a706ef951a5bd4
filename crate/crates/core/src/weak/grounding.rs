use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{CaptionTriplet, WeakError};
use crate::concept::ConceptTable;
use crate::matching::{match_bipartite, CostMatrix, MatchCost};
use crate::model::{node_similarity, PredictionSet};
use crate::types::{Edge, Node, SceneGraph};

pub const DEFAULT_THRESHOLD: f64 = 0.25;

/// Which score of the matched prediction gates a phrase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectScore {
    /// Similarity of the prediction to the phrase it was matched to.
    #[default]
    MatchedPhrase,
    /// Highest concept score of the prediction over the detector vocabulary.
    MaxConcept,
}

/// Caption-derived scene graph with per-node confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub graph: SceneGraph,
    /// Concept score of the matched prediction for each node's phrase.
    pub confidences: Vec<f64>,
    /// Query each node was grounded to.
    pub queries: Vec<usize>,
    /// Index into the input triplets for each edge.
    pub edge_sources: Vec<usize>,
}

impl PseudoLabel {
    pub fn is_empty(&self) -> bool {
        self.graph.edges.is_empty()
    }
}

/// Per-phrase grounding details, kept for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseMatch {
    pub phrase: String,
    pub query: usize,
    pub confidence: f64,
}

/// Matches each distinct phrase to one prediction.
///
/// Phrases are taken in order of first appearance; when there are more phrases than
/// predictions the surplus is left unmatched.
pub fn ground_phrases(
    triplets: &[CaptionTriplet],
    preds: &PredictionSet,
    concepts: &ConceptTable,
    score: ObjectScore,
) -> Result<Vec<PhraseMatch>, WeakError> {
    if preds.is_empty() {
        return Err(WeakError::NoPredictions);
    }
    let mut phrases: IndexMap<&str, Vec<f64>> = IndexMap::new();
    for t in triplets {
        for p in [t.subject.as_str(), t.object.as_str()] {
            if !phrases.contains_key(p) {
                phrases.insert(p, concepts.get_or_fixture(p).into_owned());
            }
        }
    }
    phrases.truncate(preds.len());
    if phrases.is_empty() {
        return Ok(Vec::new());
    }
    let embeddings: Vec<&[f64]> = phrases.values().map(Vec::as_slice).collect();
    let costs = CostMatrix::for_embeddings(&embeddings, preds, &MatchCost::category_only())?;
    let m = match_bipartite(&costs)?;
    phrases
        .iter()
        .zip(&m.assignment)
        .map(|((phrase, w), &q)| {
            Ok(PhraseMatch {
                phrase: phrase.to_string(),
                query: q,
                confidence: match score {
                    ObjectScore::MatchedPhrase => node_similarity(preds.features.row(q), w)?,
                    ObjectScore::MaxConcept => preds.objectness[q],
                },
            })
        })
        .collect()
}

/// Grounds caption triplets onto predictions.
///
/// A triplet survives when both endpoint confidences are strictly above `threshold`
/// and its endpoints land on different predictions.
pub fn ground_triplets(
    triplets: &[CaptionTriplet],
    preds: &PredictionSet,
    concepts: &ConceptTable,
    threshold: f64,
) -> Result<PseudoLabel, WeakError> {
    ground_triplets_with(triplets, preds, concepts, threshold, ObjectScore::MatchedPhrase)
}

pub fn ground_triplets_with(
    triplets: &[CaptionTriplet],
    preds: &PredictionSet,
    concepts: &ConceptTable,
    threshold: f64,
    score: ObjectScore,
) -> Result<PseudoLabel, WeakError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(WeakError::InvalidThreshold(threshold));
    }
    let matches = ground_phrases(triplets, preds, concepts, score)?;
    let lookup: IndexMap<&str, &PhraseMatch> = matches.iter().map(|m| (m.phrase.as_str(), m)).collect();
    let mut label = PseudoLabel {
        graph: SceneGraph::default(),
        confidences: Vec::new(),
        queries: Vec::new(),
        edge_sources: Vec::new(),
    };
    let mut node_of: IndexMap<usize, usize> = IndexMap::new();
    let mut seen = HashSet::new();
    for (i, t) in triplets.iter().enumerate() {
        let (Some(s), Some(o)) = (lookup.get(t.subject.as_str()), lookup.get(t.object.as_str())) else {
            continue;
        };
        if s.query == o.query || s.confidence <= threshold || o.confidence <= threshold {
            continue;
        }
        let mut node = |m: &PhraseMatch, label: &mut PseudoLabel| {
            *node_of.entry(m.query).or_insert_with(|| {
                label.graph.nodes.push(Node::new(preds.boxes[m.query], m.phrase.clone()));
                label.confidences.push(m.confidence);
                label.queries.push(m.query);
                label.graph.nodes.len() - 1
            })
        };
        let (si, oi) = (node(s, &mut label), node(o, &mut label));
        if seen.insert((si, oi, t.relation.clone())) {
            label.graph.edges.push(Edge::new(si, oi, t.relation.clone()));
            label.edge_sources.push(i);
        }
    }
    Ok(label)
}

/// Union of several captions' labels for one image, deduplicated by
/// `(subject concept, predicate, object concept)` and by node box and concept.
pub fn merge_labels(image_id: &str, labels: &[PseudoLabel]) -> PseudoLabel {
    let mut out = PseudoLabel {
        graph: SceneGraph::new(image_id),
        confidences: Vec::new(),
        queries: Vec::new(),
        edge_sources: Vec::new(),
    };
    let mut node_of: IndexMap<(usize, String), usize> = IndexMap::new();
    let mut seen = HashSet::new();
    for l in labels {
        let mut local = Vec::with_capacity(l.graph.nodes.len());
        for (n, node) in l.graph.nodes.iter().enumerate() {
            let key = (l.queries[n], node.concept.clone());
            let idx = *node_of.entry(key).or_insert_with(|| {
                out.graph.nodes.push(node.clone());
                out.confidences.push(l.confidences[n]);
                out.queries.push(l.queries[n]);
                out.graph.nodes.len() - 1
            });
            local.push(idx);
        }
        for (e, edge) in l.graph.edges.iter().enumerate() {
            let (s, o) = (local[edge.subject], local[edge.object]);
            if s != o && seen.insert((s, o, edge.predicate.clone())) {
                out.graph.edges.push(Edge::new(s, o, edge.predicate.clone()));
                out.edge_sources.push(l.edge_sources[e]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::match_bruteforce;
    use crate::numerics::Tensor;
    use crate::types::BBox;
    use proptest::prelude::*;

    fn triplet(s: &str, r: &str, o: &str) -> CaptionTriplet {
        CaptionTriplet {
            subject: s.into(),
            relation: r.into(),
            object: o.into(),
            subject_span: 0..0,
            relation_span: 0..0,
            object_span: 0..0,
        }
    }

    /// Predictions whose features are scaled concept embeddings.
    fn preds_from(table: &ConceptTable, rows: &[(&str, f64)]) -> PredictionSet {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|(name, scale)| table.get(name).unwrap().iter().map(|x| x * scale).collect())
            .collect();
        preds_with(table.dim(), rows)
    }

    fn preds_with(d: usize, rows: Vec<Vec<f64>>) -> PredictionSet {
        let k = rows.len();
        let features = Tensor::new(vec![k, d], rows.concat()).unwrap();
        PredictionSet {
            boxes: (0..k)
                .map(|i| BBox::new(0.1 + 0.1 * i as f64, 0.5, 0.1, 0.1).unwrap())
                .collect(),
            logits: Tensor::zeros(&[k, 1]),
            scores: Tensor::zeros(&[k, 1]),
            objectness: vec![0.0; k],
            tokens: (0..k).collect(),
            features,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn table() -> ConceptTable {
        ConceptTable::fixture(&["man", "horse", "dog"], 16).unwrap()
    }

    #[test]
    fn high_scores_kept() {
        let t = table();
        let preds = preds_from(&t, &[("man", logit(0.9)), ("horse", logit(0.9))]);
        let label = ground_triplets(&[triplet("man", "riding", "horse")], &preds, &t, 0.25).unwrap();
        assert_eq!(label.graph.edges, vec![Edge::new(0, 1, "riding")]);
        assert_eq!(label.graph.nodes[1].bbox, preds.boxes[1]);
        for c in &label.confidences {
            assert!((c - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_threshold_dropped() {
        let t = table();
        // Unit-norm embeddings make ⟨w, s·w⟩ = s, so the score is σ(logit(0.25)) = 0.25.
        let preds = preds_from(&t, &[("man", logit(0.25)), ("horse", logit(0.9))]);
        let conf = node_similarity(preds.features.row(0), t.get("man").unwrap()).unwrap();
        let label = ground_triplets(&[triplet("man", "riding", "horse")], &preds, &t, conf).unwrap();
        assert!(label.is_empty());
        let label = ground_triplets(&[triplet("man", "riding", "horse")], &preds, &t, conf - 1e-9).unwrap();
        assert_eq!(label.graph.edges.len(), 1);
    }

    #[test]
    fn crossed_similarities_match_bruteforce() {
        let t = table();
        let preds = preds_from(&t, &[("horse", 3.0), ("man", 3.0)]);
        let ts = [triplet("man", "riding", "horse")];
        let matches = ground_phrases(&ts, &preds, &t, ObjectScore::MatchedPhrase).unwrap();
        let emb: Vec<&[f64]> = ["man", "horse"].iter().map(|n| t.get(n).unwrap()).collect();
        let cm = CostMatrix::for_embeddings(&emb, &preds, &MatchCost::category_only()).unwrap();
        let brute = match_bruteforce(&cm).unwrap();
        assert_eq!(matches.iter().map(|m| m.query).collect::<Vec<_>>(), brute.assignment);
        assert_eq!(brute.assignment, vec![1, 0]);
    }

    #[test]
    fn no_predictions_is_error() {
        let t = table();
        let preds = preds_from(&t, &[]);
        assert!(matches!(
            ground_triplets(&[triplet("man", "on", "horse")], &preds, &t, 0.25),
            Err(WeakError::NoPredictions)
        ));
    }

    #[test]
    fn unknown_phrase_uses_fixture_embedding() {
        let t = table();
        let zebra = crate::concept::fixture_embedding("zebra", 16);
        let man: Vec<f64> = t.get("man").unwrap().iter().map(|x| 4.0 * x).collect();
        let preds = preds_with(16, vec![man, zebra.iter().map(|x| 4.0 * x).collect()]);
        let label = ground_triplets(&[triplet("man", "near", "zebra")], &preds, &t, 0.25).unwrap();
        assert_eq!(label.queries, vec![0, 1]);
        assert_eq!(label.graph.nodes[1].concept, "zebra");
    }

    #[test]
    fn merge_deduplicates() {
        let t = table();
        let preds = preds_from(&t, &[("man", 4.0), ("horse", 4.0), ("dog", 4.0)]);
        let a = ground_triplets(&[triplet("man", "riding", "horse")], &preds, &t, 0.25).unwrap();
        let b = ground_triplets(
            &[triplet("man", "riding", "horse"), triplet("dog", "near", "horse")],
            &preds,
            &t,
            0.25,
        )
        .unwrap();
        let m = merge_labels("img", &[a, b]);
        assert_eq!(m.graph.nodes.len(), 3);
        assert_eq!(m.graph.edges.len(), 2);
        assert_eq!(m.graph.image_id, "img");
    }

    proptest! {
        #[test]
        fn gate_and_monotonicity(scales in proptest::collection::vec(-3.0f64..3.0, 3), lo in 0.0f64..0.9, hi in 0.0f64..0.9) {
            let t = table();
            let names = ["man", "horse", "dog"];
            let rows: Vec<(&str, f64)> = names.iter().copied().zip(scales).collect();
            let preds = preds_from(&t, &rows);
            let ts = [triplet("man", "riding", "horse"), triplet("dog", "near", "man"), triplet("horse", "on", "dog")];
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let low = ground_triplets(&ts, &preds, &t, lo).unwrap();
            let high = ground_triplets(&ts, &preds, &t, hi).unwrap();
            for c in &high.confidences {
                prop_assert!(*c > hi);
            }
            let low_set: HashSet<usize> = low.edge_sources.iter().copied().collect();
            for s in &high.edge_sources {
                prop_assert!(low_set.contains(s));
            }
            let q: HashSet<usize> = low.queries.iter().copied().collect();
            prop_assert_eq!(q.len(), low.queries.len());
        }
    }
}
