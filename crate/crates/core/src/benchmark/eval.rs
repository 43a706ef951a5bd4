use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{PredictedTriplet, PredictionRecord};
use crate::types::{Dataset, SceneGraph, Vocabulary};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
pub const DEFAULT_IOU: f64 = 0.5;

/// Disjoint groups of ground-truth triplets by novelty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    All,
    Base,
    NovelObject,
    NovelRelation,
    NovelBoth,
}

impl Slice {
    pub const PARTS: [Slice; 4] = [Slice::Base, Slice::NovelObject, Slice::NovelRelation, Slice::NovelBoth];

    pub fn as_str(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::Base => "base",
            Slice::NovelObject => "novel_object",
            Slice::NovelRelation => "novel_relation",
            Slice::NovelBoth => "novel_both",
        }
    }

    pub fn parse(s: &str) -> Option<Slice> {
        let norm = s.replace('-', "_");
        [Slice::All, Slice::Base, Slice::NovelObject, Slice::NovelRelation, Slice::NovelBoth]
            .into_iter()
            .find(|x| x.as_str() == norm)
    }

    /// Part of the partition a triplet falls into.
    pub fn of(vocab: &Vocabulary, subject: &str, predicate: &str, object: &str) -> Slice {
        let obj = vocab.is_novel_object(subject) || vocab.is_novel_object(object);
        match (obj, vocab.is_novel_relation(predicate)) {
            (false, false) => Slice::Base,
            (true, false) => Slice::NovelObject,
            (false, true) => Slice::NovelRelation,
            (true, true) => Slice::NovelBoth,
        }
    }

    fn contains(self, part: Slice) -> bool {
        self == Slice::All || self == part
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
    /// Recorded in the report; the constraint itself is applied when predicting.
    pub graph_constraint: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            iou_threshold: DEFAULT_IOU,
            graph_constraint: true,
        }
    }
}

/// A ground-truth triplet credited to a ranked prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedTriplet {
    pub image_id: String,
    pub k: usize,
    pub gt_edge: usize,
    pub pred_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecall {
    pub image_id: String,
    /// Ground-truth triplets per slice.
    pub totals: BTreeMap<Slice, usize>,
    /// Recalled triplets per K, then per slice.
    pub hits: BTreeMap<usize, BTreeMap<Slice, usize>>,
    pub missing: bool,
}

impl ImageRecall {
    pub fn recall(&self, k: usize, slice: Slice) -> Option<f64> {
        let total = *self.totals.get(&slice)?;
        (total > 0).then(|| self.hits[&k][&slice] as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecall {
    /// Mean over images with at least one triplet in the slice; `None` when there are none.
    pub recall: Option<f64>,
    /// Recalled triplets over all triplets in the slice.
    pub pooled: Option<f64>,
    pub recalled: usize,
    pub total: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub graph_constraint: bool,
    pub ks: Vec<usize>,
    pub recall: BTreeMap<usize, BTreeMap<Slice, SliceRecall>>,
    pub per_image: Vec<ImageRecall>,
    pub matches: Vec<MatchedTriplet>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, k: usize, slice: Slice) -> Option<f64> {
        self.recall.get(&k)?.get(&slice)?.recall
    }

    /// Per-image recall table, one row per image and a column per K for the "all" slice.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id");
        for k in &self.ks {
            let _ = write!(out, ",recall@{k}");
        }
        out.push('\n');
        for img in &self.per_image {
            out.push_str(&img.image_id);
            for k in &self.ks {
                match img.recall(*k, Slice::All) {
                    Some(r) => {
                        let _ = write!(out, ",{r}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn triplet_matches(p: &PredictedTriplet, g: &SceneGraph, edge: usize, iou: f64) -> bool {
    let e = &g.edges[edge];
    let (s, o) = (&g.nodes[e.subject], &g.nodes[e.object]);
    p.predicate == e.predicate
        && p.s_name == s.concept
        && p.o_name == o.concept
        && p.s_box.iou(&s.bbox) >= iou
        && p.o_box.iou(&o.bbox) >= iou
}

/// Greedy SGDET matching for one image: ground truths in order, each taking the best
/// ranked unused prediction among the top `k`. Returns `(gt edge, pred rank)` pairs.
pub fn match_image(preds: &[PredictedTriplet], gt: &SceneGraph, k: usize, iou: f64) -> Vec<(usize, usize)> {
    let top = &preds[..k.min(preds.len())];
    let mut used = vec![false; top.len()];
    let mut out = Vec::new();
    for edge in 0..gt.edges.len() {
        if let Some(rank) = (0..top.len()).find(|&r| !used[r] && triplet_matches(&top[r], gt, edge, iou)) {
            used[rank] = true;
            out.push((edge, rank));
        }
    }
    out
}

fn rank(triplets: &[PredictedTriplet]) -> Vec<PredictedTriplet> {
    let mut t = triplets.to_vec();
    // Stable: equal scores keep dump order.
    t.sort_by(|a, b| b.score.total_cmp(&a.score));
    t
}

fn image_recall(
    image_id: &str,
    graph: &SceneGraph,
    vocab: &Vocabulary,
    preds: Option<&[PredictedTriplet]>,
    cfg: &EvalConfig,
) -> (ImageRecall, Vec<MatchedTriplet>) {
    let parts: Vec<Slice> = graph
        .edges
        .iter()
        .map(|e| {
            Slice::of(
                vocab,
                &graph.nodes[e.subject].concept,
                &e.predicate,
                &graph.nodes[e.object].concept,
            )
        })
        .collect();
    let all_slices = [Slice::All, Slice::Base, Slice::NovelObject, Slice::NovelRelation, Slice::NovelBoth];
    let totals: BTreeMap<Slice, usize> = all_slices
        .iter()
        .map(|&s| (s, parts.iter().filter(|&&p| s.contains(p)).count()))
        .collect();
    let ranked = preds.map(rank).unwrap_or_default();
    let mut hits = BTreeMap::new();
    let mut log = Vec::new();
    for &k in &cfg.ks {
        let matched = match_image(&ranked, graph, k, cfg.iou_threshold);
        let per: BTreeMap<Slice, usize> = all_slices
            .iter()
            .map(|&s| (s, matched.iter().filter(|(e, _)| s.contains(parts[*e])).count()))
            .collect();
        hits.insert(k, per);
        log.extend(matched.into_iter().map(|(gt_edge, pred_rank)| MatchedTriplet {
            image_id: image_id.to_string(),
            k,
            gt_edge,
            pred_rank,
        }));
    }
    (
        ImageRecall {
            image_id: image_id.to_string(),
            totals,
            hits,
            missing: preds.is_none(),
        },
        log,
    )
}

/// SGDET Recall@K over an evaluation dataset, meaned over images.
///
/// Images without predictions count as zero recall; empty slices report `None`.
pub fn evaluate_sgdet(preds: &[PredictionRecord], gts: &Dataset, cfg: &EvalConfig) -> EvalReport {
    let by_id: HashMap<&str, &[PredictedTriplet]> =
        preds.iter().map(|p| (p.image_id.as_str(), p.triplets.as_slice())).collect();
    let results: Vec<(ImageRecall, Vec<MatchedTriplet>)> = gts
        .records
        .par_iter()
        .map(|r| image_recall(&r.image_id, &r.graph, &gts.vocabulary, by_id.get(r.image_id.as_str()).copied(), cfg))
        .collect();

    let mut warnings = Vec::new();
    let missing: Vec<&str> = results.iter().filter(|r| r.0.missing).map(|r| r.0.image_id.as_str()).collect();
    if !missing.is_empty() {
        let msg = format!("{} evaluation images have no predictions and count as zero recall", missing.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut recall = BTreeMap::new();
    for &k in &cfg.ks {
        let mut per = BTreeMap::new();
        for slice in [Slice::All, Slice::Base, Slice::NovelObject, Slice::NovelRelation, Slice::NovelBoth] {
            let mut sum = 0.0;
            let (mut images, mut recalled, mut total) = (0, 0, 0);
            for (img, _) in &results {
                if let Some(r) = img.recall(k, slice) {
                    sum += r;
                    images += 1;
                    recalled += img.hits[&k][&slice];
                    total += img.totals[&slice];
                }
            }
            if images == 0 && k == cfg.ks[0] {
                let msg = format!("slice {} is empty; recall not applicable", slice.as_str());
                log::warn!("{msg}");
                warnings.push(msg);
            }
            per.insert(
                slice,
                SliceRecall {
                    recall: (images > 0).then(|| sum / images as f64),
                    pooled: (total > 0).then(|| recalled as f64 / total as f64),
                    recalled,
                    total,
                    images,
                },
            );
        }
        recall.insert(k, per);
    }
    let (per_image, logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    EvalReport {
        iou_threshold: cfg.iou_threshold,
        graph_constraint: cfg.graph_constraint,
        ks: cfg.ks.clone(),
        recall,
        per_image,
        matches: logs.into_iter().flatten().collect(),
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, Edge, Node, Record};
    use proptest::prelude::*;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.5, 0.1, 0.2).unwrap()
    }

    fn trip(s: (f64, &str), p: &str, o: (f64, &str), score: f64) -> PredictedTriplet {
        PredictedTriplet {
            s_box: bx(s.0),
            o_box: bx(o.0),
            s_name: s.1.into(),
            o_name: o.1.into(),
            predicate: p.into(),
            score,
            subject: 0,
            object: 0,
        }
    }

    fn dataset(graphs: Vec<SceneGraph>, vocab: Vocabulary) -> Dataset {
        let records = graphs
            .into_iter()
            .enumerate()
            .map(|(i, g)| Record {
                image_id: g.image_id.clone(),
                features: format!("f.bin:{i}"),
                graph: g,
                caption: None,
                provenance: None,
            })
            .collect();
        Dataset::new(vocab, records).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["man".into(), "horse".into(), "hat".into()],
            vec!["riding".into(), "wearing".into()],
            vec![true, true, false],
            vec![true, false],
        )
        .unwrap()
    }

    fn scene() -> SceneGraph {
        let mut g = SceneGraph::new("a");
        g.nodes = vec![Node::new(bx(0.2), "man"), Node::new(bx(0.5), "horse"), Node::new(bx(0.8), "hat")];
        g.edges = vec![Edge::new(0, 1, "riding"), Edge::new(0, 2, "wearing")];
        g
    }

    #[test]
    fn perfect_predictions() {
        let preds = vec![PredictionRecord {
            image_id: "a".into(),
            triplets: vec![
                trip((0.2, "man"), "riding", (0.5, "horse"), 0.9),
                trip((0.2, "man"), "wearing", (0.8, "hat"), 0.8),
            ],
        }];
        let rep = evaluate_sgdet(&preds, &dataset(vec![scene()], vocab()), &EvalConfig::default());
        for k in DEFAULT_KS {
            assert_eq!(rep.get(k, Slice::All), Some(1.0));
        }
        assert_eq!(rep.get(20, Slice::NovelBoth), Some(1.0));
        assert_eq!(rep.get(20, Slice::NovelObject), None);
        assert!(rep.warnings.iter().any(|w| w.contains("novel_object")));
    }

    #[test]
    fn half_recall_and_missing_images() {
        let mut preds: Vec<PredictedTriplet> = (0..30)
            .map(|i| trip((0.2, "man"), "riding", (0.2, "man"), 1.0 - i as f64 * 0.01))
            .collect();
        preds[5] = trip((0.2, "man"), "riding", (0.5, "horse"), preds[5].score);
        let mut other = scene();
        other.image_id = "b".into();
        let ds = dataset(vec![scene(), other], vocab());
        let rep = evaluate_sgdet(
            &[PredictionRecord {
                image_id: "a".into(),
                triplets: preds,
            }],
            &ds,
            &EvalConfig::default(),
        );
        assert_eq!(rep.per_image[0].recall(20, Slice::All), Some(0.5));
        assert_eq!(rep.per_image[1].recall(20, Slice::All), Some(0.0));
        assert!(rep.per_image[1].missing);
        assert_eq!(rep.get(20, Slice::All), Some(0.25));
    }

    #[test]
    fn prediction_credited_once() {
        let mut g = scene();
        g.edges = vec![Edge::new(0, 1, "riding"), Edge::new(0, 1, "riding")];
        // Two identical gt triplets (distinct edges after dedup would not exist, so
        // build the graph by hand) and one prediction.
        let preds = [trip((0.2, "man"), "riding", (0.5, "horse"), 0.9)];
        assert_eq!(match_image(&preds, &g, 20, 0.5), vec![(0, 0)]);
    }

    #[test]
    fn csv_has_one_row_per_image() {
        let rep = evaluate_sgdet(&[], &dataset(vec![scene()], vocab()), &EvalConfig::default());
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("image_id,recall@20,recall@50,recall@100"));
    }

    fn random_case(seed: u64) -> (Vec<PredictedTriplet>, SceneGraph) {
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        let mut next = move |m: usize| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % m as u64) as usize
        };
        let names = ["man", "horse", "hat"];
        let preds_n = ["riding", "wearing"];
        let xs = [0.2, 0.21, 0.5, 0.8];
        let mut g = SceneGraph::new("a");
        for _ in 0..4 {
            g.nodes.push(Node::new(bx(xs[next(4)]), names[next(3)]));
        }
        for _ in 0..6 {
            let (a, b) = (next(4), next(4));
            if a != b {
                g.edges.push(Edge::new(a, b, preds_n[next(2)]));
            }
        }
        let preds = (0..next(120))
            .map(|_| trip((xs[next(4)], names[next(3)]), preds_n[next(2)], (xs[next(4)], names[next(3)]), next(1000) as f64))
            .collect();
        (preds, g)
    }

    proptest! {
        #[test]
        fn k_monotone_and_slices_pool(seed in any::<u64>()) {
            let (preds, g) = random_case(seed);
            let ds = dataset(vec![g], vocab());
            let rep = evaluate_sgdet(&[PredictionRecord { image_id: "a".into(), triplets: preds }], &ds, &EvalConfig::default());
            let img = &rep.per_image[0];
            if let (Some(a), Some(b), Some(c)) = (img.recall(20, Slice::All), img.recall(50, Slice::All), img.recall(100, Slice::All)) {
                prop_assert!(a <= b && b <= c);
            }
            for k in DEFAULT_KS {
                let all = &rep.recall[&k][&Slice::All];
                let parts: usize = Slice::PARTS.iter().map(|s| rep.recall[&k][s].recalled).sum();
                let totals: usize = Slice::PARTS.iter().map(|s| rep.recall[&k][s].total).sum();
                prop_assert_eq!(all.recalled, parts);
                prop_assert_eq!(all.total, totals);
            }
            let mut used = std::collections::HashSet::new();
            for m in rep.matches.iter().filter(|m| m.k == 100) {
                prop_assert!(used.insert(m.pred_rank));
            }
        }
    }
}
