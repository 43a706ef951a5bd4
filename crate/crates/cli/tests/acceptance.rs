//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero on failure.
//!
//! Run a subset with `cargo test --test acceptance -- A3 A5`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ovsg_core::benchmark::{
    build_split, evaluate_sgdet, generate_synthetic, split_leaks, EvalConfig, Setting, Slice, SplitSpec, SynthData,
    SynthSpec,
};
use ovsg_core::concept::ConceptTable;
use ovsg_core::losses::{
    box_losses_graph, distill_loss_graph, focal_loss_graph, relation_bce_graph, total_loss_graph, LossConfig, LossError,
    LossTerms, RelationTargets, SampleSets,
};
use ovsg_core::matching::{match_bipartite, match_bruteforce, CostMatrix};
use ovsg_core::model::{
    decode_nodes, edge_features, predict_scene_graph, FeatureMap, ModelConfig, PredictedTriplet, PredictionRecord,
    PredictionSet, SceneGraphModel,
};
use ovsg_core::numerics::{finite_diff_check, Graph, NumericsError, ParamStore, Tensor};
use ovsg_core::train::{finetune, predict_dataset, pretrain, Checkpoint, TrainConfig};
use ovsg_core::types::{BBox, Dataset, Edge, Node, Record, SceneGraph, Vocabulary};
use ovsg_core::weak::{ground_triplets, parse_caption, Lexicon};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn synth_maps(data: &SynthData) -> Vec<FeatureMap> {
    (0..data.features.len()).map(|i| data.features.get(i).unwrap().clone()).collect()
}

fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    // Sum of uniforms is close enough to Gaussian for test inputs.
    (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * scale * 0.866
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
        rng.random_range(0.05..0.45),
        rng.random_range(0.05..0.45),
    )
    .unwrap()
}

fn loss_err(e: LossError) -> NumericsError {
    match e {
        LossError::Numerics(n) => n,
        other => NumericsError::Shape(other.to_string()),
    }
}

// ---------------------------------------------------------------------------------------
// A1

struct GradCase {
    store: ParamStore,
    focal_targets: Tensor,
    alpha: f64,
    gamma: f64,
    gt_boxes: Tensor,
    rel_targets: RelationTargets,
    samples: SampleSets,
    teacher: Tensor,
    distill_rows: Vec<usize>,
    cfg: LossConfig,
}

fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (k, c) = (rng.random_range(1..=4usize), rng.random_range(1..=5usize));
    let logits: Vec<f64> = (0..k * c).map(|_| normal(&mut rng, 2.0)).collect();
    store.insert("logits", Tensor::new(vec![k, c], logits).unwrap(), true).unwrap();
    let focal_targets = Tensor::new(vec![k, c], (0..k * c).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect()).unwrap();

    let n = rng.random_range(1..=4usize);
    let raw: Vec<f64> = (0..n * 4).map(|_| normal(&mut rng, 1.0)).collect();
    store.insert("boxes", Tensor::new(vec![n, 4], raw).unwrap(), true).unwrap();
    let gt_boxes = Tensor::new(vec![n, 4], (0..n).flat_map(|_| random_box(&mut rng).to_array()).collect()).unwrap();

    let (e, p) = (rng.random_range(1..=4usize), rng.random_range(1..=5usize));
    store.insert("edge_logits", Tensor::new(vec![e, p], (0..e * p).map(|_| normal(&mut rng, 2.0)).collect()).unwrap(), true).unwrap();
    let rows: Vec<Vec<f64>> = (0..e).map(|_| (0..p).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect()).collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            if t == 1.0 {
                pos.push((i, j));
            } else if rng.random_bool(0.7) {
                neg.push((i, j));
            }
        }
    }
    if pos.is_empty() && neg.is_empty() {
        neg.push((0, 0));
    }
    let rel_targets = RelationTargets::from_rows(rows).unwrap();

    let d = rng.random_range(1..=6usize);
    store.insert("student", Tensor::new(vec![e, d], (0..e * d).map(|_| normal(&mut rng, 1.0)).collect()).unwrap(), true).unwrap();
    let teacher = Tensor::new(vec![e, d], (0..e * d).map(|_| normal(&mut rng, 1.0)).collect()).unwrap();
    let mut distill_rows: Vec<usize> = (0..e).filter(|_| rng.random_bool(0.6)).collect();
    if distill_rows.is_empty() {
        distill_rows.push(rng.random_range(0..e));
    }
    let cfg = LossConfig {
        lambda: rng.random_range(0.0..1.0),
        focal_alpha: rng.random_range(0.0..1.0),
        focal_gamma: rng.random_range(0.0..3.0),
        focal_weight: rng.random_range(0.1..3.0),
        l1_weight: rng.random_range(0.1..6.0),
        giou_weight: rng.random_range(0.1..3.0),
        ..LossConfig::default()
    };
    GradCase {
        store,
        focal_targets,
        alpha: rng.random_range(0.0..1.0),
        gamma: rng.random_range(0.0..3.0),
        gt_boxes,
        rel_targets,
        samples: SampleSets::new(pos, neg),
        teacher,
        distill_rows,
        cfg,
    }
}

fn a1_gradients() -> Check {
    let mut worst: BTreeMap<&str, (f64, u64, Option<(f64, f64)>)> = BTreeMap::new();
    let (mut failing, mut max_abs) = (0, 0.0f64);
    for seed in 0..100 {
        let c = grad_case(seed);
        let checks: [(&str, Box<dyn Fn(&mut Graph) -> Result<_, LossError>>); 6] = [
            ("focal", Box::new(|g| {
                let x = g.param("logits")?;
                focal_loss_graph(g, x, &c.focal_targets, c.alpha, c.gamma)
            })),
            ("box_l1", Box::new(|g| {
                let raw = g.param("boxes")?;
                let b = g.sigmoid(raw)?;
                Ok(box_losses_graph(g, b, &c.gt_boxes)?.0)
            })),
            ("box_giou", Box::new(|g| {
                let raw = g.param("boxes")?;
                let b = g.sigmoid(raw)?;
                Ok(box_losses_graph(g, b, &c.gt_boxes)?.1)
            })),
            ("relation_bce", Box::new(|g| {
                let x = g.param("edge_logits")?;
                relation_bce_graph(g, x, &c.rel_targets, &c.samples)
            })),
            ("distill", Box::new(|g| {
                let s = g.param("student")?;
                distill_loss_graph(g, s, &c.teacher, &c.distill_rows)
            })),
            ("total", Box::new(|g| {
                let x = g.param("logits")?;
                let focal = focal_loss_graph(g, x, &c.focal_targets, c.cfg.focal_alpha, c.cfg.focal_gamma)?;
                let raw = g.param("boxes")?;
                let b = g.sigmoid(raw)?;
                let (l1, giou) = box_losses_graph(g, b, &c.gt_boxes)?;
                let e = g.param("edge_logits")?;
                let bce = relation_bce_graph(g, e, &c.rel_targets, &c.samples)?;
                let s = g.param("student")?;
                let distill = distill_loss_graph(g, s, &c.teacher, &c.distill_rows)?;
                let terms = LossTerms {
                    node_focal: Some(focal),
                    box_l1: Some(l1),
                    box_giou: Some(giou),
                    rel_bce: Some(bce),
                    distill: Some(distill),
                };
                Ok(total_loss_graph(g, &terms, &c.cfg)?.0)
            })),
        ];
        for (name, f) in &checks {
            let r = finite_diff_check(&c.store, |g| f(g).map_err(loss_err), 1e-5)
                .map_err(|e| format!("seed {seed} {name}: {e}"))?;
            max_abs = max_abs.max(r.max_absolute_error);
            if r.max_relative_error >= 1e-4 {
                failing += 1;
            }
            let w = worst.entry(name).or_insert((0.0, seed, None));
            if r.max_relative_error > w.0 {
                *w = (r.max_relative_error, seed, r.worst_values);
            }
        }
    }
    let max = worst.values().map(|w| w.0).fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, w)| format!("{k} {:.1e}", w.0)).collect::<Vec<_>>().join(", ");
    let offenders = worst
        .iter()
        .filter(|(_, w)| w.0 >= 1e-4)
        .map(|(k, (_, seed, v))| match v {
            Some((a, n)) => format!("{k} seed {seed}: analytic {a:.3e}, numeric {n:.3e}"),
            None => format!("{k} seed {seed}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    ensure(max < 1e-4, || {
        format!(
            "max relative error {max:.2e} ({detail}); {failing} of 600 checks over 1e-4, largest absolute error {max_abs:.1e}; worst entries {offenders}"
        )
    })?;
    Ok(format!("100 configs, max relative error {max:.1e} ({detail}), largest absolute error {max_abs:.1e}"))
}

// ---------------------------------------------------------------------------------------
// A2

/// Minimum over every injection of rows into columns, computed by plain recursion.
fn min_injection(costs: &[f64], rows: usize, cols: usize, row: usize, used: &mut Vec<bool>) -> f64 {
    if row == rows {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for c in 0..cols {
        if !used[c] {
            used[c] = true;
            best = best.min(costs[row * cols + c] + min_injection(costs, rows, cols, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn a2_matching() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..200 {
        let k = rng.random_range(1..=7usize);
        let n = rng.random_range(1..=k);
        // A quarter of the instances use small integers so ties are common.
        let integer = i % 4 == 0;
        let costs: Vec<f64> = (0..n * k)
            .map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..10.0) })
            .collect();
        let m = CostMatrix::from_costs(n, k, costs.clone()).unwrap();
        let fast = match_bipartite(&m).map_err(|e| e.to_string())?;
        let slow = match_bruteforce(&m).map_err(|e| e.to_string())?;
        ensure(fast.total_cost == slow.total_cost, || {
            format!("instance {i} ({n}x{k}): bipartite {} vs brute force {}", fast.total_cost, slow.total_cost)
        })?;
        let cols: BTreeSet<usize> = fast.assignment.iter().copied().collect();
        ensure(cols.len() == n && fast.assignment.iter().all(|&c| c < k), || format!("instance {i}: not injective"))?;
        let oracle = min_injection(&costs, n, k, 0, &mut vec![false; k]);
        ensure((fast.total_cost - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), || {
            format!("instance {i}: {} vs recursive minimum {oracle}", fast.total_cost)
        })?;
    }
    Ok("200 instances, bipartite total equals brute force exactly".into())
}

// ---------------------------------------------------------------------------------------
// A3

fn a3_overfit() -> Check {
    let data = generate_synthetic(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let maps = synth_maps(&data);
    let model = ModelConfig { relation_hidden: 64, ..ModelConfig::default() };
    let mut cfg = TrainConfig { steps: 2000, log_every: 0, ..TrainConfig::default() };
    cfg.loss.lambda = 0.0;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let out = pool
        .install(|| finetune(&data.dataset, &maps, None, &model, &cfg, |_| {}))
        .map_err(|e| e.to_string())?;
    let concepts = out.student.concepts_for(&data.dataset.vocabulary).map_err(|e| e.to_string())?;
    let preds = predict_dataset(&out.student, &data.dataset, &maps, &concepts).map_err(|e| e.to_string())?;
    let report = evaluate_sgdet(&preds, &data.dataset, &EvalConfig::default());
    let r50 = report.get(50, Slice::All).unwrap_or(0.0);
    let r20 = report.get(20, Slice::All).unwrap_or(0.0);
    ensure(r50 >= 0.8, || format!("R@50 {r50:.3} < 0.8"))?;
    Ok(format!("{} steps on one thread, R@20 {r20:.3}, R@50 {r50:.3}", cfg.steps))
}

// ---------------------------------------------------------------------------------------
// A4

fn a4_synonyms() -> Check {
    let data = generate_synthetic(&SynthSpec { scenes: 6, ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let maps = synth_maps(&data);
    let model = SceneGraphModel::new(ModelConfig { relation_hidden: 32, ..ModelConfig::default() }).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let vocab = &data.dataset.vocabulary;
    let names: Vec<String> = vocab.object_names().iter().chain(vocab.relation_names()).cloned().collect();
    let table = ConceptTable::fixture(&names, model.config().node_dim).unwrap();
    let predict = |v: &Vocabulary, t: &ConceptTable| -> Vec<Vec<PredictedTriplet>> {
        maps.iter().map(|fm| predict_scene_graph(&model, &params, fm, v, t).unwrap()).collect()
    };
    let reference = predict(vocab, &table);
    ensure(reference.iter().any(|r| !r.is_empty()), || "no triplets predicted".into())?;
    for name in &names {
        let alias = format!("{name} (alias)");
        let aliased = table.clone().with_alias(&alias, name).map_err(|e| e.to_string())?;
        let renamed = vocab.rename(name, &alias).map_err(|e| e.to_string())?;
        let got = predict(&renamed, &aliased);
        let back = |s: &String| if *s == alias { name.clone() } else { s.clone() };
        for (img, (a, b)) in reference.iter().zip(&got).enumerate() {
            let restored: Vec<PredictedTriplet> = b
                .iter()
                .map(|t| PredictedTriplet {
                    s_name: back(&t.s_name),
                    o_name: back(&t.o_name),
                    predicate: back(&t.predicate),
                    ..t.clone()
                })
                .collect();
            ensure(*a == restored, || format!("renaming {name:?} changed image {img}"))?;
            ensure(b.iter().any(|t| t.s_name == alias || t.o_name == alias || t.predicate == alias) == a.iter().any(|t| t.s_name == *name || t.o_name == *name || t.predicate == *name), || {
                format!("alias {alias:?} not displayed")
            })?;
        }
    }
    Ok(format!("{} names aliased, ranked lists identical on {} images", names.len(), maps.len()))
}

// ---------------------------------------------------------------------------------------
// A5

fn novel_recall(ck: &Checkpoint, ds: &Dataset, maps: &[FeatureMap]) -> Result<f64, String> {
    let concepts = ck.concepts_for(&ds.vocabulary).map_err(|e| e.to_string())?;
    let preds = predict_dataset(ck, ds, maps, &concepts).map_err(|e| e.to_string())?;
    let report = evaluate_sgdet(&preds, ds, &EvalConfig::default());
    report.get(50, Slice::NovelRelation).ok_or_else(|| "novel relation slice is empty".to_string())
}

fn a5_retention() -> Check {
    let data = generate_synthetic(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let maps = synth_maps(&data);
    let model = ModelConfig { relation_hidden: 64, ..ModelConfig::default() };
    let cfg = TrainConfig { steps: 1000, detector_steps: 300, log_every: 0, ..TrainConfig::default() };
    let pre = pretrain(&data.dataset, &maps, &model, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let hidden = (data.dataset.vocabulary.relation_names().len() as f64 / 3.0).round() as usize;
    let split = build_split(&data.dataset, &SplitSpec { novel_relations: Some(hidden), ..SplitSpec::new(Setting::Ovr, 0) })
        .map_err(|e| e.to_string())?;
    let train_maps: Vec<FeatureMap> = split
        .train
        .records
        .iter()
        .map(|r| maps[data.dataset.records.iter().position(|x| x.image_id == r.image_id).unwrap()].clone())
        .collect();
    let before = novel_recall(&pre.teacher, &split.eval, &maps)?;
    let mut after = Vec::new();
    for lambda in [0.0, 0.1] {
        let mut c = cfg.clone();
        c.loss.lambda = lambda;
        let out = finetune(&split.train, &train_maps, Some(&pre.teacher), &model, &c, |_| {}).map_err(|e| e.to_string())?;
        after.push(novel_recall(&out.student, &split.eval, &maps)?);
    }
    let (plain, kept) = (after[0], after[1]);
    let detail = format!(
        "novel {:?} R@50: teacher {before:.3}, lambda=0 {plain:.3}, lambda=0.1 {kept:.3}",
        split.manifest.novel_relations
    );
    ensure(kept > 0.0 && kept >= 2.0 * plain, || format!("{detail}: lambda=0.1 is not 2x lambda=0"))?;
    ensure(plain < 0.5 * before, || format!("{detail}: lambda=0 did not fall below half the teacher"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------------------
// A6

fn a6_gate() -> Check {
    let objects = ["man", "horse", "dog", "table", "cup", "kite", "tree", "car"];
    let relations = ["riding", "on", "near", "under", "next to"];
    let lexicon = Lexicon::new(&objects, &relations);
    let dim = 16;
    let table = ConceptTable::fixture(&objects, dim).unwrap();
    let thresholds = [0.0, 0.1, 0.25, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut kept_total, mut dropped_total) = (0, 0);
    for run in 0..300 {
        let clauses: Vec<String> = (0..rng.random_range(1..=4))
            .map(|_| {
                let s = objects[rng.random_range(0..objects.len())];
                let o = objects[rng.random_range(0..objects.len())];
                format!("a {s} {} the {o}", relations[rng.random_range(0..relations.len())])
            })
            .collect();
        let triplets = parse_caption(&clauses.join(", "), &lexicon);
        let k = rng.random_range(1..=8usize);
        let scale = rng.random_range(0.2..3.0);
        let features: Vec<f64> = (0..k * dim).map(|_| normal(&mut rng, scale)).collect();
        let preds = PredictionSet {
            features: Tensor::new(vec![k, dim], features).unwrap(),
            boxes: (0..k).map(|_| random_box(&mut rng)).collect(),
            logits: Tensor::zeros(&[k, 1]),
            scores: Tensor::zeros(&[k, 1]),
            objectness: vec![0.0; k],
            tokens: (0..k).collect(),
        };
        let mut previous: Option<BTreeSet<usize>> = None;
        for &t in &thresholds {
            let label = ground_triplets(&triplets, &preds, &table, t).map_err(|e| e.to_string())?;
            for (node, &c) in label.graph.nodes.iter().zip(&label.confidences) {
                ensure(c > t, || format!("run {run}: node {:?} kept with confidence {c} at threshold {t}", node.concept))?;
            }
            let kept: BTreeSet<usize> = label.edge_sources.iter().copied().collect();
            if t == 0.25 {
                ensure(label.confidences.iter().all(|&c| c > 0.25), || format!("run {run}: confidence at or below 0.25"))?;
                kept_total += kept.len();
                dropped_total += triplets.len() - kept.len();
            }
            if let Some(lower) = &previous {
                ensure(kept.is_subset(lower), || format!("run {run}: raising the threshold to {t} added edges {kept:?} vs {lower:?}"))?;
            }
            previous = Some(kept);
        }
    }
    ensure(kept_total > 0 && dropped_total > 0, || format!("degenerate runs: kept {kept_total}, dropped {dropped_total}"))?;
    Ok(format!("300 runs, at 0.25 kept {kept_total} and dropped {dropped_total} triplets, monotone over {thresholds:?}"))
}

// ---------------------------------------------------------------------------------------
// A7

fn corners(b: &BBox) -> [f64; 4] {
    let [cx, cy, w, h] = b.to_array();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

/// Hits per slice for one image: ground truths in order, each taking the first unused
/// matching prediction among the `k` highest scored.
fn oracle_hits(preds: &[PredictedTriplet], g: &SceneGraph, vocab: &Vocabulary, k: usize, iou: f64) -> BTreeMap<Slice, (usize, usize)> {
    let mut ranked: Vec<&PredictedTriplet> = preds.iter().collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    ranked.truncate(k);
    let mut used = vec![false; ranked.len()];
    let mut out: BTreeMap<Slice, (usize, usize)> = BTreeMap::new();
    for e in &g.edges {
        let (s, o) = (&g.nodes[e.subject], &g.nodes[e.object]);
        let novel_obj = vocab.is_novel_object(&s.concept) || vocab.is_novel_object(&o.concept);
        let part = match (novel_obj, vocab.is_novel_relation(&e.predicate)) {
            (false, false) => Slice::Base,
            (true, false) => Slice::NovelObject,
            (false, true) => Slice::NovelRelation,
            (true, true) => Slice::NovelBoth,
        };
        let hit = (0..ranked.len()).find(|&r| {
            let p = ranked[r];
            !used[r]
                && p.predicate == e.predicate
                && p.s_name == s.concept
                && p.o_name == o.concept
                && oracle_iou(&p.s_box, &s.bbox) >= iou
                && oracle_iou(&p.o_box, &o.bbox) >= iou
        });
        if let Some(r) = hit {
            used[r] = true;
        }
        for slice in [Slice::All, part] {
            let entry = out.entry(slice).or_default();
            entry.0 += usize::from(hit.is_some());
            entry.1 += 1;
        }
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let [cx, cy, w, h] = b.to_array();
    BBox::new(
        (cx + rng.random_range(-amount..amount)).clamp(0.01, 0.99),
        (cy + rng.random_range(-amount..amount)).clamp(0.01, 0.99),
        (w * rng.random_range(1.0 - amount..1.0 + amount)).clamp(0.01, 0.9),
        (h * rng.random_range(1.0 - amount..1.0 + amount)).clamp(0.01, 0.9),
    )
    .unwrap()
}

fn random_eval_case(seed: u64) -> (Dataset, Vec<PredictionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects: Vec<String> = ["man", "dog", "cup", "tree"].map(String::from).to_vec();
    let relations: Vec<String> = ["on", "near", "holding"].map(String::from).to_vec();
    let vocab = Vocabulary::new(
        objects.clone(),
        relations.clone(),
        objects.iter().map(|_| rng.random_bool(0.7)).collect(),
        relations.iter().map(|_| rng.random_bool(0.7)).collect(),
    )
    .unwrap();
    let mut records = Vec::new();
    let mut preds = Vec::new();
    for i in 0..rng.random_range(1..=5) {
        let id = format!("img{i}");
        let mut g = SceneGraph::new(id.clone());
        let n = rng.random_range(2..=5);
        for _ in 0..n {
            g.nodes.push(Node::new(random_box(&mut rng), objects[rng.random_range(0..objects.len())].clone()));
        }
        let mut seen = BTreeSet::new();
        for _ in 0..rng.random_range(0..=6) {
            let (s, o) = (rng.random_range(0..n), rng.random_range(0..n));
            let p = relations[rng.random_range(0..relations.len())].clone();
            if s != o && seen.insert((s, o, p.clone())) {
                g.edges.push(Edge::new(s, o, p));
            }
        }
        let mut triplets = Vec::new();
        // Noisy copies of ground truth, some mislabelled, plus distractors; scores come
        // from a small set so ties occur.
        for e in &g.edges {
            for _ in 0..rng.random_range(0..=2) {
                let wrong = rng.random_bool(0.2);
                triplets.push(PredictedTriplet {
                    s_box: jitter(&mut rng, &g.nodes[e.subject].bbox, 0.15),
                    o_box: jitter(&mut rng, &g.nodes[e.object].bbox, 0.15),
                    s_name: g.nodes[e.subject].concept.clone(),
                    o_name: g.nodes[e.object].concept.clone(),
                    predicate: if wrong { relations[rng.random_range(0..relations.len())].clone() } else { e.predicate.clone() },
                    score: rng.random_range(0..8) as f64 / 8.0,
                    subject: 0,
                    object: 0,
                });
            }
        }
        for _ in 0..rng.random_range(0..=80) {
            triplets.push(PredictedTriplet {
                s_box: random_box(&mut rng),
                o_box: random_box(&mut rng),
                s_name: objects[rng.random_range(0..objects.len())].clone(),
                o_name: objects[rng.random_range(0..objects.len())].clone(),
                predicate: relations[rng.random_range(0..relations.len())].clone(),
                score: rng.random_range(0..8) as f64 / 8.0,
                subject: 0,
                object: 0,
            });
        }
        let len = triplets.len();
        for i in (1..len).rev() {
            triplets.swap(i, rng.random_range(0..=i));
        }
        preds.push(PredictionRecord { image_id: id.clone(), triplets });
        records.push(Record {
            image_id: id,
            features: format!("features.bin:{i}"),
            graph: g,
            caption: None,
            provenance: None,
        });
    }
    (Dataset::new(vocab, records).unwrap(), preds)
}

fn a7_evaluator() -> Check {
    let cfg = EvalConfig::default();
    let mut compared = 0;
    for seed in 0..50 {
        let (ds, preds) = random_eval_case(seed);
        let report = evaluate_sgdet(&preds, &ds, &cfg);
        for &k in &cfg.ks {
            let per_image: Vec<BTreeMap<Slice, (usize, usize)>> = ds
                .records
                .iter()
                .zip(&preds)
                .map(|(r, p)| oracle_hits(&p.triplets, &r.graph, &ds.vocabulary, k, cfg.iou_threshold))
                .collect();
            for slice in [Slice::All, Slice::Base, Slice::NovelObject, Slice::NovelRelation, Slice::NovelBoth] {
                let mut sum = 0.0;
                let mut images = 0;
                for hits in &per_image {
                    if let Some(&(h, t)) = hits.get(&slice) {
                        sum += h as f64 / t as f64;
                        images += 1;
                    }
                }
                let want = (images > 0).then(|| sum / images as f64);
                let got = report.get(k, slice);
                ensure(got == want, || format!("seed {seed} R@{k} {}: evaluator {got:?}, oracle {want:?}", slice.as_str()))?;
                compared += 1;
            }
        }
        for img in &report.per_image {
            let r: Vec<Option<f64>> = cfg.ks.iter().map(|&k| img.recall(k, Slice::All)).collect();
            ensure(r.windows(2).all(|w| w[0] <= w[1]), || format!("seed {seed} {}: recall not monotone in K {r:?}", img.image_id))?;
        }
    }
    Ok(format!("50 configurations, {compared} recall values identical to the oracle, K-monotone per image"))
}

// ---------------------------------------------------------------------------------------
// A8

fn a8_relation_queries() -> Check {
    ensure(ModelConfig::default().relation_queries == 1, || "default relation_queries is not 1".into())?;
    let data = generate_synthetic(&SynthSpec { scenes: 6, objects: 6, relations: 4, max_objects: 5, ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let maps = synth_maps(&data);
    let base = ModelConfig { relation_hidden: 32, ..ModelConfig::default() };
    let mut cfg = TrainConfig { steps: 5, batch_size: 3, log_every: 1, ..TrainConfig::default() };
    cfg.loss.lambda = 0.0;
    let names = data.dataset.vocabulary.object_names().to_vec();
    let mut worst: f64 = 0.0;
    for m in [1usize, 3, 5] {
        let model_cfg = ModelConfig { relation_queries: m, ..base.clone() };
        let out = finetune(&data.dataset, &maps, None, &model_cfg, &cfg, |_| {}).map_err(|e| format!("M={m}: {e}"))?;
        ensure(out.logs.iter().all(|l| l.loss.total.is_finite()), || format!("M={m}: non-finite loss"))?;
        let ck = &out.student;
        let table = ck.concepts_for(&data.dataset.vocabulary).map_err(|e| e.to_string())?;
        let preds = decode_nodes(&ck.model, &ck.params, &maps[0], &table, &names).map_err(|e| e.to_string())?;
        let pairs: Vec<(usize, usize)> = (0..preds.len().min(4)).flat_map(|s| (0..preds.len().min(4)).filter(move |&o| o != s).map(move |o| (s, o))).collect();
        let averaged = edge_features(&ck.model, &ck.params, &preds, &pairs).map_err(|e| e.to_string())?;
        // Each relation query on its own, through a single-query model sharing every other weight.
        let single = SceneGraphModel::new(ModelConfig { relation_queries: 1, ..model_cfg.clone() }).unwrap();
        let queries = ck.params.tensor("relation.query").unwrap().clone();
        let mut mean = vec![vec![0.0; averaged[0].values.len()]; pairs.len()];
        for q in 0..m {
            let mut p = ParamStore::new();
            for (name, param) in ck.params.iter() {
                let value = if name == "relation.query" {
                    Tensor::new(vec![1, queries.cols()], queries.row(q).to_vec()).unwrap()
                } else {
                    param.value.clone()
                };
                p.insert(name, value, param.trainable).unwrap();
            }
            let e = edge_features(&single, &p, &preds, &pairs).map_err(|e| e.to_string())?;
            for (acc, f) in mean.iter_mut().zip(&e) {
                acc.iter_mut().zip(&f.values).for_each(|(a, x)| *a += x / m as f64);
            }
        }
        for (a, want) in averaged.iter().zip(&mean) {
            for (x, y) in a.values.iter().zip(want) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("edge features differ from the per-query mean by {worst:.2e}"))?;
    Ok(format!("M in {{1, 3, 5}} trained; max deviation from per-query mean {worst:.1e}"))
}

// ---------------------------------------------------------------------------------------
// A9

fn a9_parser() -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parser_captions.json");
    let fixture: Value = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let strings = |v: &Value| -> Vec<String> { v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect() };
    let lexicon = Lexicon::new(&strings(&fixture["objects"]), &strings(&fixture["relations"]));
    let captions = fixture["captions"].as_array().unwrap();
    let mut mismatches = Vec::new();
    let mut total = 0;
    for c in captions {
        let text = c["text"].as_str().unwrap();
        let want: Vec<Vec<String>> = c["triplets"].as_array().unwrap().iter().map(strings).collect();
        total += want.len();
        let got: Vec<Vec<String>> = parse_caption(text, &lexicon)
            .into_iter()
            .map(|t| vec![t.subject, t.relation, t.object])
            .collect();
        if got != want {
            mismatches.push(format!("{text:?}: got {got:?}, want {want:?}"));
        }
    }
    ensure(captions.len() == 30, || format!("fixture has {} captions", captions.len()))?;
    ensure(mismatches.is_empty(), || format!("{} of 30 captions differ: {}", mismatches.len(), mismatches.join("; ")))?;
    Ok(format!("30 captions, {total} triplets reproduced exactly"))
}

// ---------------------------------------------------------------------------------------
// A10

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{name}.schema.json"));
    let value: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn ovsg(args: &[&str]) -> Result<Vec<Value>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ovsg"))
        .args(args)
        .env_remove("OVSG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure(out.status.code() == Some(0), || format!("`ovsg {}` exited {:?}: {stderr}", args.join(" "), out.status.code()))?;
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("stdout line {l:?}: {e}")))
        .collect()
}

fn validate_file(v: &jsonschema::Validator, path: &Path, lines: bool) -> Result<usize, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let docs: Vec<Value> = if lines {
        text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| format!("{}: {e}", path.display()))?
    } else {
        vec![serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?]
    };
    for d in &docs {
        if let Err(e) = v.validate(d) {
            return Err(format!("{}: {e}", path.display()));
        }
    }
    Ok(docs.len())
}

fn a10_pipeline() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |rel: &str| -> String { root.join(rel).to_string_lossy().into_owned() };
    let mut events = Vec::new();
    events.extend(ovsg(&["gen", "--out", &p("data"), "--synth.scenes", "16", "--seed", "3"])?);
    for s in Setting::ALL {
        events.extend(ovsg(&["split", "--dataset", &p("data/dataset.json"), "--out", &p(s.as_str()), "--split.setting", s.as_str()])?);
        let (train, _) = Dataset::load(&root.join(s.as_str()).join("train.json")).map_err(|e| e.to_string())?;
        let leaks = split_leaks(&train, s);
        ensure(leaks.is_empty(), || format!("{} split leaks {leaks:?}", s.as_str()))?;
    }
    let small = ["--model.relation_hidden", "32", "--train.batch_size", "4", "--train.log_every", "20"];
    let (full, pre_out) = (p("data/dataset.json"), p("pre"));
    let mut args = vec!["pretrain", "--dataset", &full, "--out", &pre_out];
    args.extend(["--train.steps", "60", "--train.detector_steps", "200"]);
    args.extend(small);
    events.extend(ovsg(&args)?);
    let teacher = p("pre/checkpoint");
    for s in Setting::ALL {
        let (dataset, out) = (p(&format!("{}/train.json", s.as_str())), p(&format!("ft_{}", s.as_str())));
        let mut args = vec!["finetune", "--dataset", &dataset, "--teacher", &teacher, "--out", &out, "--train.steps", "40"];
        args.extend(small);
        events.extend(ovsg(&args)?);
        let (eval, ck, report) = (p(&format!("{}/eval.json", s.as_str())), format!("{out}/checkpoint"), p(&format!("eval_{}", s.as_str())));
        events.extend(ovsg(&["eval", "--dataset", &eval, "--checkpoint", &ck, "--out", &report])?);
    }
    events.extend(ovsg(&["parse-captions", "--input", &p("data/dataset.json")])?);

    let warnings: Vec<&Value> = events.iter().filter(|e| e["event"] == "warning").collect();
    ensure(warnings.is_empty(), || format!("artifacts produced warnings: {warnings:?}"))?;
    let event_schema = schema("event");
    for e in &events {
        event_schema.validate(e).map_err(|err| format!("stdout event {e}: {err}"))?;
    }

    let mut checked = 0;
    let mut visit = vec![root.to_path_buf()];
    let mut files: Vec<PathBuf> = Vec::new();
    while let Some(dir) = visit.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                visit.push(path);
            } else {
                files.push(path);
            }
        }
    }
    let validators: BTreeMap<&str, jsonschema::Validator> = [
        "dataset", "feature_store", "synth_manifest", "split_manifest", "checkpoint_manifest", "step_log",
        "pseudo_summary", "prediction_record", "prediction_meta", "eval_report", "run",
    ]
    .into_iter()
    .map(|n| (n, schema(n)))
    .collect();
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        let (kind, lines) = match name.as_str() {
            "dataset.json" | "train.json" | "eval.json" | "pseudo_labels.json" => ("dataset", false),
            "features.json" => ("feature_store", false),
            "synth_manifest.json" => ("synth_manifest", false),
            "split_manifest.json" => ("split_manifest", false),
            "manifest.json" => ("checkpoint_manifest", false),
            "log.jsonl" => ("step_log", true),
            "pseudo_summary.json" => ("pseudo_summary", false),
            "predictions.jsonl" => ("prediction_record", true),
            "predictions.meta.json" => ("prediction_meta", false),
            "report.json" => ("eval_report", false),
            "run.json" => ("run", false),
            "features.bin" | "params.bin" | "report.csv" | "recall.svg" => continue,
            other => return Err(format!("no schema for emitted file {other}")),
        };
        validate_file(&validators[kind], f, lines)?;
        checked += 1;
    }
    ensure(files.iter().any(|f| f.ends_with("recall.svg")), || "no recall plot written".into())?;
    Ok(format!("gen, 4 splits, pretrain, 4 finetunes and evals exited 0; {checked} files and {} stdout lines match their schemas", events.len()))
}

// ---------------------------------------------------------------------------------------

struct Criterion {
    id: &'static str,
    title: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: "A1", title: "gradient correctness", limit: Some(Duration::from_secs(120)), run: a1_gradients },
        Criterion { id: "A2", title: "matching optimality", limit: Some(Duration::from_secs(60)), run: a2_matching },
        Criterion { id: "A3", title: "closed-set overfit", limit: Some(Duration::from_secs(600)), run: a3_overfit },
        Criterion { id: "A4", title: "synonym invariance", limit: None, run: a4_synonyms },
        Criterion { id: "A5", title: "distillation retention", limit: Some(Duration::from_secs(1200)), run: a5_retention },
        Criterion { id: "A6", title: "pseudo-label gate", limit: None, run: a6_gate },
        Criterion { id: "A7", title: "evaluator oracle", limit: None, run: a7_evaluator },
        Criterion { id: "A8", title: "relation-query averaging", limit: None, run: a8_relation_queries },
        Criterion { id: "A9", title: "caption parser fixture", limit: None, run: a9_parser },
        Criterion { id: "A10", title: "pipeline closure", limit: None, run: a10_pipeline },
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == c.id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("{} PASS {} ({elapsed:.1?}): {detail}", c.id, c.title),
            Err(why) => {
                failed += 1;
                println!("{} FAIL {} ({elapsed:.1?}): {why}", c.id, c.title);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
