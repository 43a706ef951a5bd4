use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::concept::ConceptTable;
use crate::losses::{
    box_losses_graph, build_edge_supervision, distill_loss_graph, focal_loss_graph, relation_bce_graph,
    total_loss_graph, LossBreakdown, LossTerms,
};
use crate::matching::match_nodes;
use crate::model::{prediction_set, FeatureMap, SceneGraphModel};
use crate::numerics::{Gradients, Graph, ParamStore, Sgd, Tensor};
use crate::types::Node;

/// One annotated image ready for training.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub image_id: String,
    pub features: FeatureMap,
    pub nodes: Vec<Node>,
    /// `(subject node, object node, relation index)`.
    pub edges: Vec<(usize, usize, usize)>,
}

/// Names being trained and their embedding matrices.
#[derive(Clone, Debug)]
pub struct TrainVocab {
    pub objects: Vec<String>,
    pub relations: Vec<String>,
    pub object_matrix: Tensor,
    /// `None` trains nodes only.
    pub relation_matrix: Option<Tensor>,
    object_index: HashMap<String, usize>,
}

impl TrainVocab {
    pub fn new(objects: Vec<String>, relations: Vec<String>, concepts: &ConceptTable, with_relations: bool) -> Result<Self, TrainError> {
        let object_matrix = concepts.matrix(&objects)?;
        let relation_matrix = if with_relations && !relations.is_empty() {
            Some(concepts.matrix(&relations)?)
        } else {
            None
        };
        let object_index = objects.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            objects,
            relations,
            object_matrix,
            relation_matrix,
            object_index,
        })
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }
}

/// A frozen model and its node features for every training image.
pub struct Teacher<'a> {
    pub model: &'a SceneGraphModel,
    pub params: &'a ParamStore,
    /// Per image: decoded node features and the token each query came from.
    nodes: Vec<(Tensor, Vec<usize>)>,
}

impl<'a> Teacher<'a> {
    pub fn new(
        model: &'a SceneGraphModel,
        params: &'a ParamStore,
        images: &[TrainImage],
        object_matrix: &Tensor,
    ) -> Result<Self, TrainError> {
        let nodes = images
            .par_iter()
            .map(|img| {
                let mut g = Graph::new(params);
                let out = model.forward_nodes(&mut g, &img.features, object_matrix)?;
                Ok((g.value(out.features).clone(), out.tokens))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self { model, params, nodes })
    }

    /// Teacher edge features for student pairs, given the student's query tokens.
    /// Rows whose tokens the teacher did not decode are zero and flagged `false`.
    fn edges(&self, image: usize, student_tokens: &[usize], pairs: &[(usize, usize)]) -> Result<(Tensor, Vec<bool>), TrainError> {
        let (features, tokens) = &self.nodes[image];
        let by_token: HashMap<usize, usize> = tokens.iter().enumerate().map(|(q, &t)| (t, q)).collect();
        let mapped: Vec<Option<(usize, usize)>> = pairs
            .iter()
            .map(|&(s, o)| Some((*by_token.get(&student_tokens[s])?, *by_token.get(&student_tokens[o])?)))
            .collect();
        let present: Vec<(usize, usize)> = mapped.iter().flatten().copied().collect();
        let width = self.model.config().edge_dim;
        let mut out = Tensor::zeros(&[pairs.len(), width]).into_data();
        if !present.is_empty() {
            let mut g = Graph::new(self.params);
            let nodes = g.constant(features.clone());
            let e = self.model.edge_features(&mut g, nodes, &present)?;
            let e = g.value(e);
            let mut next = 0;
            for (row, m) in mapped.iter().enumerate() {
                if m.is_some() {
                    out[row * width..(row + 1) * width].copy_from_slice(e.row(next));
                    next += 1;
                }
            }
        }
        Ok((Tensor::new(vec![pairs.len(), width], out)?, mapped.iter().map(Option::is_some).collect()))
    }
}

/// Loss breakdown of one logging window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub images: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

fn sample_rng(seed: u64, step: usize, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ed6e5);
    rng.set_stream(((step as u64) << 24) ^ image as u64);
    rng
}

/// Loss and gradients for one image.
pub fn image_step(
    model: &SceneGraphModel,
    params: &ParamStore,
    img: &TrainImage,
    vocab: &TrainVocab,
    concepts: &ConceptTable,
    cfg: &TrainConfig,
    teacher: Option<(&Teacher, usize)>,
    rng: &mut ChaCha8Rng,
) -> Result<(Gradients, LossBreakdown), TrainError> {
    let lc = &cfg.loss;
    let mut g = Graph::new(params);
    let out = model.forward_nodes(&mut g, &img.features, &vocab.object_matrix)?;
    let preds = prediction_set(&g, &out);
    let mut terms = LossTerms::default();

    let assignment = if img.nodes.is_empty() {
        Vec::new()
    } else {
        match_nodes(&img.nodes, &preds, &cfg.matching, concepts)?.assignment
    };
    let n = assignment.len().max(1) as f64;
    let (k, c) = (preds.len(), vocab.objects.len());
    let mut targets = vec![0.0; k * c];
    for (node, &q) in img.nodes.iter().zip(&assignment) {
        let ci = vocab
            .object_index(&node.concept)
            .ok_or_else(|| TrainError::InvalidConfig(format!("concept {:?} outside the training vocabulary", node.concept)))?;
        targets[q * c + ci] = 1.0;
    }
    let focal = focal_loss_graph(&mut g, out.logits, &Tensor::new(vec![k, c], targets)?, lc.focal_alpha, lc.focal_gamma)?;
    terms.node_focal = Some(g.scale(focal, 1.0 / n)?);

    if !assignment.is_empty() {
        let gt: Vec<f64> = img.nodes.iter().flat_map(|nd| nd.bbox.to_array()).collect();
        let pb = g.gather_rows(out.boxes, &assignment)?;
        let (l1, giou) = box_losses_graph(&mut g, pb, &Tensor::new(vec![assignment.len(), 4], gt)?)?;
        terms.box_l1 = Some(g.scale(l1, 1.0 / n)?);
        terms.box_giou = Some(g.scale(giou, 1.0 / n)?);
    }

    if let Some(rel_matrix) = &vocab.relation_matrix {
        let sup = build_edge_supervision(&assignment, &img.edges, vocab.relations.len(), lc.negative_ratio, rng)?;
        if !sup.pairs.is_empty() && !sup.samples.is_empty() {
            let e = model.edge_features(&mut g, out.features, &sup.pairs)?;
            let logits = model.edge_logits(&mut g, e, rel_matrix)?;
            terms.rel_bce = Some(relation_bce_graph(&mut g, logits, &sup.targets, &sup.samples)?);
            if let (Some((t, image)), true) = (teacher, lc.lambda > 0.0) {
                let (target, present) = t.edges(image, &preds.tokens, &sup.pairs)?;
                let rows: Vec<usize> = sup.background_rows.iter().copied().filter(|&r| present[r]).collect();
                if !rows.is_empty() {
                    terms.distill = Some(distill_loss_graph(&mut g, e, &target, &rows)?);
                }
            }
        }
    }

    let (total, breakdown) = total_loss_graph(&mut g, &terms, lc)?;
    Ok((g.backward(total)?, breakdown))
}

fn accumulate(acc: &mut IndexMap<String, Vec<f64>>, grads: Gradients) {
    for (name, t) in grads {
        match acc.get_mut(&name) {
            Some(sum) => sum.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            None => {
                acc.insert(name, t.into_data());
            }
        }
    }
}

fn add_breakdown(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.total += b.total;
    a.node_focal += b.node_focal;
    a.box_l1 += b.box_l1;
    a.box_giou += b.box_giou;
    a.rel_bce += b.rel_bce;
    a.distill += b.distill;
}

fn scale_breakdown(a: &LossBreakdown, k: f64) -> LossBreakdown {
    LossBreakdown {
        total: a.total * k,
        node_focal: a.node_focal * k,
        box_l1: a.box_l1 * k,
        box_giou: a.box_giou * k,
        rel_bce: a.rel_bce * k,
        distill: a.distill * k,
    }
}

/// Mini-batch SGD over `images`. Per-image work runs in parallel; gradients are
/// reduced in image order so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    stage: &str,
    model: &SceneGraphModel,
    params: &mut ParamStore,
    images: &[TrainImage],
    vocab: &TrainVocab,
    concepts: &ConceptTable,
    cfg: &TrainConfig,
    steps: usize,
    teacher: Option<&Teacher>,
    mut on_log: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut sgd = Sgd::new(cfg.sgd.clone());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::new();
    let mut window = LossBreakdown::default();
    let mut window_images = 0;
    let batch = cfg.batch_size.min(images.len());
    for step in 0..steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            picked.push(order.pop().expect("refilled"));
        }
        let results = picked
            .par_iter()
            .map(|&i| {
                let mut rng = sample_rng(cfg.seed, step, i);
                image_step(model, params, &images[i], vocab, concepts, cfg, teacher.map(|t| (t, i)), &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut acc = IndexMap::new();
        for (grads, b) in results {
            accumulate(&mut acc, grads);
            add_breakdown(&mut window, &b);
            window_images += 1;
        }
        let scale = 1.0 / picked.len() as f64;
        let grads: Gradients = acc
            .into_iter()
            .map(|(name, data)| {
                let shape = params.tensor(&name)?.shape().to_vec();
                Ok((name, Tensor::new(shape, data.into_iter().map(|x| x * scale).collect())?))
            })
            .collect::<Result<_, TrainError>>()?;
        let lr = cfg.schedule.rate(cfg.sgd.learning_rate, step, steps);
        sgd.set_learning_rate(lr);
        sgd.step(params, &grads)?;
        let last = step + 1 == steps;
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last {
            let entry = StepLog {
                stage: stage.to_string(),
                step: step + 1,
                images: window_images,
                learning_rate: lr,
                loss: scale_breakdown(&window, 1.0 / window_images.max(1) as f64),
            };
            on_log(&entry);
            logs.push(entry);
            window = LossBreakdown::default();
            window_images = 0;
        }
    }
    Ok(logs)
}
