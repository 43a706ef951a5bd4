//! Training objectives: focal node classification, box regression, relation BCE,
//! edge-feature distillation and their weighted total.

mod samples;

pub use samples::{build_edge_supervision, EdgeSupervision, RelationTargets, SampleSets};

use serde::{Deserialize, Serialize};

use crate::model::EdgeFeature;
use crate::numerics::{softplus, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::types::BBox;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("no relation samples")]
    EmptySamples,
    #[error("student and teacher edges are not aligned: {0}")]
    Misaligned(String),
    #[error("invalid samples: {0}")]
    InvalidSamples(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Loss weights and hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distillation term.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub focal_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    /// Negatives drawn from annotated pairs, as a multiple of the positive count.
    pub negative_ratio: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            focal_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            negative_ratio: 8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [self.lambda, self.focal_gamma, self.focal_weight, self.l1_weight, self.giou_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::InvalidConfig(
                "lambda, gamma and loss weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(LossError::InvalidConfig(format!("focal_alpha {} not in [0, 1]", self.focal_alpha)));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation. Box terms are reported before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub node_focal: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub rel_bce: f64,
    pub distill: f64,
}

/// Binary focal loss of one logit.
pub fn focal_loss(logit: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = crate::numerics::sigmoid(logit);
    let ce = softplus(logit) - logit * target;
    let p_t = p * target + (1.0 - p) * (1.0 - target);
    let alpha_t = alpha * target + (1.0 - alpha) * (1.0 - target);
    alpha_t * (1.0 - p_t).powf(gamma) * ce
}

/// Summed focal loss of `logits` against a same-shaped 0/1 target tensor.
pub fn focal_loss_graph(g: &mut Graph, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var, LossError> {
    if g.value(logits).shape() != targets.shape() {
        return Err(LossError::InvalidSamples(format!(
            "focal targets {:?} vs logits {:?}",
            targets.shape(),
            g.value(logits).shape()
        )));
    }
    let y = g.constant(targets.clone());
    let sign = g.constant(targets.map(|t| 2.0 * t - 1.0));
    let alpha_t = g.constant(targets.map(|t| alpha * t + (1.0 - alpha) * (1.0 - t)));
    let p = g.sigmoid(logits)?;
    let ps = g.mul(p, sign)?;
    // 1 − p_t = t − (2t − 1)·p
    let one_minus_pt = {
        let neg = g.neg(ps)?;
        let offset = g.constant(targets.clone());
        g.add(neg, offset)?
    };
    let modulator = g.powf(one_minus_pt, gamma)?;
    let sp = g.softplus(logits)?;
    let xy = g.mul(logits, y)?;
    let ce = g.sub(sp, xy)?;
    let w = g.mul(alpha_t, modulator)?;
    let l = g.mul(w, ce)?;
    Ok(g.sum(l)?)
}

/// Weighted `(L1, 1 − GIoU)` terms of a predicted box against a ground truth.
pub fn box_losses(pred: &BBox, gt: &BBox, l1_weight: f64, giou_weight: f64) -> (f64, f64) {
    let l1: f64 = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    (l1_weight * l1, giou_weight * (1.0 - pred.giou(gt)))
}

/// Summed L1 and summed `1 − GIoU` over rows of `pred` (`M × 4`, center format) against `gt`.
pub fn box_losses_graph(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<(Var, Var), LossError> {
    if g.value(pred).shape() != gt.shape() || gt.cols() != 4 {
        return Err(LossError::InvalidSamples(format!(
            "box targets {:?} vs predictions {:?}",
            gt.shape(),
            g.value(pred).shape()
        )));
    }
    let gt_var = g.constant(gt.clone());
    let l1 = g.l1(pred, gt_var)?;

    let corners = |g: &mut Graph, b: Var| -> Result<[Var; 4], NumericsError> {
        let cx = g.slice(b, 1, 0, 1)?;
        let cy = g.slice(b, 1, 1, 1)?;
        let w = g.slice(b, 1, 2, 1)?;
        let h = g.slice(b, 1, 3, 1)?;
        let hw = g.scale(w, 0.5)?;
        let hh = g.scale(h, 0.5)?;
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(g, pred)?;
    let [gx1, gy1, gx2, gy2] = corners(g, gt_var)?;
    let area = |g: &mut Graph, x1: Var, y1: Var, x2: Var, y2: Var| -> Result<Var, NumericsError> {
        let w = g.sub(x2, x1)?;
        let h = g.sub(y2, y1)?;
        g.mul(w, h)
    };
    let ix1 = g.maximum(px1, gx1)?;
    let iy1 = g.maximum(py1, gy1)?;
    let ix2 = g.minimum(px2, gx2)?;
    let iy2 = g.minimum(py2, gy2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let pa = area(g, px1, py1, px2, py2)?;
    let ga = area(g, gx1, gy1, gx2, gy2)?;
    let union = g.add(pa, ga)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    let hx1 = g.minimum(px1, gx1)?;
    let hy1 = g.minimum(py1, gy1)?;
    let hx2 = g.maximum(px2, gx2)?;
    let hy2 = g.maximum(py2, gy2)?;
    let hull = area(g, hx1, hy1, hx2, hy2)?;
    let slack = g.sub(hull, union)?;
    let penalty = g.div(slack, hull)?;
    let giou = g.sub(iou, penalty)?;
    let one_minus = g.neg(giou)?;
    let one_minus = g.shift(one_minus, 1.0)?;
    let giou_loss = g.sum(one_minus)?;
    Ok((l1, giou_loss))
}

/// Mean binary cross-entropy over the sampled `(edge row, predicate)` entries of `logits`.
pub fn relation_bce_graph(
    g: &mut Graph,
    logits: Var,
    targets: &RelationTargets,
    sets: &SampleSets,
) -> Result<Var, LossError> {
    let cols = g.value(logits).cols();
    let rows = g.value(logits).rows();
    targets.check(rows, cols)?;
    sets.check(targets)?;
    let entries: Vec<(usize, usize)> = sets.all().collect();
    if entries.is_empty() {
        return Err(LossError::EmptySamples);
    }
    let flat: Vec<usize> = entries.iter().map(|&(e, p)| e * cols + p).collect();
    let y = Tensor::vector(entries.iter().map(|&(e, p)| targets.get(e, p)).collect());
    let x = g.gather(logits, &flat)?;
    let y = g.constant(y);
    let sp = g.softplus(x)?;
    let xy = g.mul(x, y)?;
    let l = g.sub(sp, xy)?;
    Ok(g.mean(l)?)
}

/// Value-level relation BCE over a logit matrix given as rows.
pub fn relation_bce(logits: &[Vec<f64>], targets: &RelationTargets, sets: &SampleSets) -> Result<f64, LossError> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(logits)?);
    let l = relation_bce_graph(&mut g, x, targets, sets)?;
    Ok(g.value(l).item())
}

/// `(1/|rows|)·Σ ‖student_r − teacher_r‖₁` over the listed edge rows (repeats allowed).
pub fn distill_loss_graph(g: &mut Graph, student: Var, teacher: &Tensor, rows: &[usize]) -> Result<Var, LossError> {
    if g.value(student).shape() != teacher.shape() {
        return Err(LossError::Misaligned(format!(
            "student {:?} vs teacher {:?}",
            g.value(student).shape(),
            teacher.shape()
        )));
    }
    if rows.is_empty() {
        return Err(LossError::EmptySamples);
    }
    let t = g.constant(teacher.clone());
    let s = g.gather_rows(student, rows)?;
    let t = g.gather_rows(t, rows)?;
    let l = g.l1(s, t)?;
    Ok(g.scale(l, 1.0 / rows.len() as f64)?)
}

/// Mean L1 distance between aligned student and teacher edge features.
pub fn distill_loss(student: &[EdgeFeature], teacher: &[EdgeFeature]) -> Result<f64, LossError> {
    if student.len() != teacher.len() {
        return Err(LossError::Misaligned(format!("{} vs {} edges", student.len(), teacher.len())));
    }
    if student.is_empty() {
        return Err(LossError::EmptySamples);
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if (s.subject, s.object) != (t.subject, t.object) || s.values.len() != t.values.len() {
            return Err(LossError::Misaligned(format!(
                "({}, {}) vs ({}, {})",
                s.subject, s.object, t.subject, t.object
            )));
        }
        total += s.values.iter().zip(&t.values).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / student.len() as f64)
}

/// Combines unweighted components into the weighted total.
pub fn total_loss(parts: &LossBreakdown, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        total: cfg.focal_weight * parts.node_focal
            + cfg.l1_weight * parts.box_l1
            + cfg.giou_weight * parts.box_giou
            + parts.rel_bce
            + cfg.lambda * parts.distill,
        ..*parts
    }
}

/// Graph terms of one image, each optional.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub node_focal: Option<Var>,
    pub box_l1: Option<Var>,
    pub box_giou: Option<Var>,
    pub rel_bce: Option<Var>,
    pub distill: Option<Var>,
}

/// Weighted sum of the present terms, plus the breakdown of their values.
pub fn total_loss_graph(g: &mut Graph, terms: &LossTerms, cfg: &LossConfig) -> Result<(Var, LossBreakdown), LossError> {
    let mut parts = Vec::new();
    let mut b = LossBreakdown::default();
    let weighted = [
        (terms.node_focal, cfg.focal_weight, &mut b.node_focal),
        (terms.box_l1, cfg.l1_weight, &mut b.box_l1),
        (terms.box_giou, cfg.giou_weight, &mut b.box_giou),
        (terms.rel_bce, 1.0, &mut b.rel_bce),
        (terms.distill, cfg.lambda, &mut b.distill),
    ];
    for (term, w, slot) in weighted {
        if let Some(v) = term {
            *slot = g.value(v).item();
            if w != 0.0 {
                parts.push(g.scale(v, w)?);
            }
        }
    }
    let total = match parts.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            acc
        }
    };
    b.total = g.value(total).item();
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;

    fn bce(x: f64, y: f64) -> f64 {
        let p = 1.0 / (1.0 + (-x).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn focal_examples() {
        let want = 0.25 * 0.25 * -(0.5f64.ln());
        assert!((focal_loss(0.0, 1.0, 0.25, 2.0) - want).abs() < 1e-15);
        assert!((focal_loss(0.0, 1.0, 0.25, 2.0) - 0.04332).abs() < 1e-5);
        assert!(focal_loss(40.0, 1.0, 0.25, 2.0) < 1e-30);
        for x in [-3.0, -0.2, 0.0, 1.7, 4.0] {
            assert!((focal_loss(x, 1.0, 1.0, 0.0) - bce(x, 1.0)).abs() < 1e-12);
            assert!((focal_loss(x, 0.0, 0.0, 0.0) - bce(x, 0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_graph_matches_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xs = vec![-2.0, -0.5, 0.0, 0.3, 1.5, 3.0];
        let ys = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = g.constant(Tensor::matrix(2, 3, xs.clone()).unwrap());
        let l = focal_loss_graph(&mut g, x, &ys, 0.25, 2.0).unwrap();
        let want: f64 = xs.iter().zip(ys.data()).map(|(&x, &y)| focal_loss(x, y, 0.25, 2.0)).sum();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn box_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(box_losses(&a, &a, 1.0, 1.0), (0.0, 0.0));
        let p = BBox::from_corners(0.0, 0.0, 0.2, 0.2).unwrap();
        let q = BBox::from_corners(0.4, 0.4, 0.6, 0.6).unwrap();
        let (_, gl) = box_losses(&p, &q, 1.0, 1.0);
        assert!((gl - (1.0 + 7.0 / 9.0)).abs() < 1e-12);
        let r = BBox::new(0.3, 0.6, 0.1, 0.4).unwrap();
        let s = BBox::new(0.5, 0.5, 0.3, 0.2).unwrap();
        let (l1, _) = box_losses(&r, &s, 1.0, 1.0);
        assert!((l1 - (0.2 + 0.1 + 0.2 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn box_graph_matches_scalar() {
        let boxes = [
            (BBox::new(0.3, 0.6, 0.1, 0.4).unwrap(), BBox::new(0.5, 0.5, 0.3, 0.2).unwrap()),
            (BBox::from_corners(0.0, 0.0, 0.2, 0.2).unwrap(), BBox::from_corners(0.4, 0.4, 0.6, 0.6).unwrap()),
        ];
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let pred = g.constant(Tensor::from_rows(&boxes.iter().map(|b| b.0.to_array().to_vec()).collect::<Vec<_>>()).unwrap());
        let gt = Tensor::from_rows(&boxes.iter().map(|b| b.1.to_array().to_vec()).collect::<Vec<_>>()).unwrap();
        let (l1, gl) = box_losses_graph(&mut g, pred, &gt).unwrap();
        let (wl1, wgl) = boxes
            .iter()
            .map(|(p, q)| box_losses(p, q, 1.0, 1.0))
            .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        assert!((g.value(l1).item() - wl1).abs() < 1e-12);
        assert!((g.value(gl).item() - wgl).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let targets = RelationTargets::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let one = SampleSets::new(vec![(0, 0)], vec![]);
        assert!((relation_bce(&[vec![0.0, 0.0]], &targets, &one).unwrap() - 2f64.ln()).abs() < 1e-15);
        let two = SampleSets::new(vec![(0, 0)], vec![(0, 1)]);
        assert!((relation_bce(&[vec![0.0, 0.0]], &targets, &two).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(relation_bce(&[vec![60.0, -60.0]], &targets, &two).unwrap() < 1e-20);
        assert!(matches!(
            relation_bce(&[vec![0.0, 0.0]], &targets, &SampleSets::default()),
            Err(LossError::EmptySamples)
        ));
        let bad = SampleSets::new(vec![(0, 1)], vec![]);
        assert!(relation_bce(&[vec![0.0, 0.0]], &targets, &bad).is_err());
    }

    #[test]
    fn distill_examples() {
        let e = |v: Vec<f64>| EdgeFeature {
            subject: 0,
            object: 1,
            values: v,
        };
        assert_eq!(distill_loss(&[e(vec![1.0, 2.0])], &[e(vec![1.0, 2.0])]).unwrap(), 0.0);
        assert_eq!(distill_loss(&[e(vec![0.5, -0.5])], &[e(vec![0.0, 0.0])]).unwrap(), 1.0);
        let s = [e(vec![0.5, -0.5]), e(vec![0.5, -0.5])];
        let t = [e(vec![0.0, 0.0]), e(vec![0.0, 0.0])];
        assert_eq!(distill_loss(&s, &t).unwrap(), 1.0);
        let other = EdgeFeature {
            subject: 1,
            object: 0,
            values: vec![0.0, 0.0],
        };
        assert!(matches!(
            distill_loss(&[e(vec![0.0, 0.0])], &[other]),
            Err(LossError::Misaligned(_))
        ));
    }

    #[test]
    fn total_is_affine_in_lambda() {
        let parts = LossBreakdown {
            node_focal: 0.3,
            box_l1: 0.2,
            box_giou: 0.4,
            rel_bce: 0.7,
            distill: 1.3,
            total: 0.0,
        };
        let at = |l: f64| {
            total_loss(
                &parts,
                &LossConfig {
                    lambda: l,
                    ..Default::default()
                },
            )
            .total
        };
        let base = at(0.0);
        for l in [0.1, 0.3, 0.5] {
            assert!((at(l) - base - l * parts.distill).abs() < 1e-12);
        }
        assert_eq!(total_loss(&LossBreakdown::default(), &LossConfig::default()).total, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::matrix(2, 3, vec![-1.3, 0.4, 0.9, 0.2, -0.7, 1.1]).unwrap(), true)
            .unwrap();
        let y = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = finite_diff_check(
            &store,
            |g| {
                let x = g.param("x")?;
                focal_loss_graph(g, x, &y, 0.25, 2.0).map_err(|e| match e {
                    LossError::Numerics(n) => n,
                    other => NumericsError::Shape(other.to_string()),
                })
            },
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    proptest! {
        #[test]
        fn bce_monotone_in_sample_logits(x in -5.0f64..5.0, other in -5.0f64..5.0, dx in 0.01f64..2.0) {
            let targets = RelationTargets::from_rows(vec![vec![1.0, 0.0]]).unwrap();
            let sets = SampleSets::new(vec![(0, 0)], vec![(0, 1)]);
            let base = relation_bce(&[vec![x, other]], &targets, &sets).unwrap();
            prop_assert!(relation_bce(&[vec![x + dx, other]], &targets, &sets).unwrap() < base);
            prop_assert!(relation_bce(&[vec![x, other + dx]], &targets, &sets).unwrap() > base);
        }

        #[test]
        fn distill_nonnegative_and_zero_iff_equal(v in proptest::collection::vec(-2.0f64..2.0, 1..6), d in proptest::collection::vec(-1.0f64..1.0, 1..6)) {
            let n = v.len().min(d.len());
            let s: Vec<f64> = v[..n].to_vec();
            let t: Vec<f64> = s.iter().zip(&d[..n]).map(|(a, b)| a + b).collect();
            let e = |values: Vec<f64>| EdgeFeature { subject: 2, object: 0, values };
            let l = distill_loss(&[e(s.clone())], &[e(t.clone())]).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, s == t);
        }
    }
}
