//! Bipartite matching of ground-truth nodes to predicted queries.

mod hungarian;

use serde::{Deserialize, Serialize};

use crate::concept::{ConceptError, ConceptTable};
use crate::model::PredictionSet;
use crate::numerics::sigmoid;
use crate::types::{BBox, Node};

/// Largest column count accepted by [`match_bruteforce`].
pub const BRUTEFORCE_MAX: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("{rows} ground truths but only {cols} predictions")]
    TooManyTargets { rows: usize, cols: usize },
    #[error("instance with {0} predictions is too large for brute force")]
    TooLarge(usize),
    #[error("cost matrix has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("invalid match cost: {0}")]
    InvalidCost(String),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Full,
    CategoryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCost {
    pub category: f64,
    pub l1: f64,
    pub giou: f64,
    pub mode: MatchMode,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self {
            category: 2.0,
            l1: 5.0,
            giou: 2.0,
            mode: MatchMode::Full,
        }
    }
}

impl MatchCost {
    pub fn category_only() -> Self {
        Self {
            mode: MatchMode::CategoryOnly,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if [self.category, self.l1, self.giou].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MatchError::InvalidCost(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Weighted cost terms for one (ground truth, prediction) pair. Costs are minimized;
/// the category term is one minus the alignment similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub category: f64,
    pub l1: f64,
    pub giou: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.category + self.l1 + self.giou
    }
}

/// Cost of matching a ground truth (embedding, optional box) with a prediction (feature, box).
pub fn pairwise_terms(
    gt_embedding: &[f64],
    gt_box: Option<&BBox>,
    pred_feature: &[f64],
    pred_box: &BBox,
    cost: &MatchCost,
) -> CostTerms {
    let sim = sigmoid(gt_embedding.iter().zip(pred_feature).map(|(a, b)| a * b).sum());
    let mut t = CostTerms {
        category: cost.category * (1.0 - sim),
        ..CostTerms::default()
    };
    if let (MatchMode::Full, Some(g)) = (cost.mode, gt_box) {
        let l1: f64 = g
            .to_array()
            .iter()
            .zip(pred_box.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum();
        t.l1 = cost.l1 * l1;
        t.giou = cost.giou * (1.0 - g.giou(pred_box));
    }
    t
}

pub fn pairwise_cost(
    gt: &Node,
    pred_feature: &[f64],
    pred_box: &BBox,
    cost: &MatchCost,
    concepts: &ConceptTable,
) -> Result<f64, MatchError> {
    let w = concepts
        .get(&gt.concept)
        .ok_or_else(|| ConceptError::UnknownName(gt.concept.clone()))?;
    Ok(pairwise_terms(w, Some(&gt.bbox), pred_feature, pred_box, cost).total())
}

/// Dense `rows × cols` cost matrix with its per-pair breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    terms: Vec<CostTerms>,
    totals: Vec<f64>,
}

impl CostMatrix {
    /// Plain costs with no breakdown (all cost carried in the category term).
    pub fn from_costs(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self, MatchError> {
        if costs.len() != rows * cols {
            return Err(MatchError::Shape {
                expected: rows * cols,
                got: costs.len(),
            });
        }
        let terms = costs
            .iter()
            .map(|&c| CostTerms {
                category: c,
                ..CostTerms::default()
            })
            .collect();
        Self::from_terms(rows, cols, terms)
    }

    pub fn from_terms(rows: usize, cols: usize, terms: Vec<CostTerms>) -> Result<Self, MatchError> {
        if terms.len() != rows * cols {
            return Err(MatchError::Shape {
                expected: rows * cols,
                got: terms.len(),
            });
        }
        let totals: Vec<f64> = terms.iter().map(CostTerms::total).collect();
        if let Some(i) = totals.iter().position(|c| !c.is_finite()) {
            return Err(MatchError::NonFinite(i / cols.max(1), i % cols.max(1)));
        }
        Ok(Self {
            rows,
            cols,
            terms,
            totals,
        })
    }

    /// Costs of ground-truth nodes against decoded predictions.
    pub fn for_nodes(
        gts: &[Node],
        preds: &PredictionSet,
        cost: &MatchCost,
        concepts: &ConceptTable,
    ) -> Result<Self, MatchError> {
        cost.validate()?;
        let mut terms = Vec::with_capacity(gts.len() * preds.len());
        for gt in gts {
            let w = concepts
                .get(&gt.concept)
                .ok_or_else(|| ConceptError::UnknownName(gt.concept.clone()))?;
            for q in 0..preds.len() {
                terms.push(pairwise_terms(w, Some(&gt.bbox), preds.features.row(q), &preds.boxes[q], cost));
            }
        }
        Self::from_terms(gts.len(), preds.len(), terms)
    }

    /// Category-only costs of phrase embeddings against predictions.
    pub fn for_embeddings(embeddings: &[&[f64]], preds: &PredictionSet, cost: &MatchCost) -> Result<Self, MatchError> {
        cost.validate()?;
        let cat = MatchCost {
            mode: MatchMode::CategoryOnly,
            ..cost.clone()
        };
        let mut terms = Vec::with_capacity(embeddings.len() * preds.len());
        for w in embeddings {
            for q in 0..preds.len() {
                terms.push(pairwise_terms(w, None, preds.features.row(q), &preds.boxes[q], &cat));
            }
        }
        Self::from_terms(embeddings.len(), preds.len(), terms)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.totals[r * self.cols + c]
    }

    pub fn terms(&self, r: usize, c: usize) -> CostTerms {
        self.terms[r * self.cols + c]
    }

    fn total_of(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }

    fn tolerance(&self, optimum: f64) -> f64 {
        1e-9 * (1.0 + optimum.abs())
    }

    /// Same costs multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self, MatchError> {
        Self::from_costs(self.rows, self.cols, self.totals.iter().map(|c| c * k).collect())
    }
}

/// Injective assignment of every ground truth (row) to a distinct prediction (column).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Column matched to each row.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    /// Breakdown of each matched pair, by row.
    pub terms: Vec<CostTerms>,
    cols: usize,
}

impl MatchResult {
    fn new(m: &CostMatrix, assignment: Vec<usize>) -> Self {
        let terms = assignment.iter().enumerate().map(|(r, &c)| m.terms(r, c)).collect();
        Self {
            total_cost: m.total_of(&assignment),
            terms,
            assignment,
            cols: m.cols,
        }
    }

    /// Binary `rows × cols` mask.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.assignment
            .iter()
            .map(|&c| (0..self.cols).map(|j| j == c).collect())
            .collect()
    }

    /// Row matched to each column, if any.
    pub fn column_owner(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.cols];
        for (r, &c) in self.assignment.iter().enumerate() {
            out[c] = Some(r);
        }
        out
    }
}

fn check_shape(m: &CostMatrix) -> Result<(), MatchError> {
    if m.rows > m.cols {
        return Err(MatchError::TooManyTargets {
            rows: m.rows,
            cols: m.cols,
        });
    }
    Ok(())
}

/// Optimal cost with rows `0..fixed.len()` pinned to the given columns.
fn solve_with_prefix(m: &CostMatrix, fixed: &[usize]) -> Vec<usize> {
    let free_rows: Vec<usize> = (fixed.len()..m.rows).collect();
    let free_cols: Vec<usize> = (0..m.cols).filter(|c| !fixed.contains(c)).collect();
    let mut sub = Vec::with_capacity(free_rows.len() * free_cols.len());
    for &r in &free_rows {
        sub.extend(free_cols.iter().map(|&c| m.get(r, c)));
    }
    let local = hungarian::solve(&sub, free_rows.len(), free_cols.len());
    let mut out = fixed.to_vec();
    out.extend(local.into_iter().map(|j| free_cols[j]));
    out
}

/// Minimum-cost assignment. Among assignments within a relative 1e-9 of the optimum,
/// the lexicographically smallest (by row, then column) is returned.
pub fn match_bipartite(m: &CostMatrix) -> Result<MatchResult, MatchError> {
    check_shape(m)?;
    let mut best = hungarian::solve(&m.totals, m.rows, m.cols);
    let optimum = m.total_of(&best);
    let tol = m.tolerance(optimum);
    for r in 0..m.rows {
        let prefix = &best[..r];
        for c in 0..best[r] {
            if prefix.contains(&c) {
                continue;
            }
            let mut fixed = prefix.to_vec();
            fixed.push(c);
            let cand = solve_with_prefix(m, &fixed);
            if m.total_of(&cand) <= optimum + tol {
                best = cand;
                break;
            }
        }
    }
    Ok(MatchResult::new(m, best))
}

/// Exhaustive search over all injections (columns ≤ [`BRUTEFORCE_MAX`]), same tie rule.
pub fn match_bruteforce(m: &CostMatrix) -> Result<MatchResult, MatchError> {
    check_shape(m)?;
    if m.cols > BRUTEFORCE_MAX {
        return Err(MatchError::TooLarge(m.cols));
    }
    let mut all = Vec::new();
    let mut current = Vec::with_capacity(m.rows);
    let mut used = vec![false; m.cols];
    enumerate(m, &mut current, &mut used, &mut all);
    let optimum = all.iter().map(|a| m.total_of(a)).fold(f64::INFINITY, f64::min);
    let tol = m.tolerance(optimum);
    let first = all
        .into_iter()
        .find(|a| m.total_of(a) <= optimum + tol)
        .expect("at least one injection");
    Ok(MatchResult::new(m, first))
}

fn enumerate(m: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
    if current.len() == m.rows {
        out.push(current.clone());
        return;
    }
    for c in 0..m.cols {
        if !used[c] {
            used[c] = true;
            current.push(c);
            enumerate(m, current, used, out);
            current.pop();
            used[c] = false;
        }
    }
}

/// Matches ground-truth nodes to decoded predictions.
pub fn match_nodes(
    gts: &[Node],
    preds: &PredictionSet,
    cost: &MatchCost,
    concepts: &ConceptTable,
) -> Result<MatchResult, MatchError> {
    match_bipartite(&CostMatrix::for_nodes(gts, preds, cost, concepts)?)
}
