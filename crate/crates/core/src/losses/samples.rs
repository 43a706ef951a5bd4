use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::Rng;

use super::LossError;

/// Multi-hot relation targets, one row per edge.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelationTargets {
    rows: Vec<Vec<f64>>,
}

impl RelationTargets {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, LossError> {
        if rows.iter().flatten().any(|&x| x != 0.0 && x != 1.0) {
            return Err(LossError::InvalidSamples("targets must be 0 or 1".into()));
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(LossError::InvalidSamples("ragged target rows".into()));
            }
        }
        Ok(Self { rows })
    }

    pub fn get(&self, edge: usize, predicate: usize) -> f64 {
        self.rows[edge][predicate]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub(super) fn check(&self, rows: usize, cols: usize) -> Result<(), LossError> {
        if self.rows.len() != rows || self.rows.iter().any(|r| r.len() != cols) {
            return Err(LossError::InvalidSamples(format!(
                "targets do not cover a {rows} × {cols} logit matrix"
            )));
        }
        Ok(())
    }
}

/// Positive and negative `(edge row, predicate)` samples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleSets {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl SampleSets {
    pub fn new(positives: Vec<(usize, usize)>, negatives: Vec<(usize, usize)>) -> Self {
        Self { positives, negatives }
    }

    pub fn all(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positives.iter().chain(&self.negatives).copied()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Disjointness and agreement with the targets.
    pub(super) fn check(&self, targets: &RelationTargets) -> Result<(), LossError> {
        let pos: HashSet<_> = self.positives.iter().collect();
        if self.negatives.iter().any(|n| pos.contains(n)) {
            return Err(LossError::InvalidSamples("positive and negative sets overlap".into()));
        }
        let in_range = |&(e, p): &(usize, usize)| e < targets.rows.len() && p < targets.rows[e].len();
        if !self.all().all(|s| in_range(&s)) {
            return Err(LossError::InvalidSamples("sample outside the logit matrix".into()));
        }
        if self.positives.iter().any(|&(e, p)| targets.get(e, p) != 1.0)
            || self.negatives.iter().any(|&(e, p)| targets.get(e, p) != 0.0)
        {
            return Err(LossError::InvalidSamples("sample label disagrees with targets".into()));
        }
        Ok(())
    }
}

/// Edge rows to evaluate for one image and the samples drawn from them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeSupervision {
    /// Ordered query pairs; row `i` of the edge-feature matrix is `pairs[i]`.
    pub pairs: Vec<(usize, usize)>,
    pub targets: RelationTargets,
    pub samples: SampleSets,
    /// Rows between matched queries that carry no annotated edge.
    pub background_rows: Vec<usize>,
}

/// Builds relation supervision from matched nodes.
///
/// `assignment[i]` is the query matched to ground-truth node `i`; `edges` are
/// `(subject node, object node, predicate index)`. Annotated pairs come first, then
/// every other ordered pair of matched queries. Negatives on annotated pairs are
/// subsampled to at most `negative_ratio × |positives|`; all predicates of background
/// pairs are negatives.
pub fn build_edge_supervision(
    assignment: &[usize],
    edges: &[(usize, usize, usize)],
    predicates: usize,
    negative_ratio: usize,
    rng: &mut impl Rng,
) -> Result<EdgeSupervision, LossError> {
    let mut labelled: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for &(s, o, p) in edges {
        if s >= assignment.len() || o >= assignment.len() || s == o || p >= predicates {
            return Err(LossError::InvalidSamples(format!("edge ({s}, {o}, {p}) out of range")));
        }
        labelled.entry((assignment[s], assignment[o])).or_default().insert(p);
    }
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    let mut positives = Vec::new();
    let mut pool = Vec::new();
    for (row, (&pair, preds)) in labelled.iter().enumerate() {
        pairs.push(pair);
        let mut t = vec![0.0; predicates];
        for p in 0..predicates {
            if preds.contains(&p) {
                t[p] = 1.0;
                positives.push((row, p));
            } else {
                pool.push((row, p));
            }
        }
        targets.push(t);
    }
    let cap = negative_ratio * positives.len();
    let mut negatives = if pool.len() > cap {
        let mut idx = sample(rng, pool.len(), cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    } else {
        pool
    };

    let mut matched: Vec<usize> = assignment.to_vec();
    matched.sort_unstable();
    matched.dedup();
    let mut background_rows = Vec::new();
    for &s in &matched {
        for &o in &matched {
            if s == o || labelled.contains_key(&(s, o)) {
                continue;
            }
            let row = pairs.len();
            pairs.push((s, o));
            targets.push(vec![0.0; predicates]);
            negatives.extend((0..predicates).map(|p| (row, p)));
            background_rows.push(row);
        }
    }
    Ok(EdgeSupervision {
        pairs,
        targets: RelationTargets::from_rows(targets)?,
        samples: SampleSets::new(positives, negatives),
        background_rows,
    })
}
