use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BBox, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub concept: String,
    /// Index into the active vocabulary's object names, when resolved.
    #[serde(skip)]
    pub concept_id: Option<usize>,
}

impl Node {
    pub fn new(bbox: BBox, concept: impl Into<String>) -> Self {
        Self {
            bbox,
            concept: concept.into(),
            concept_id: None,
        }
    }
}

/// Directed predicate edge `subject → object`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    #[serde(rename = "s")]
    pub subject: usize,
    #[serde(rename = "o")]
    pub object: usize,
    #[serde(rename = "p")]
    pub predicate: String,
}

impl Edge {
    pub fn new(subject: usize, object: usize, predicate: impl Into<String>) -> Self {
        Self {
            subject,
            object,
            predicate: predicate.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGraph {
    pub image_id: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// A labelled `(subject, predicate, object)` triple with resolved node data.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet<'a> {
    pub subject: &'a Node,
    pub predicate: &'a str,
    pub object: &'a Node,
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            ..Self::default()
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = Triplet<'_>> {
        self.edges.iter().filter_map(|e| {
            Some(Triplet {
                subject: self.nodes.get(e.subject)?,
                predicate: &e.predicate,
                object: self.nodes.get(e.object)?,
            })
        })
    }

    /// Removes repeated `(subject, object, predicate)` edges, keeping first occurrences.
    /// Returns the number removed.
    pub fn dedup_edges(&mut self) -> usize {
        let before = self.edges.len();
        let mut seen = HashSet::new();
        self.edges.retain(|e| seen.insert(e.clone()));
        before - self.edges.len()
    }

    /// Fills `concept_id` from the vocabulary's object names.
    pub fn resolve(&mut self, vocab: &Vocabulary) {
        for n in &mut self.nodes {
            n.concept_id = vocab.object_index(&n.concept);
        }
    }

    /// Keeps nodes for which `keep` is true, drops their incident edges and reindexes.
    pub fn retain_nodes(&mut self, keep: impl Fn(&Node) -> bool) -> usize {
        let mut remap = vec![None; self.nodes.len()];
        let mut kept = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.drain(..).enumerate() {
            if keep(&n) {
                remap[i] = Some(kept.len());
                kept.push(n);
            }
        }
        let dropped = remap.iter().filter(|r| r.is_none()).count();
        self.nodes = kept;
        self.edges = self
            .edges
            .drain(..)
            .filter_map(|e| {
                let s = (*remap.get(e.subject)?)?;
                let o = (*remap.get(e.object)?)?;
                Some(Edge::new(s, o, e.predicate))
            })
            .collect();
        dropped
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Violation,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IssueKind {
    EmptyConcept,
    EmptyPredicate,
    SelfLoop,
    IndexOutOfRange,
    DuplicateTriple,
    UnknownConcept(String),
    UnknownPredicate(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub kind: IssueKind,
    pub severity: Severity,
    /// e.g. `"node 3"` or `"edge 1"`.
    pub location: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {:?}", self.severity, self.location, self.kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn violations(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Violation)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }
}

/// Lists every broken invariant in `g`. Out-of-vocabulary names are warnings, not violations.
pub fn validate_scene_graph(g: &SceneGraph, vocab: &Vocabulary) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |kind, severity, location: String| issues.push(Issue { kind, severity, location });

    for (i, n) in g.nodes.iter().enumerate() {
        if n.concept.trim().is_empty() {
            push(IssueKind::EmptyConcept, Severity::Violation, format!("node {i}"));
        } else if vocab.object_index(&n.concept).is_none() {
            push(
                IssueKind::UnknownConcept(n.concept.clone()),
                Severity::Warning,
                format!("node {i}"),
            );
        }
    }
    let mut seen = HashSet::new();
    for (i, e) in g.edges.iter().enumerate() {
        let loc = format!("edge {i}");
        if e.subject >= g.nodes.len() || e.object >= g.nodes.len() {
            push(IssueKind::IndexOutOfRange, Severity::Violation, loc.clone());
        }
        if e.subject == e.object {
            push(IssueKind::SelfLoop, Severity::Violation, loc.clone());
        }
        if e.predicate.trim().is_empty() {
            push(IssueKind::EmptyPredicate, Severity::Violation, loc.clone());
        } else if vocab.relation_index(&e.predicate).is_none() {
            push(
                IssueKind::UnknownPredicate(e.predicate.clone()),
                Severity::Warning,
                loc.clone(),
            );
        }
        if !seen.insert((e.subject, e.object, e.predicate.as_str())) {
            push(IssueKind::DuplicateTriple, Severity::Violation, loc);
        }
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::all_base(vec!["man".into(), "horse".into()], vec!["riding".into()]).unwrap()
    }

    fn bx() -> BBox {
        BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()
    }

    #[test]
    fn empty_graph_is_clean() {
        assert!(validate_scene_graph(&SceneGraph::new("x"), &vocab()).is_empty());
    }

    #[test]
    fn self_loop_is_one_violation() {
        let mut g = SceneGraph::new("x");
        g.nodes.push(Node::new(bx(), "man"));
        g.edges.push(Edge::new(0, 0, "riding"));
        let r = validate_scene_graph(&g, &vocab());
        assert_eq!(r.violations().count(), 1);
        assert_eq!(r.issues[0].kind, IssueKind::SelfLoop);
        assert_eq!(r.warnings().count(), 0);
    }

    #[test]
    fn unknown_predicate_is_one_warning() {
        let mut g = SceneGraph::new("x");
        g.nodes.push(Node::new(bx(), "man"));
        g.nodes.push(Node::new(bx(), "horse"));
        g.edges.push(Edge::new(0, 1, "feeding"));
        let r = validate_scene_graph(&g, &vocab());
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].severity, Severity::Warning);
        assert_eq!(r.issues[0].kind, IssueKind::UnknownPredicate("feeding".into()));
        assert_eq!(r.issues[0].location, "edge 0");
    }

    #[test]
    fn duplicates_and_bad_indices() {
        let mut g = SceneGraph::new("x");
        g.nodes.push(Node::new(bx(), "man"));
        g.nodes.push(Node::new(bx(), "horse"));
        g.edges.push(Edge::new(0, 1, "riding"));
        g.edges.push(Edge::new(0, 1, "riding"));
        g.edges.push(Edge::new(0, 5, "riding"));
        let r = validate_scene_graph(&g, &vocab());
        let kinds: Vec<_> = r.violations().map(|i| i.kind.clone()).collect();
        assert_eq!(kinds, vec![IssueKind::DuplicateTriple, IssueKind::IndexOutOfRange]);
        assert_eq!(g.dedup_edges(), 1);
    }

    #[test]
    fn retain_nodes_reindexes_edges() {
        let mut g = SceneGraph::new("x");
        for c in ["man", "dog", "horse"] {
            g.nodes.push(Node::new(bx(), c));
        }
        g.edges.push(Edge::new(0, 2, "riding"));
        g.edges.push(Edge::new(1, 2, "near"));
        let dropped = g.retain_nodes(|n| n.concept != "dog");
        assert_eq!(dropped, 1);
        assert_eq!(g.edges, vec![Edge::new(0, 1, "riding")]);
    }
}
