use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_scene_graph, Edge, IssueKind, Node, SceneGraph, TypesError, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphWire {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    image_id: String,
    features: String,
    graph: GraphWire,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetWire {
    vocabulary: Vocabulary,
    records: Vec<RecordWire>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image_id: String,
    /// Reference into a feature store, `"<file>:<index>"`.
    pub features: String,
    pub graph: SceneGraph,
    pub caption: Option<String>,
    pub provenance: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub records: Vec<Record>,
}

/// Out-of-vocabulary names and structural problems found in a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetReport {
    pub oov_objects: BTreeSet<String>,
    pub oov_relations: BTreeSet<String>,
    pub violations: Vec<String>,
    pub duplicates_removed: usize,
}

impl DatasetReport {
    pub fn is_clean(&self) -> bool {
        self.oov_objects.is_empty() && self.oov_relations.is_empty() && self.violations.is_empty()
    }
}

impl Dataset {
    pub fn new(vocabulary: Vocabulary, records: Vec<Record>) -> Result<Self, TypesError> {
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(TypesError::DuplicateImageId(r.image_id.clone()));
            }
        }
        Ok(Self { vocabulary, records })
    }

    /// Parses the dataset JSON, deduplicating repeated triples.
    pub fn from_json(text: &str) -> Result<(Self, DatasetReport), TypesError> {
        let wire: DatasetWire = serde_json::from_str(text)?;
        let mut removed = 0;
        let records = wire
            .records
            .into_iter()
            .map(|r| {
                let mut graph = SceneGraph {
                    image_id: r.image_id.clone(),
                    nodes: r.graph.nodes,
                    edges: r.graph.edges,
                };
                removed += graph.dedup_edges();
                Record {
                    image_id: r.image_id,
                    features: r.features,
                    graph,
                    caption: r.caption,
                    provenance: r.provenance,
                }
            })
            .collect();
        let mut ds = Dataset::new(wire.vocabulary, records)?;
        if removed > 0 {
            log::warn!("removed {removed} duplicate triples while loading dataset");
        }
        ds.resolve();
        let mut report = ds.check();
        report.duplicates_removed = removed;
        Ok((ds, report))
    }

    pub fn to_json(&self) -> Result<String, TypesError> {
        let wire = DatasetWire {
            vocabulary: self.vocabulary.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordWire {
                    image_id: r.image_id.clone(),
                    features: r.features.clone(),
                    graph: GraphWire {
                        nodes: r.graph.nodes.clone(),
                        edges: r.graph.edges.clone(),
                    },
                    caption: r.caption.clone(),
                    provenance: r.provenance.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&wire)?)
    }

    pub fn load(path: &Path) -> Result<(Self, DatasetReport), TypesError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TypesError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TypesError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| TypesError::Io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| TypesError::Io(format!("{}: {e}", path.display())))
    }

    pub fn resolve(&mut self) {
        for r in &mut self.records {
            r.graph.resolve(&self.vocabulary);
        }
    }

    /// Validates every graph; out-of-vocabulary names are collected, not rejected.
    pub fn check(&self) -> DatasetReport {
        let mut report = DatasetReport::default();
        for r in &self.records {
            for issue in validate_scene_graph(&r.graph, &self.vocabulary).issues {
                match issue.kind {
                    IssueKind::UnknownConcept(n) => {
                        report.oov_objects.insert(n);
                    }
                    IssueKind::UnknownPredicate(n) => {
                        report.oov_relations.insert(n);
                    }
                    _ => report.violations.push(format!("{}: {issue}", r.image_id)),
                }
            }
        }
        report
    }

    pub fn get(&self, image_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn triplet_count(&self) -> usize {
        self.records.iter().map(|r| r.graph.edges.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
      "vocabulary": {"object_names": ["man", "horse"], "relation_names": ["riding"],
                     "base_object_mask": [true, true], "base_relation_mask": [true]},
      "records": [
        {"image_id": "a", "features": "features.bin:0",
         "graph": {"nodes": [{"box": [0.3, 0.3, 0.2, 0.4], "concept": "man"},
                             {"box": [0.5, 0.6, 0.5, 0.3], "concept": "zebra"}],
                   "edges": [{"s": 0, "o": 1, "p": "riding"}, {"s": 0, "o": 1, "p": "riding"}]},
         "caption": "a man riding a zebra"}
      ]
    }"#;

    #[test]
    fn load_dedups_and_flags_oov() {
        let (ds, report) = Dataset::from_json(SAMPLE).unwrap();
        assert_eq!(report.duplicates_removed, 1);
        assert_eq!(ds.records[0].graph.edges.len(), 1);
        assert!(report.oov_objects.contains("zebra"));
        assert!(report.violations.is_empty());
        assert_eq!(ds.records[0].graph.nodes[0].concept_id, Some(0));
        assert_eq!(ds.records[0].graph.nodes[1].concept_id, None);
    }

    #[test]
    fn round_trip_and_duplicate_ids() {
        let (ds, _) = Dataset::from_json(SAMPLE).unwrap();
        let (again, _) = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(again, ds);
        let mut records = ds.records.clone();
        records.push(ds.records[0].clone());
        assert!(matches!(
            Dataset::new(ds.vocabulary.clone(), records),
            Err(TypesError::DuplicateImageId(_))
        ));
    }

    #[test]
    fn unknown_record_fields_rejected() {
        let bad = SAMPLE.replace("\"caption\"", "\"captions\"");
        assert!(Dataset::from_json(&bad).is_err());
    }
}
