use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TypesError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyWire {
    object_names: Vec<String>,
    relation_names: Vec<String>,
    base_object_mask: Vec<bool>,
    base_relation_mask: Vec<bool>,
}

/// Object and relation names with base/novel flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyWire", into = "VocabularyWire")]
pub struct Vocabulary {
    object_names: Vec<String>,
    relation_names: Vec<String>,
    base_object_mask: Vec<bool>,
    base_relation_mask: Vec<bool>,
    object_lookup: HashMap<String, usize>,
    relation_lookup: HashMap<String, usize>,
}

fn lookup(kind: &str, names: &[String]) -> Result<HashMap<String, usize>, TypesError> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if n.trim().is_empty() {
            return Err(TypesError::InvalidVocabulary(format!("empty {kind} name at {i}")));
        }
        if map.insert(n.clone(), i).is_some() {
            return Err(TypesError::InvalidVocabulary(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(map)
}

impl Vocabulary {
    pub fn new(
        object_names: Vec<String>,
        relation_names: Vec<String>,
        base_object_mask: Vec<bool>,
        base_relation_mask: Vec<bool>,
    ) -> Result<Self, TypesError> {
        if base_object_mask.len() != object_names.len() || base_relation_mask.len() != relation_names.len() {
            return Err(TypesError::InvalidVocabulary(format!(
                "mask lengths {}/{} do not match name counts {}/{}",
                base_object_mask.len(),
                base_relation_mask.len(),
                object_names.len(),
                relation_names.len()
            )));
        }
        Ok(Self {
            object_lookup: lookup("object", &object_names)?,
            relation_lookup: lookup("relation", &relation_names)?,
            object_names,
            relation_names,
            base_object_mask,
            base_relation_mask,
        })
    }

    /// A vocabulary with every name marked base.
    pub fn all_base(object_names: Vec<String>, relation_names: Vec<String>) -> Result<Self, TypesError> {
        let (no, nr) = (object_names.len(), relation_names.len());
        Self::new(object_names, relation_names, vec![true; no], vec![true; nr])
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn base_object_mask(&self) -> &[bool] {
        &self.base_object_mask
    }

    pub fn base_relation_mask(&self) -> &[bool] {
        &self.base_relation_mask
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_lookup.get(name).copied()
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_lookup.get(name).copied()
    }

    pub fn is_novel_object(&self, name: &str) -> bool {
        self.object_index(name).is_some_and(|i| !self.base_object_mask[i])
    }

    pub fn is_novel_relation(&self, name: &str) -> bool {
        self.relation_index(name).is_some_and(|i| !self.base_relation_mask[i])
    }

    fn pick(names: &[String], mask: &[bool], want: bool) -> Vec<String> {
        names
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m == want)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn base_objects(&self) -> Vec<String> {
        Self::pick(&self.object_names, &self.base_object_mask, true)
    }

    pub fn novel_objects(&self) -> Vec<String> {
        Self::pick(&self.object_names, &self.base_object_mask, false)
    }

    pub fn base_relations(&self) -> Vec<String> {
        Self::pick(&self.relation_names, &self.base_relation_mask, true)
    }

    pub fn novel_relations(&self) -> Vec<String> {
        Self::pick(&self.relation_names, &self.base_relation_mask, false)
    }

    /// Same names, base names only, all marked base.
    pub fn base_only(&self) -> Vocabulary {
        Vocabulary::all_base(self.base_objects(), self.base_relations())
            .expect("subset of a valid vocabulary")
    }

    pub fn with_masks(&self, objects: Vec<bool>, relations: Vec<bool>) -> Result<Vocabulary, TypesError> {
        Vocabulary::new(
            self.object_names.clone(),
            self.relation_names.clone(),
            objects,
            relations,
        )
    }

    /// Replaces one object or relation name in place, keeping its position and mask.
    pub fn rename(&self, from: &str, to: &str) -> Result<Vocabulary, TypesError> {
        let swap = |names: &[String]| -> Vec<String> {
            names
                .iter()
                .map(|n| if n == from { to.to_string() } else { n.clone() })
                .collect()
        };
        Vocabulary::new(
            swap(&self.object_names),
            swap(&self.relation_names),
            self.base_object_mask.clone(),
            self.base_relation_mask.clone(),
        )
    }
}

impl TryFrom<VocabularyWire> for Vocabulary {
    type Error = TypesError;
    fn try_from(w: VocabularyWire) -> Result<Self, Self::Error> {
        Vocabulary::new(
            w.object_names,
            w.relation_names,
            w.base_object_mask,
            w.base_relation_mask,
        )
    }
}

impl From<Vocabulary> for VocabularyWire {
    fn from(v: Vocabulary) -> Self {
        VocabularyWire {
            object_names: v.object_names,
            relation_names: v.relation_names,
            base_object_mask: v.base_object_mask,
            base_relation_mask: v.base_relation_mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_bad_masks() {
        assert!(Vocabulary::all_base(vec!["a".into(), "a".into()], vec![]).is_err());
        assert!(Vocabulary::new(vec!["a".into()], vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn novel_queries_follow_masks() {
        let v = Vocabulary::new(
            vec!["cat".into(), "dog".into()],
            vec!["on".into(), "near".into()],
            vec![true, false],
            vec![false, true],
        )
        .unwrap();
        assert!(v.is_novel_object("dog"));
        assert!(!v.is_novel_object("cat"));
        assert!(!v.is_novel_object("zebra"));
        assert_eq!(v.novel_relations(), vec!["on".to_string()]);
        assert_eq!(v.base_only().object_names(), &["cat".to_string()]);
    }

    #[test]
    fn json_round_trip_rejects_unknown_keys() {
        let v = Vocabulary::all_base(vec!["cat".into()], vec!["on".into()]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&s).unwrap(), v);
        let bad = s.replacen('{', "{\"extra\":1,", 1);
        assert!(serde_json::from_str::<Vocabulary>(&bad).is_err());
    }
}
