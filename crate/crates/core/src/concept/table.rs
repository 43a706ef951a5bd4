use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ConceptError;
use crate::numerics::Tensor;

pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Fixture,
    File,
}

/// Where concept embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedMode {
    Fixture { dim: usize },
    File { manifest: PathBuf },
}

impl Default for EmbedMode {
    fn default() -> Self {
        EmbedMode::Fixture {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

/// Deterministic unit vector derived from the bytes of `name`.
pub fn fixture_embedding(name: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(name.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Frozen name → unit-vector table standing in for a text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTable {
    dim: usize,
    provenance: Provenance,
    entries: IndexMap<String, Vec<f64>>,
    aliases: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub names: Vec<String>,
    pub dim: usize,
    /// Blob file name relative to the manifest; defaults to `<stem>.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
}

impl ConceptTable {
    pub fn fixture<S: AsRef<str>>(names: &[S], dim: usize) -> Result<Self, ConceptError> {
        if names.is_empty() {
            return Err(ConceptError::EmptyVocabulary);
        }
        let entries = names
            .iter()
            .map(|n| (n.as_ref().to_string(), fixture_embedding(n.as_ref(), dim)))
            .collect();
        Ok(Self {
            dim,
            provenance: Provenance::Fixture,
            entries,
            aliases: BTreeMap::new(),
        })
    }

    /// Loads embeddings for `names` from an embedding file. Names absent from the file
    /// but made of words that are present get the renormalized mean of those words.
    pub fn from_file<S: AsRef<str>>(names: &[S], manifest_path: &Path) -> Result<Self, ConceptError> {
        if names.is_empty() {
            return Err(ConceptError::EmptyVocabulary);
        }
        let file = read_embedding_file(manifest_path)?;
        let mut entries = IndexMap::new();
        let mut missing = Vec::new();
        for n in names {
            let n = n.as_ref();
            if let Some(v) = file.get(n) {
                entries.insert(n.to_string(), v.clone());
                continue;
            }
            let words: Vec<&Vec<f64>> = n.split_whitespace().filter_map(|w| file.get(w)).collect();
            if words.len() > 1 && words.len() == n.split_whitespace().count() {
                let mut mean = vec![0.0; words[0].len()];
                for w in &words {
                    mean.iter_mut().zip(w.iter()).for_each(|(m, x)| *m += x);
                }
                normalize(&mut mean);
                entries.insert(n.to_string(), mean);
            } else {
                missing.push(n.to_string());
            }
        }
        if !missing.is_empty() {
            return Err(ConceptError::MissingNames(missing));
        }
        let dim = entries.values().next().map_or(0, Vec::len);
        Ok(Self {
            dim,
            provenance: Provenance::File,
            entries,
            aliases: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Embedding for `name`, falling back to the fixture embedder for unknown names.
    pub fn get_or_fixture(&self, name: &str) -> Cow<'_, [f64]> {
        match self.get(name) {
            Some(v) => Cow::Borrowed(v),
            None => Cow::Owned(fixture_embedding(name, self.dim)),
        }
    }

    /// Registers `alias` as a synonym sharing `target`'s vector.
    pub fn with_alias(mut self, alias: &str, target: &str) -> Result<Self, ConceptError> {
        let v = self
            .get(target)
            .ok_or_else(|| ConceptError::UnknownName(target.to_string()))?
            .to_vec();
        self.entries.insert(alias.to_string(), v);
        self.aliases.insert(alias.to_string(), target.to_string());
        Ok(self)
    }

    pub fn with_aliases(self, map: &BTreeMap<String, String>) -> Result<Self, ConceptError> {
        map.iter().try_fold(self, |t, (a, c)| t.with_alias(a, c))
    }

    /// Adds fixture vectors for names not yet present.
    pub fn extended<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        for n in names {
            let n = n.as_ref();
            if !self.entries.contains_key(n) {
                let v = fixture_embedding(n, self.dim);
                self.entries.insert(n.to_string(), v);
            }
        }
        self
    }

    /// Stacks the embeddings of `names` into a `len × dim` matrix.
    pub fn matrix<S: AsRef<str>>(&self, names: &[S]) -> Result<Tensor, ConceptError> {
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for n in names {
            let v = self
                .get(n.as_ref())
                .ok_or_else(|| ConceptError::UnknownName(n.as_ref().to_string()))?;
            data.extend_from_slice(v);
        }
        Ok(Tensor::matrix(names.len(), self.dim, data)?)
    }

    /// Hex SHA-256 over all names and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in &self.entries {
            h.update(n.as_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads an embedding manifest and blob into a name → vector map (vectors normalized).
pub fn read_embedding_file(manifest_path: &Path) -> Result<HashMap<String, Vec<f64>>, ConceptError> {
    let io = |e: std::io::Error, p: &Path| ConceptError::Io(format!("{}: {e}", p.display()));
    let text = fs::read_to_string(manifest_path).map_err(|e| io(e, manifest_path))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text)?;
    let blob_path = blob_path(manifest_path, &manifest);
    let bytes = fs::read(&blob_path).map_err(|e| io(e, &blob_path))?;
    let expected = manifest.names.len() * manifest.dim * 8;
    if bytes.len() != expected {
        return Err(ConceptError::DimensionMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let mut out = HashMap::with_capacity(manifest.names.len());
    for (i, name) in manifest.names.iter().enumerate() {
        let start = i * manifest.dim * 8;
        let mut v: Vec<f64> = bytes[start..start + manifest.dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ConceptError::Io(format!("non-finite embedding for {name:?}")));
        }
        normalize(&mut v);
        out.insert(name.clone(), v);
    }
    Ok(out)
}

fn blob_path(manifest_path: &Path, manifest: &EmbeddingManifest) -> PathBuf {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    match &manifest.blob {
        Some(b) => dir.join(b),
        None => manifest_path.with_extension("bin"),
    }
}

/// Writes `table` in the embedding file format (manifest + `<stem>.bin`).
pub fn write_embedding_file(manifest_path: &Path, table: &ConceptTable) -> Result<(), ConceptError> {
    let io = |e: std::io::Error| ConceptError::Io(format!("{}: {e}", manifest_path.display()));
    let manifest = EmbeddingManifest {
        names: table.names().map(str::to_string).collect(),
        dim: table.dim(),
        blob: None,
    };
    let mut blob = Vec::with_capacity(table.len() * table.dim() * 8);
    for n in &manifest.names {
        for x in table.get(n).expect("listed name") {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = manifest_path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(manifest_path.with_extension("bin"), blob).map_err(io)?;
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(io)?;
    Ok(())
}

/// Reads an alias file (`{"alias": "canonical", ...}`).
pub fn read_alias_file(path: &Path) -> Result<BTreeMap<String, String>, ConceptError> {
    let text = fs::read_to_string(path).map_err(|e| ConceptError::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Builds a concept table for `names` in the requested mode.
pub fn embed_concepts<S: AsRef<str>>(names: &[S], mode: &EmbedMode) -> Result<ConceptTable, ConceptError> {
    match mode {
        EmbedMode::Fixture { dim } => ConceptTable::fixture(names, *dim),
        EmbedMode::File { manifest } => ConceptTable::from_file(names, manifest),
    }
}
