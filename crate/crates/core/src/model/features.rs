use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::Tensor;
use crate::types::BBox;

pub const FEATURE_FORMAT: &str = "ovsg-features-v1";

/// Frozen visual tokens for one image: a feature row and an anchor box per token.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    features: Tensor,
    anchors: Vec<BBox>,
}

impl FeatureMap {
    pub fn new(features: Tensor, anchors: Vec<BBox>) -> Result<Self, ModelError> {
        if features.shape().len() != 2 || features.rows() != anchors.len() || anchors.is_empty() {
            return Err(ModelError::Dimension(format!(
                "feature map {:?} with {} anchors",
                features.shape(),
                anchors.len()
            )));
        }
        if !features.is_finite() {
            return Err(ModelError::Dimension("feature map has non-finite values".into()));
        }
        Ok(Self { features, anchors })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn tokens(&self) -> usize {
        self.anchors.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Reorders tokens: token `i` of the result is token `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, ModelError> {
        let mut seen = vec![false; self.tokens()];
        for &p in perm {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(ModelError::Dimension(format!("{perm:?} is not a permutation")));
            }
        }
        if perm.len() != self.tokens() {
            return Err(ModelError::Dimension(format!("{perm:?} is not a permutation")));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.features.row(p).to_vec()).collect();
        Self::new(
            Tensor::from_rows(&rows)?,
            perm.iter().map(|&p| self.anchors[p]).collect(),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreManifest {
    format: String,
    count: usize,
    tokens: usize,
    feature_dim: usize,
}

/// A list of same-shaped feature maps stored as `<name>.bin` plus `<name>.json`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    maps: Vec<FeatureMap>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a map and returns its index.
    pub fn push(&mut self, map: FeatureMap) -> Result<usize, ModelError> {
        if let Some(first) = self.maps.first() {
            if first.tokens() != map.tokens() || first.feature_dim() != map.feature_dim() {
                return Err(ModelError::Dimension(format!(
                    "feature map {}×{} does not match store shape {}×{}",
                    map.tokens(),
                    map.feature_dim(),
                    first.tokens(),
                    first.feature_dim()
                )));
            }
        }
        self.maps.push(map);
        Ok(self.maps.len() - 1)
    }

    pub fn get(&self, index: usize) -> Option<&FeatureMap> {
        self.maps.get(index)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn save(&self, blob_path: &Path) -> Result<(), ModelError> {
        let first = self
            .maps
            .first()
            .ok_or_else(|| ModelError::Io("refusing to write an empty feature store".into()))?;
        let manifest = StoreManifest {
            format: FEATURE_FORMAT.into(),
            count: self.maps.len(),
            tokens: first.tokens(),
            feature_dim: first.feature_dim(),
        };
        let mut bytes = Vec::new();
        for m in &self.maps {
            for x in m.features.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            for b in &m.anchors {
                for x in b.to_array() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let io = |e: std::io::Error| ModelError::Io(format!("{}: {e}", blob_path.display()));
        if let Some(dir) = blob_path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(blob_path, bytes).map_err(io)?;
        fs::write(manifest_path(blob_path), serde_json::to_vec_pretty(&manifest)?).map_err(io)?;
        Ok(())
    }

    pub fn load(blob_path: &Path) -> Result<Self, ModelError> {
        let mpath = manifest_path(blob_path);
        let io = |e: std::io::Error, p: &Path| ModelError::Io(format!("{}: {e}", p.display()));
        let manifest: StoreManifest =
            serde_json::from_slice(&fs::read(&mpath).map_err(|e| io(e, &mpath))?)?;
        if manifest.format != FEATURE_FORMAT {
            return Err(ModelError::Io(format!("unsupported feature format {:?}", manifest.format)));
        }
        let bytes = fs::read(blob_path).map_err(|e| io(e, blob_path))?;
        let per_map = manifest.tokens * (manifest.feature_dim + 4);
        if bytes.len() != manifest.count * per_map * 8 {
            return Err(ModelError::Io(format!(
                "{}: expected {} bytes, found {}",
                blob_path.display(),
                manifest.count * per_map * 8,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = FeatureStore::new();
        let nf = manifest.tokens * manifest.feature_dim;
        for chunk in values.chunks_exact(per_map.max(1)) {
            let features = Tensor::new(vec![manifest.tokens, manifest.feature_dim], chunk[..nf].to_vec())?;
            let anchors = chunk[nf..]
                .chunks_exact(4)
                .map(|a| BBox::new(a[0], a[1], a[2], a[3]))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ModelError::Io(e.to_string()))?;
            store.push(FeatureMap::new(features, anchors)?)?;
        }
        Ok(store)
    }
}

fn manifest_path(blob_path: &Path) -> PathBuf {
    blob_path.with_extension("json")
}

/// Splits a `"<file>:<index>"` feature reference.
pub fn parse_feature_ref(reference: &str) -> Result<(&str, usize), ModelError> {
    let (file, idx) = reference
        .rsplit_once(':')
        .ok_or_else(|| ModelError::Io(format!("bad feature reference {reference:?}")))?;
    let idx = idx
        .parse()
        .map_err(|_| ModelError::Io(format!("bad feature index in {reference:?}")))?;
    Ok((file, idx))
}

/// Resolves feature references relative to a dataset directory, loading each store once.
#[derive(Debug)]
pub struct FeatureCache {
    root: PathBuf,
    stores: HashMap<String, FeatureStore>,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            stores: HashMap::new(),
        }
    }

    pub fn insert(&mut self, file: impl Into<String>, store: FeatureStore) {
        self.stores.insert(file.into(), store);
    }

    pub fn get(&mut self, reference: &str) -> Result<&FeatureMap, ModelError> {
        let (file, idx) = parse_feature_ref(reference)?;
        if !self.stores.contains_key(file) {
            let store = FeatureStore::load(&self.root.join(file))?;
            self.stores.insert(file.to_string(), store);
        }
        self.stores[file]
            .get(idx)
            .ok_or_else(|| ModelError::Io(format!("feature reference {reference:?} out of range")))
    }

    /// Looks up an already loaded reference.
    pub fn peek(&self, reference: &str) -> Result<&FeatureMap, ModelError> {
        let (file, idx) = parse_feature_ref(reference)?;
        self.stores
            .get(file)
            .and_then(|s| s.get(idx))
            .ok_or_else(|| ModelError::Io(format!("feature reference {reference:?} not loaded")))
    }

    /// Loads every reference in `refs` so that later lookups can use [`FeatureCache::peek`].
    pub fn preload<'a>(&mut self, refs: impl IntoIterator<Item = &'a str>) -> Result<(), ModelError> {
        for r in refs {
            self.get(r)?;
        }
        Ok(())
    }
}
