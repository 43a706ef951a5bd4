use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng;

use super::{FeatureMap, ModelConfig, ModelError};
use crate::concept::TextProjection;
use crate::numerics::{init_uniform, Graph, NumericsError, ParamStore, Tensor, Var};

const ANCHOR_EPS: f64 = 1e-5;

/// Graph outputs of the node decoder for one image.
#[derive(Clone, Debug)]
pub struct NodeOutput {
    /// `K × d` decoded node features.
    pub features: Var,
    /// `K × 4` boxes in `(cx, cy, w, h)`, each in `(0, 1)`.
    pub boxes: Var,
    /// `K × C` concept logits.
    pub logits: Var,
    /// Original token index each query was initialized from.
    pub tokens: Vec<usize>,
}

/// Parameter layout and forward pass of the scene-graph network.
#[derive(Clone, Debug)]
pub struct SceneGraphModel {
    cfg: ModelConfig,
    projection: TextProjection,
}

fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
    (x / (1.0 - x)).ln()
}

/// Sinusoidal encoding of anchor boxes: feature `j` encodes coordinate `j % 4`.
pub fn positional_encoding(anchors: &[[f64; 4]], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(anchors.len() * dim);
    for a in anchors {
        for j in 0..dim {
            let k = j / 4;
            let freq = PI * (k / 2 + 1) as f64;
            let x = a[j % 4] * freq;
            data.push(if k % 2 == 0 { x.sin() } else { x.cos() });
        }
    }
    Tensor::from_raw(vec![anchors.len(), dim], data)
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Token order that does not depend on the input layout: by anchor, then by feature values.
pub fn canonical_token_order(fm: &FeatureMap) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fm.tokens()).collect();
    order.sort_by(|&i, &j| {
        cmp_rows(&fm.anchors()[i].to_array(), &fm.anchors()[j].to_array())
            .then_with(|| cmp_rows(fm.features().row(i), fm.features().row(j)))
            .then(i.cmp(&j))
    });
    order
}

impl SceneGraphModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let projection = TextProjection::new("text_proj", cfg.node_dim, cfg.edge_dim);
        Ok(Self { cfg, projection })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn text_projection(&self) -> &TextProjection {
        &self.projection
    }

    /// Registers freshly initialized parameters.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore, ModelError> {
        let c = &self.cfg;
        let d = c.node_dim;
        let mut s = ParamStore::new();
        let mut linear = |s: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, zero: bool| {
            let w = if zero {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                init_uniform(&[fan_in, fan_out], fan_in, rng)
            };
            s.insert(&format!("{name}.weight"), w, true)?;
            s.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), true)
        };
        linear(&mut s, "input", c.feature_dim, d, false)?;
        for l in 0..c.decoder_layers {
            for part in ["q", "k", "v", "out"] {
                linear(&mut s, &format!("decoder.{l}.{part}"), d, d, false)?;
            }
            linear(&mut s, &format!("decoder.{l}.ffn.0"), d, c.ffn_dim, false)?;
            linear(&mut s, &format!("decoder.{l}.ffn.1"), c.ffn_dim, d, false)?;
        }
        linear(&mut s, "box.0", d, c.box_hidden, false)?;
        linear(&mut s, "box.1", c.box_hidden, c.box_hidden, false)?;
        linear(&mut s, "box.2", c.box_hidden, 4, true)?;
        linear(&mut s, "relation.mlp.0", 3 * d, c.relation_hidden, false)?;
        linear(&mut s, "relation.mlp.1", c.relation_hidden, c.edge_dim, false)?;
        s.insert("relation.query", init_uniform(&[c.relation_queries, d], d, rng), true)?;
        self.projection.init(&mut s, rng)?;
        Ok(s)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var, NumericsError> {
        let w = g.param(&format!("{name}.weight"))?;
        let b = g.param(&format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn attention(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var, NumericsError> {
        let heads = self.cfg.heads;
        let dh = self.cfg.node_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }

    /// Decodes `K` nodes from a feature map and scores them against `concepts` (`C × d`).
    pub fn forward_nodes(&self, g: &mut Graph, fm: &FeatureMap, concepts: &Tensor) -> Result<NodeOutput, ModelError> {
        let c = &self.cfg;
        let d = c.node_dim;
        if fm.feature_dim() != c.feature_dim {
            return Err(ModelError::Dimension(format!(
                "feature dim {} but model expects {}",
                fm.feature_dim(),
                c.feature_dim
            )));
        }
        if concepts.shape().len() != 2 || concepts.cols() != d || concepts.rows() == 0 {
            return Err(ModelError::Dimension(format!(
                "concept matrix {:?} does not match node dim {d}",
                concepts.shape()
            )));
        }
        let order = canonical_token_order(fm);
        let anchors: Vec<[f64; 4]> = order.iter().map(|&i| fm.anchors()[i].to_array()).collect();
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| fm.features().row(i).to_vec()).collect();
        let x = g.constant(Tensor::from_rows(&rows)?);
        let pos = positional_encoding(&anchors, d);

        let memory = self.linear(g, x, "input")?;
        let k_total = c.num_queries.min(fm.tokens());
        let selected = if k_total == fm.tokens() {
            (0..k_total).collect::<Vec<_>>()
        } else {
            let guide = g.value(memory).matmul(&concepts.transpose())?;
            let best: Vec<f64> = (0..guide.rows())
                .map(|r| guide.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut idx: Vec<usize> = (0..best.len()).collect();
            idx.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
            idx.truncate(k_total);
            idx.sort_unstable();
            idx
        };

        let pos_var = g.constant(pos.clone());
        let keys_in = g.add(memory, pos_var)?;
        let query_pos = {
            let qp: Vec<[f64; 4]> = selected.iter().map(|&i| anchors[i]).collect();
            g.constant(positional_encoding(&qp, d))
        };
        let mut queries = g.gather_rows(memory, &selected)?;
        for l in 0..c.decoder_layers {
            let p = format!("decoder.{l}");
            let q_in = g.add(queries, query_pos)?;
            let wq = g.param(&format!("{p}.q.weight"))?;
            let wk = g.param(&format!("{p}.k.weight"))?;
            let wv = g.param(&format!("{p}.v.weight"))?;
            let q = g.matmul(q_in, wq)?;
            let q = {
                let b = g.param(&format!("{p}.q.bias"))?;
                g.add_row(q, b)?
            };
            let k = g.matmul(keys_in, wk)?;
            let k = {
                let b = g.param(&format!("{p}.k.bias"))?;
                g.add_row(k, b)?
            };
            let v = g.matmul(memory, wv)?;
            let v = {
                let b = g.param(&format!("{p}.v.bias"))?;
                g.add_row(v, b)?
            };
            let attn = self.attention(g, q, k, v)?;
            let attn = self.linear(g, attn, &format!("{p}.out"))?;
            queries = g.add(queries, attn)?;
            let h = self.linear(g, queries, &format!("{p}.ffn.0"))?;
            let h = g.relu(h)?;
            let h = self.linear(g, h, &format!("{p}.ffn.1"))?;
            queries = g.add(queries, h)?;
        }

        let h = self.linear(g, queries, "box.0")?;
        let h = g.relu(h)?;
        let h = self.linear(g, h, "box.1")?;
        let h = g.relu(h)?;
        let delta = self.linear(g, h, "box.2")?;
        let reference: Vec<f64> = selected
            .iter()
            .flat_map(|&i| anchors[i].map(inverse_sigmoid))
            .collect();
        let reference = g.constant(Tensor::matrix(selected.len(), 4, reference)?);
        let boxes = g.add(delta, reference)?;
        let boxes = g.sigmoid(boxes)?;

        let concepts = g.constant(concepts.clone());
        let logits = g.matmul_t(queries, concepts)?;
        Ok(NodeOutput {
            features: queries,
            boxes,
            logits,
            tokens: selected.iter().map(|&i| order[i]).collect(),
        })
    }

    /// Edge features for ordered `(subject, object)` query pairs, averaged over relation queries.
    pub fn edge_features(&self, g: &mut Graph, nodes: Var, pairs: &[(usize, usize)]) -> Result<Var, ModelError> {
        let d = self.cfg.node_dim;
        let k = g.value(nodes).rows();
        for &(s, o) in pairs {
            if s == o {
                return Err(ModelError::SelfPair(s));
            }
            if s >= k || o >= k {
                return Err(ModelError::Dimension(format!("pair ({s}, {o}) with {k} nodes")));
            }
        }
        if pairs.is_empty() {
            return Err(ModelError::Dimension("no pairs".into()));
        }
        let subj: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let obj: Vec<usize> = pairs.iter().map(|p| p.1).collect();

        // The first layer acts on [v_s, v_o, r]; apply its three row blocks separately.
        let w0 = g.param("relation.mlp.0.weight")?;
        let b0 = g.param("relation.mlp.0.bias")?;
        let w_s = g.slice(w0, 0, 0, d)?;
        let w_o = g.slice(w0, 0, d, d)?;
        let w_r = g.slice(w0, 0, 2 * d, d)?;
        let hs = g.matmul(nodes, w_s)?;
        let ho = g.matmul(nodes, w_o)?;
        let hs = g.gather_rows(hs, &subj)?;
        let ho = g.gather_rows(ho, &obj)?;
        let pair_part = g.add(hs, ho)?;
        let rq = g.param("relation.query")?;
        let hr = g.matmul(rq, w_r)?;
        let hr = g.add_row(hr, b0)?;
        let w1 = g.param("relation.mlp.1.weight")?;
        let b1 = g.param("relation.mlp.1.bias")?;
        let mut per_query = Vec::with_capacity(self.cfg.relation_queries);
        for n in 0..g.value(rq).rows() {
            let r = g.slice(hr, 0, n, 1)?;
            let r = g.reshape(r, &[self.cfg.relation_hidden])?;
            let h = g.add_row(pair_part, r)?;
            let h = g.relu(h)?;
            let e = g.matmul(h, w1)?;
            per_query.push(g.add_row(e, b1)?);
        }
        Ok(g.mean_of(&per_query)?)
    }

    /// Relation logits `P × R` of edge features against projected relation embeddings (`R × d_t`).
    pub fn edge_logits(&self, g: &mut Graph, edges: Var, relations: &Tensor) -> Result<Var, ModelError> {
        if relations.shape().len() != 2 || relations.cols() != self.projection.text_dim() {
            return Err(ModelError::Dimension(format!(
                "relation matrix {:?} does not match text dim {}",
                relations.shape(),
                self.projection.text_dim()
            )));
        }
        let words = g.constant(relations.clone());
        let projected = self.projection.apply(g, words)?;
        Ok(g.matmul_t(edges, projected)?)
    }
}
