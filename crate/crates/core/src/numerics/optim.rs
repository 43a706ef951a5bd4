use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: Some(5.0),
        }
    }
}

/// Mini-batch gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: HashMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), NumericsError> {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let factor = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.trainable => {}
                _ => continue,
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (v, gi) in vel.iter_mut().zip(g.data()) {
                *v = self.cfg.momentum * *v + factor * gi;
            }
            let lr = self.cfg.learning_rate;
            params.update(name, |data| {
                for (d, v) in data.iter_mut().zip(vel.iter()) {
                    *d -= lr * v;
                }
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0), true).unwrap();
        store.insert("frozen", Tensor::scalar(1.0), false).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            clip_norm: None,
        });
        for _ in 0..200 {
            let mut g = Graph::new(&store);
            let x = g.param("x").unwrap();
            let f = g.param("frozen").unwrap();
            let d = g.sub(x, f).unwrap();
            let sq = g.mul(d, d).unwrap();
            let grads = g.backward(sq).unwrap();
            opt.step(&mut store, &grads).unwrap();
        }
        assert!((store.tensor("x").unwrap().item() - 1.0).abs() < 1e-6);
        assert_eq!(store.tensor("frozen").unwrap().item(), 1.0);
    }
}
