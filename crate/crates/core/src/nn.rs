//! Named parameter sets, layer helpers, and the AdamW optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.0
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows, t.cols)))
                .collect(),
        )
    }

    /// Place every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
                .collect(),
        )
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// SHA-256 over names, shapes, and little-endian values.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.0 {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    /// Flat view of every scalar, in name order.
    pub fn flat_len_offsets(&self) -> Vec<(String, usize)> {
        let mut offset = 0;
        self.0
            .iter()
            .map(|(k, t)| {
                let o = offset;
                offset += t.len();
                (k.clone(), o)
            })
            .collect()
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("missing bound parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.0.get(name).copied()
    }

    /// Collect gradients for every bound tensor; missing ones become zeros.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, &v)| {
                    let t = grads.get(v).cloned().unwrap_or_else(|| {
                        let val = g.value(v);
                        Tensor::zeros(val.rows, val.cols)
                    });
                    (k.clone(), t)
                })
                .collect(),
        )
    }
}

/// `x · W + b` with `W` stored as `in × out`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// LeCun-normal weight (`in × out`) and zero bias.
pub fn init_linear(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let std = (1.0 / fan_in as f64).sqrt();
    let w = Tensor::new(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.normal() * std).collect(),
    );
    (w, Tensor::zeros(1, fan_out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
}

impl AdamWSettings {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64, grad_clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            grad_clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
}

/// Scale `grads` in place so the global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> ClipReport {
    let pre = grads.global_norm();
    if pre > max_norm {
        let s = max_norm / pre;
        for (_, t) in grads.iter_mut() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }
    ClipReport {
        pre_clip_norm: pre,
        post_clip_norm: grads.global_norm(),
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub settings: AdamWSettings,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamW {
    pub fn new(settings: AdamWSettings, params: &ParamSet) -> Self {
        Self {
            settings,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &mut ParamSet) -> ClipReport {
        let report = match self.settings.grad_clip {
            Some(c) => clip_global_norm(grads, c),
            None => {
                let n = grads.global_norm();
                ClipReport {
                    pre_clip_norm: n,
                    post_clip_norm: n,
                }
            }
        };
        self.step += 1;
        let AdamWSettings {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.settings;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            for (mi, gi) in m.data.iter_mut().zip(&g.data) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.get_mut(name);
            for (vi, gi) in v.data.iter_mut().zip(&g.data) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name), self.v.get(name));
            for ((pi, mi), vi) in p.data.iter_mut().zip(&m.data).zip(&v.data) {
                *pi -= lr * weight_decay * *pi;
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        report
    }
}
