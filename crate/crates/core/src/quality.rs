//! Quality assurance: level-token softmax, expected score, quality loss, and
//! a differentiable mock scorer.
//!
//! The five quality levels are ordered `bad, poor, fair, good, excellent`
//! and carry the scores `1..=5`. A scorer emits one logit per level; the
//! score is the expectation of the level score under the level softmax.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{RunConfig, DEFAULT_QUALITY_CENTERS};
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 5;
pub const LEVEL_NAMES: [&str; NUM_LEVELS] = ["bad", "poor", "fair", "good", "excellent"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelLogits(pub [f64; NUM_LEVELS]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDistribution([f64; NUM_LEVELS]);

impl LevelDistribution {
    pub fn new(probs: [f64; NUM_LEVELS]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64; NUM_LEVELS] {
        &self.0
    }
}

/// Closed-set softmax over the level logits (max-subtracted).
pub fn level_probabilities(logits: &LevelLogits) -> Result<LevelDistribution> {
    if logits.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("level logits"));
    }
    let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.0.map(|x| (x - max).exp());
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(LevelDistribution(p))
}

/// `S = Σ_i i · p_i` with level scores `1..=5`.
pub fn quality_score(dist: &LevelDistribution) -> f64 {
    dist.0
        .iter()
        .enumerate()
        .map(|(i, p)| (i + 1) as f64 * p)
        .sum()
}

/// `L_q = 1 − S/5`.
pub fn quality_loss(score: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&score) {
        return Err(Error::ScoreOutOfRange(score));
    }
    Ok(1.0 - score / 5.0)
}

/// Anything that rates images on the five-level scale.
///
/// `level_logits_graph` must be differentiable with respect to the pixel
/// rows it is given; fine-tuning backpropagates through it.
pub trait QualityScorer: Send + Sync {
    fn level_logits(&self, image: &ToyImage) -> LevelLogits;

    /// Logits for a batch of flattened images (`n × H·W·3`) → `n × 5`.
    fn level_logits_graph(&self, g: &mut Graph, pixels: Var, resolution: usize) -> Var;

    fn score(&self, image: &ToyImage) -> f64 {
        let dist = level_probabilities(&self.level_logits(image)).expect("scorer emits finite logits");
        quality_score(&dist)
    }
}

/// Differentiable graph tail: logits (`n × 5`) → per-image `L_q` (`n × 1`).
pub fn quality_loss_graph(g: &mut Graph, logits: Var) -> Var {
    let p = g.softmax_rows(logits);
    let levels = g.constant(Tensor::new(NUM_LEVELS, 1, (1..=NUM_LEVELS).map(|i| i as f64).collect()));
    let score = g.matmul(p, levels);
    let scaled = g.scale(score, -0.2);
    g.add_scalar(scaled, 1.0)
}

/// Total-variation scorer: `tv` is the mean smoothed absolute difference of
/// horizontally and vertically adjacent values; level `i` has logit
/// `−β (tv − μ_i)²`, with `μ` decreasing from bad to excellent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScorer {
    pub centers: [f64; NUM_LEVELS],
    pub beta: f64,
    /// Smoothing of |d| as `sqrt(d² + ε²) − ε`.
    pub tv_eps: f64,
}

impl Default for MockScorer {
    fn default() -> Self {
        Self {
            centers: DEFAULT_QUALITY_CENTERS,
            beta: 200.0,
            tv_eps: 1e-3,
        }
    }
}

fn neighbor_pairs(resolution: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for y in 0..resolution {
        for x in 0..resolution {
            for c in 0..3 {
                if x + 1 < resolution {
                    a.push(ToyImage::index(resolution, y, x, c));
                    b.push(ToyImage::index(resolution, y, x + 1, c));
                }
                if y + 1 < resolution {
                    a.push(ToyImage::index(resolution, y, x, c));
                    b.push(ToyImage::index(resolution, y + 1, x, c));
                }
            }
        }
    }
    (a, b)
}

impl MockScorer {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            centers: cfg.quality_centers,
            beta: cfg.quality_beta,
            ..Self::default()
        }
    }

    pub fn total_variation(&self, image: &ToyImage) -> f64 {
        let (a, b) = neighbor_pairs(image.resolution());
        let px = image.pixels();
        let eps = self.tv_eps;
        let sum: f64 = a
            .iter()
            .zip(&b)
            .map(|(&i, &j)| {
                let d = px[i] - px[j];
                (d * d + eps * eps).sqrt() - eps
            })
            .sum();
        sum / a.len() as f64
    }

    fn logits_from_tv(&self, tv: f64) -> LevelLogits {
        LevelLogits(self.centers.map(|mu| -self.beta * (tv - mu) * (tv - mu)))
    }
}

impl QualityScorer for MockScorer {
    fn level_logits(&self, image: &ToyImage) -> LevelLogits {
        self.logits_from_tv(self.total_variation(image))
    }

    fn level_logits_graph(&self, g: &mut Graph, pixels: Var, resolution: usize) -> Var {
        let (a, b) = neighbor_pairs(resolution);
        let n_pairs = a.len();
        let left = g.gather_cols(pixels, Rc::new(a));
        let right = g.gather_cols(pixels, Rc::new(b));
        let d = g.sub(left, right);
        let d = g.smooth_abs(d, self.tv_eps);
        let tv = g.sum_cols(d);
        let tv = g.scale(tv, 1.0 / n_pairs as f64);
        let ones = g.constant(Tensor::full(1, NUM_LEVELS, 1.0));
        let tv5 = g.matmul(tv, ones);
        let neg_mu = g.constant(Tensor::row(self.centers.iter().map(|m| -m).collect()));
        let diff = g.add_row(tv5, neg_mu);
        let sq = g.square(diff);
        g.scale(sq, -self.beta)
    }
}
