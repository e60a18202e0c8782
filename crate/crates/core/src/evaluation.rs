//! Bias metrics (texture inclination, context bias, background gap), the
//! linear-probe transfer harness, few-shot curves, and a small pixel-MLP
//! classifier used as the backbone trained on synthetic data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoder::stack_images;
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::nn::{init_linear, linear, AdamW, AdamWSettings, ParamSet};
use crate::rng::{derive_stream, RngStream};
use crate::tensor::Tensor;
use crate::worldgen::{LabeledImage, World};

pub const DEFAULT_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.2, 0.1];
pub const PROBE_TOLERANCE: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 2000;

// ---------------------------------------------------------------------------
// Metric kernels

/// Accuracy per number of uncommon attributes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionAccuracyTable {
    pub acc: BTreeMap<u8, f64>,
    pub counts: BTreeMap<u8, usize>,
}

impl PartitionAccuracyTable {
    /// Table from explicit per-partition accuracies (`acc[k]` for `k = 0..`).
    pub fn from_accuracies(acc: &[f64]) -> Self {
        Self {
            acc: acc.iter().enumerate().map(|(k, &a)| (k as u8, a)).collect(),
            counts: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueConflictDecision {
    pub shape_class: usize,
    pub texture_class: usize,
    pub predicted_class: usize,
}

/// Percentage of cue-matching decisions that follow texture. Decisions that
/// match neither cue are left out of both counts.
pub fn texture_inclination(decisions: &[CueConflictDecision]) -> Result<f64> {
    let mut texture = 0usize;
    let mut shape = 0usize;
    for d in decisions {
        if d.shape_class == d.texture_class {
            return Err(Error::SameCuePair(d.shape_class));
        }
        if d.predicted_class == d.texture_class {
            texture += 1;
        } else if d.predicted_class == d.shape_class {
            shape += 1;
        }
    }
    if texture + shape == 0 {
        return Err(Error::metric("texture_inclination", "no decision matches either cue"));
    }
    Ok(100.0 * texture as f64 / (texture + shape) as f64)
}

/// `100 · mean_{k=1..3} acc_k / acc_0`.
pub fn context_bias_avg(table: &PartitionAccuracyTable) -> Result<f64> {
    let get = |k: u8| {
        table
            .acc
            .get(&k)
            .copied()
            .ok_or_else(|| Error::metric("context_bias_avg", format!("partition P_{k} is missing")))
    };
    let acc0 = get(0)?;
    if acc0 <= 0.0 {
        return Err(Error::metric("context_bias_avg", "accuracy on P_0 is zero; the ratio is undefined"));
    }
    let mut sum = 0.0;
    for k in 1..=3 {
        sum += get(k)? / acc0;
    }
    Ok(100.0 * sum / 3.0)
}

/// `100 · (acc_mixed_same − acc_mixed_rand)`.
pub fn background_gap(acc_mixed_same: f64, acc_mixed_rand: f64) -> Result<f64> {
    for v in [acc_mixed_same, acc_mixed_rand] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::metric("background_gap", format!("accuracy {v} outside [0, 1]")));
        }
    }
    Ok(100.0 * (acc_mixed_same - acc_mixed_rand))
}

/// Group `(uncommon_count, true_class)` items with their predictions.
pub fn partition_counts(items: &[(u8, usize)], predictions: &[usize]) -> Result<PartitionAccuracyTable> {
    if items.len() != predictions.len() {
        return Err(Error::metric(
            "partition_by_uncommon",
            format!("{} items but {} predictions", items.len(), predictions.len()),
        ));
    }
    let mut correct: BTreeMap<u8, usize> = BTreeMap::new();
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for (&(k, label), &pred) in items.iter().zip(predictions) {
        *counts.entry(k).or_insert(0) += 1;
        *correct.entry(k).or_insert(0) += (label == pred) as usize;
    }
    let acc = counts
        .iter()
        .map(|(&k, &n)| (k, correct[&k] as f64 / n as f64))
        .collect();
    Ok(PartitionAccuracyTable { acc, counts })
}

pub fn partition_by_uncommon(images: &[LabeledImage], predictions: &[usize]) -> Result<PartitionAccuracyTable> {
    let items: Vec<(u8, usize)> = images.iter().map(|li| (li.uncommon_count, li.class_id)).collect();
    partition_counts(&items, predictions)
}

pub fn accuracy(labels: &[usize], predictions: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().zip(predictions).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub iterations: usize,
}

/// Features and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::metric("probe", "feature and label counts differ"));
        }
        if let Some(d) = features.first().map(Vec::len) {
            if features.iter().any(|f| f.len() != d) {
                return Err(Error::metric("probe", "ragged feature rows"));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Multinomial logistic regression: weights `d × C` and bias `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
}

impl LogisticModel {
    pub fn logits(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &self.weights[j * self.classes..(j + 1) * self.classes];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xj * w;
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(x, &mut z);
        argmax(&z)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient of `mean CE + l2/(2N)·‖W‖²` at `(w, b)`; returns the loss.
fn probe_gradient(data: &LabeledFeatures, model: &LogisticModel, l2: f64, gw: &mut [f64], gb: &mut [f64]) -> f64 {
    let n = data.len() as f64;
    let c = model.classes;
    gw.iter_mut().for_each(|g| *g = 0.0);
    gb.iter_mut().for_each(|g| *g = 0.0);
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        model.logits(x, &mut z);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in z.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        loss += s.ln() + m - (model.bias[y] + dot_col(model, x, y));
        for v in z.iter_mut() {
            *v /= s;
        }
        z[y] -= 1.0;
        for (j, &xj) in x.iter().enumerate() {
            let row = &mut gw[j * c..(j + 1) * c];
            for (g, p) in row.iter_mut().zip(&z) {
                *g += xj * p;
            }
        }
        for (g, p) in gb.iter_mut().zip(&z) {
            *g += p;
        }
    }
    let mut reg = 0.0;
    for (g, w) in gw.iter_mut().zip(&model.weights) {
        *g = *g / n + l2 / n * w;
        reg += w * w;
    }
    gb.iter_mut().for_each(|g| *g /= n);
    loss / n + l2 / (2.0 * n) * reg
}

fn dot_col(model: &LogisticModel, x: &[f64], class: usize) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &xj)| xj * model.weights[j * model.classes + class])
        .sum()
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1] / N` by power iteration.
fn curvature_bound(data: &LabeledFeatures, rng: &mut RngStream) -> f64 {
    let d = data.dim() + 1;
    let n = data.len() as f64;
    let mut v: Vec<f64> = rng.normals(d);
    let mut lambda = 1.0;
    for _ in 0..50 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v.iter_mut().for_each(|x| *x /= norm);
        let mut out = vec![0.0; d];
        for x in &data.features {
            let s: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (o, xi) in out.iter_mut().zip(x.iter().chain(std::iter::once(&1.0))) {
                *o += s * xi / n;
            }
        }
        lambda = out.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = out;
    }
    lambda.max(1e-12)
}

/// Fit a multinomial logistic regression by full-batch Nesterov gradient
/// descent until the gradient norm falls below `tolerance` or `max_iters`.
pub fn fit_logistic(data: &LabeledFeatures, num_classes: usize, l2: f64, max_iters: usize, tolerance: f64, seed: u64) -> Result<(LogisticModel, usize)> {
    let distinct: std::collections::BTreeSet<usize> = data.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::metric("linear_probe", "training labels contain fewer than two classes"));
    }
    if let Some(&max) = distinct.iter().next_back() {
        if max >= num_classes {
            return Err(Error::ClassOutOfRange {
                class_id: max,
                num_classes,
            });
        }
    }
    let d = data.dim();
    let c = num_classes;
    let n = data.len() as f64;
    let lipschitz = 0.5 * curvature_bound(data, &mut derive_stream(seed, "probe-curvature")) + l2 / n;
    let lr = 1.0 / lipschitz;
    let mut model = LogisticModel {
        weights: vec![0.0; d * c],
        bias: vec![0.0; c],
        dim: d,
        classes: c,
    };
    let mut prev_w = model.weights.clone();
    let mut prev_b = model.bias.clone();
    let mut look = model.clone();
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut iters = 0;
    for k in 0..max_iters {
        iters = k + 1;
        let mom = k as f64 / (k as f64 + 3.0);
        for i in 0..d * c {
            look.weights[i] = model.weights[i] + mom * (model.weights[i] - prev_w[i]);
        }
        for i in 0..c {
            look.bias[i] = model.bias[i] + mom * (model.bias[i] - prev_b[i]);
        }
        probe_gradient(data, &look, l2, &mut gw, &mut gb);
        let gnorm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        prev_w.copy_from_slice(&model.weights);
        prev_b.copy_from_slice(&model.bias);
        for i in 0..d * c {
            model.weights[i] = look.weights[i] - lr * gw[i];
        }
        for i in 0..c {
            model.bias[i] = look.bias[i] - lr * gb[i];
        }
        if gnorm < tolerance {
            break;
        }
    }
    Ok((model, iters))
}

/// Train on `train`, report accuracy on `test`.
pub fn linear_probe(train: &LabeledFeatures, test: &LabeledFeatures, num_classes: usize, seed: u64, l2: f64) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(Error::metric("linear_probe", "train and test feature dimensions differ"));
    }
    let (model, iterations) = fit_logistic(train, num_classes, l2, PROBE_MAX_ITERS, PROBE_TOLERANCE, seed)?;
    let preds: Vec<usize> = test.features.iter().map(|x| model.predict(x)).collect();
    Ok(ProbeResult {
        accuracy: accuracy(&test.labels, &preds),
        train_fraction: 1.0,
        seed,
        iterations,
    })
}

/// Class-stratified subset: `round(fraction · n_c)` items of each class,
/// kept in original order. Fraction 1 returns every index.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::metric("fewshot_curve", format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (class, idx) in &by_class {
        let k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::metric(
                "fewshot_curve",
                format!("fraction {fraction} leaves class {class} with no samples"),
            ));
        }
        let mut rng = derive_stream(seed, &format!("fewshot/{class}"));
        keep.extend(rng.subset(idx.len(), k).into_iter().map(|j| idx[j]));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// One probe per `(fraction, seed)` on stratified subsets of `train`.
pub fn fewshot_curve(
    train: &LabeledFeatures,
    test: &LabeledFeatures,
    num_classes: usize,
    fractions: &[f64],
    seeds: &[u64],
    l2: f64,
) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let idx = stratified_subsample(&train.labels, fraction, seed)?;
            let mut r = linear_probe(&train.subset(&idx), test, num_classes, seed, l2)?;
            r.train_fraction = fraction;
            out.push(r);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Backbone classifier

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneSettings {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            batch: 64,
            lr: 3e-3,
        }
    }
}

/// Pixel MLP classifier: one SiLU hidden layer feeding a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub resolution: usize,
    pub num_classes: usize,
    pub params: ParamSet,
}

impl Backbone {
    pub fn train(data: &[(ToyImage, usize)], num_classes: usize, settings: &BackboneSettings, rng: &mut RngStream) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::metric("backbone", "empty training set"))?;
        let resolution = first.0.resolution();
        let p = first.0.num_values();
        let mut params = ParamSet::new();
        let (w1, b1) = init_linear(rng, p, settings.hidden);
        let (w2, b2) = init_linear(rng, settings.hidden, num_classes);
        params.insert("l1.w", w1);
        params.insert("l1.b", b1);
        params.insert("l2.w", w2);
        params.insert("l2.b", b2);
        let mut net = Self {
            resolution,
            num_classes,
            params,
        };
        let mut opt = AdamW::new(AdamWSettings::new(settings.lr, 0.9, 0.999, 0.0, None), &net.params);
        for _ in 0..settings.steps {
            let idx: Vec<usize> = (0..settings.batch.min(data.len())).map(|_| rng.below(data.len())).collect();
            let imgs: Vec<ToyImage> = idx.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
            let mut g = Graph::new();
            let vars = net.params.bind(&mut g, true);
            let x = g.constant(stack_images(&imgs));
            let x = g.add_scalar(x, -0.5);
            let h = linear(&mut g, x, vars.get("l1.w"), vars.get("l1.b"));
            let h = g.silu(h);
            let z = linear(&mut g, h, vars.get("l2.w"), vars.get("l2.b"));
            let lp = g.log_softmax_rows(z);
            let picked = g.pick_per_row(lp, labels);
            let loss = g.mean(picked);
            let loss = g.scale(loss, -1.0);
            let grads = g.backward(loss);
            let mut grads = vars.grads(&g, &grads);
            opt.update(&mut net.params, &mut grads);
        }
        Ok(net)
    }

    fn forward(&self, images: &[ToyImage]) -> Result<(Tensor, Tensor)> {
        if let Some(img) = images.iter().find(|i| i.resolution() != self.resolution) {
            return Err(Error::ResolutionMismatch {
                expected: self.resolution,
                got: img.resolution(),
            });
        }
        if images.is_empty() {
            return Ok((Tensor::zeros(0, 0), Tensor::zeros(0, 0)));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(stack_images(images));
        let x = g.add_scalar(x, -0.5);
        let h = linear(&mut g, x, vars.get("l1.w"), vars.get("l1.b"));
        let h = g.silu(h);
        let z = linear(&mut g, h, vars.get("l2.w"), vars.get("l2.b"));
        Ok((g.value(h).clone(), g.value(z).clone()))
    }

    pub fn predict(&self, images: &[ToyImage]) -> Result<Vec<usize>> {
        let (_, z) = self.forward(images)?;
        Ok((0..z.rows).map(|r| argmax(z.row_slice(r))).collect())
    }

    /// Penultimate-layer features.
    pub fn features(&self, images: &[ToyImage]) -> Result<Vec<Vec<f64>>> {
        let (h, _) = self.forward(images)?;
        Ok(h.to_rows())
    }
}

// ---------------------------------------------------------------------------
// Bias benchmark analogs and prediction files

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub predicted_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncommon_count: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub const SPLIT_CUE_CONFLICT: &str = "cue_conflict";
pub const SPLIT_FOCUS: &str = "focus";
pub const SPLIT_MIXED_SAME: &str = "mixed_same";
pub const SPLIT_MIXED_RAND: &str = "mixed_rand";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSizes {
    pub conflict_repeats: usize,
    pub focus_items: usize,
    pub background_per_class: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        Self {
            conflict_repeats: 4,
            focus_items: 2000,
            background_per_class: 50,
        }
    }
}

/// Benchmark items from the world: cue-conflict, uniform-attribute
/// (partitioned by uncommon count), and the two background splits.
pub fn build_benchmark(world: &World, sizes: &BenchmarkSizes, seed: u64) -> Result<Vec<(String, LabeledImage)>> {
    let mut out = Vec::new();
    let pairs = world.all_conflict_pairs(sizes.conflict_repeats);
    for (i, li) in world.build_cue_conflict(&pairs, &mut derive_stream(seed, "bench/conflict"))?.into_iter().enumerate() {
        out.push((format!("{SPLIT_CUE_CONFLICT}/{i}"), li));
    }
    for (i, li) in world.sample_dataset(sizes.focus_items, 0.0, &mut derive_stream(seed, "bench/focus"))?.into_iter().enumerate() {
        out.push((format!("{SPLIT_FOCUS}/{i}"), li));
    }
    let classes: Vec<usize> = (0..world.num_classes()).collect();
    let (same, rand) = world.build_background_splits(&classes, sizes.background_per_class, &mut derive_stream(seed, "bench/background"))?;
    for (i, li) in same.into_iter().enumerate() {
        out.push((format!("{SPLIT_MIXED_SAME}/{i}"), li));
    }
    for (i, li) in rand.into_iter().enumerate() {
        out.push((format!("{SPLIT_MIXED_RAND}/{i}"), li));
    }
    Ok(out)
}

/// Prediction records for benchmark items.
pub fn prediction_records(items: &[(String, LabeledImage)], predictions: &[usize]) -> Vec<PredictionRecord> {
    items
        .iter()
        .zip(predictions)
        .map(|((id, li), &pred)| {
            let split = id.split('/').next().unwrap_or_default().to_owned();
            let conflict = split == SPLIT_CUE_CONFLICT;
            PredictionRecord {
                item_id: id.clone(),
                predicted_class: pred,
                class_id: Some(li.class_id),
                shape_class: conflict.then_some(li.class_id),
                texture_class: if conflict { li.texture_class } else { None },
                uncommon_count: (split == SPLIT_FOCUS).then_some(li.uncommon_count),
                split: Some(split),
            }
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    crate::checkpoint::write_atomic(path, text.as_bytes())
}

/// Metrics report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "TI")]
    pub ti: Option<f64>,
    #[serde(rename = "CB_avg")]
    pub cb_avg: Option<f64>,
    #[serde(rename = "BG_Gap")]
    pub bg_gap: Option<f64>,
    pub probe: Vec<ProbeResult>,
    pub partition: Option<PartitionAccuracyTable>,
    pub acc_mixed_same: Option<f64>,
    pub acc_mixed_rand: Option<f64>,
    pub ti_excludes_neither: bool,
    pub warnings: Vec<String>,
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self {
            ti: None,
            cb_avg: None,
            bg_gap: None,
            probe: Vec::new(),
            partition: None,
            acc_mixed_same: None,
            acc_mixed_rand: None,
            ti_excludes_neither: true,
            warnings: Vec::new(),
        }
    }
}

/// Compute whatever bias metrics the records support; missing inputs become
/// warnings and null metrics.
pub fn metrics_from_predictions(records: &[PredictionRecord]) -> MetricsReport {
    let mut report = MetricsReport::default();
    let decisions: Vec<CueConflictDecision> = records
        .iter()
        .filter_map(|r| {
            Some(CueConflictDecision {
                shape_class: r.shape_class?,
                texture_class: r.texture_class?,
                predicted_class: r.predicted_class,
            })
        })
        .collect();
    match texture_inclination(&decisions) {
        Ok(v) => report.ti = Some(v),
        Err(e) => report.warnings.push(format!("TI: {e}")),
    }

    let focus: Vec<(u8, usize, usize)> = records
        .iter()
        .filter_map(|r| Some((r.uncommon_count?, r.class_id?, r.predicted_class)))
        .collect();
    let items: Vec<(u8, usize)> = focus.iter().map(|&(k, y, _)| (k, y)).collect();
    let preds: Vec<usize> = focus.iter().map(|&(_, _, p)| p).collect();
    match partition_counts(&items, &preds).and_then(|t| {
        let cb = context_bias_avg(&t);
        report.partition = Some(t);
        cb
    }) {
        Ok(v) => report.cb_avg = Some(v),
        Err(e) => report.warnings.push(format!("CB_avg: {e}")),
    }

    let split_acc = |name: &str| {
        let (labels, preds): (Vec<usize>, Vec<usize>) = records
            .iter()
            .filter(|r| r.split.as_deref() == Some(name))
            .filter_map(|r| Some((r.class_id?, r.predicted_class)))
            .unzip();
        (!labels.is_empty()).then(|| accuracy(&labels, &preds))
    };
    report.acc_mixed_same = split_acc(SPLIT_MIXED_SAME);
    report.acc_mixed_rand = split_acc(SPLIT_MIXED_RAND);
    match (report.acc_mixed_same, report.acc_mixed_rand) {
        (Some(a), Some(b)) => match background_gap(a, b) {
            Ok(v) => report.bg_gap = Some(v),
            Err(e) => report.warnings.push(format!("BG_Gap: {e}")),
        },
        _ => report.warnings.push("BG_Gap: mixed_same or mixed_rand split is missing".into()),
    }
    report
}

/// Predict every benchmark item with `backbone` and compute the bias metrics.
pub fn evaluate_bias(backbone: &Backbone, world: &World, sizes: &BenchmarkSizes, seed: u64) -> Result<(Vec<PredictionRecord>, MetricsReport)> {
    let items = build_benchmark(world, sizes, seed)?;
    let images: Vec<ToyImage> = items.iter().map(|(_, li)| li.image.clone()).collect();
    let preds = backbone.predict(&images)?;
    let records = prediction_records(&items, &preds);
    let report = metrics_from_predictions(&records);
    Ok((records, report))
}

/// Backbone features of an unbiased downstream task drawn from `world`.
pub fn transfer_features(backbone: &Backbone, world: &World, n_train: usize, n_test: usize, seed: u64) -> Result<(LabeledFeatures, LabeledFeatures)> {
    let split = |n: usize, name: &str| -> Result<LabeledFeatures> {
        let items = world.sample_dataset(n, 0.0, &mut derive_stream(seed, name))?;
        let images: Vec<ToyImage> = items.iter().map(|li| li.image.clone()).collect();
        LabeledFeatures::new(backbone.features(&images)?, items.iter().map(|li| li.class_id).collect())
    };
    Ok((split(n_train, "transfer/train")?, split(n_test, "transfer/test")?))
}
