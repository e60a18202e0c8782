//! Toy latent denoising generator.
//!
//! A small class-conditioned MLP predicts noise on a vector latent. Images
//! come out of a fixed decoder (`sigmoid(z·W + b)`) whose weights are a
//! whitened principal-component basis fitted once on world renders in logit
//! space. Sampling is ancestral DDPM with classifier-free guidance, and can
//! be recorded on a [`Graph`] with a per-step gradient mask so that rewards
//! backpropagate through only the chosen denoising steps.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Dtype, TensorDump};
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::nn::{init_linear, linear, AdamW, AdamWSettings, Bound, ParamSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::worldgen::World;

pub const GENERATOR_KIND: &str = "generator";
pub const ADAPTER_KIND: &str = "adapter";

/// Probability of replacing the class with the null token during pre-training.
pub const COND_DROP: f64 = 0.1;

const TIME_FREQS: usize = 4;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
const PIXEL_SQUEEZE: (f64, f64) = (0.02, 0.96);

/// Layers that carry low-rank adapters.
pub const ADAPTED_LAYERS: [&str; 3] = ["l1", "l2", "l3"];

// ---------------------------------------------------------------------------
// Noise schedule

/// Per-step noise levels. Chain step `j` (0-based, `t = j + 1`) uses
/// `betas[j]` and evaluates the denoiser at model timestep `timesteps[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub train_steps: usize,
}

impl NoiseSchedule {
    /// Cosine schedule with `t_steps` steps, betas clamped at 0.999.
    pub fn cosine(t_steps: usize) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::ZeroSteps);
        }
        let f = |t: usize| {
            let x = (t as f64 / t_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0;
            x.cos().powi(2)
        };
        let mut betas = Vec::with_capacity(t_steps);
        for t in 1..=t_steps {
            betas.push((1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA));
        }
        Ok(Self::from_betas(betas, (1..=t_steps).collect(), t_steps))
    }

    fn from_betas(betas: Vec<f64>, timesteps: Vec<usize>, train_steps: usize) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alpha_bars,
            timesteps,
            train_steps,
        }
    }

    /// A shorter chain over `steps` evenly spaced training timesteps.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::ZeroSteps);
        }
        if steps > self.train_steps {
            return Err(Error::TooManySteps {
                requested: steps,
                trained: self.train_steps,
            });
        }
        if steps == self.len() {
            return Ok(self.clone());
        }
        let timesteps: Vec<usize> = (1..=steps)
            .map(|j| ((j * self.train_steps) as f64 / steps as f64).round() as usize)
            .collect();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(steps);
        for &t in &timesteps {
            let ab = self.alpha_bars[t - 1];
            betas.push((1.0 - ab / prev).clamp(1e-8, MAX_BETA));
            prev = ab;
        }
        Ok(Self::from_betas(betas, timesteps, self.train_steps))
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn alpha_bar_prev(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.alpha_bars[j - 1]
        }
    }

    /// Posterior standard deviation added at chain step `j` (zero for the last step).
    pub fn sigma(&self, j: usize) -> f64 {
        if j == 0 {
            return 0.0;
        }
        let var = self.betas[j] * (1.0 - self.alpha_bar_prev(j)) / (1.0 - self.alpha_bars[j]);
        var.max(0.0).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Decoder

/// Fixed latent-to-pixel map `sigmoid(z·W + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub resolution: usize,
    /// `L × P`; row `i` is component `i` scaled by its standard deviation.
    pub weight: Tensor,
    /// `1 × P` logit-space mean.
    pub bias: Tensor,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Decoder {
    /// Whitened principal components of `logit(0.02 + 0.96·x)` over world renders.
    pub fn fit(world: &World, latent_dim: usize, samples: usize, rho: f64, rng: &mut RngStream) -> Result<Self> {
        let res = world.resolution;
        let p = res * res * 3;
        if latent_dim == 0 || latent_dim > p || samples <= latent_dim {
            return Err(Error::Invalid(format!(
                "decoder fit needs 0 < latent dim ({latent_dim}) <= pixels ({p}) and samples ({samples}) > latent dim"
            )));
        }
        let data = world.sample_dataset(samples, rho, rng)?;
        let (a, b) = PIXEL_SQUEEZE;
        let mut x = DMatrix::<f64>::zeros(samples, p);
        for (i, li) in data.iter().enumerate() {
            for (j, &v) in li.image.pixels().iter().enumerate() {
                x[(i, j)] = logit(a + b * v);
            }
        }
        let mean = x.row_mean();
        for mut row in x.row_iter_mut() {
            row -= &mean;
        }

        // Subspace iteration on the sample covariance, then a small eigenproblem.
        let mut q = DMatrix::<f64>::from_fn(p, latent_dim, |_, _| rng.normal());
        for _ in 0..60 {
            let y = x.transpose() * (&x * &q);
            q = y.qr().q();
        }
        let xq = &x * &q;
        let small = xq.transpose() * &xq / samples as f64;
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..latent_dim).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

        let mut weight = Tensor::zeros(latent_dim, p);
        for (row, &k) in order.iter().enumerate() {
            let lambda = eig.eigenvalues[k].max(1e-12);
            let dir = &q * eig.eigenvectors.column(k);
            // Sign convention: largest-magnitude entry positive.
            let pivot = dir.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for c in 0..p {
                weight.data[row * p + c] = sign * dir[c] * lambda.sqrt();
            }
        }
        Ok(Self {
            resolution: res,
            weight,
            bias: Tensor::row(mean.iter().copied().collect()),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn pixel_count(&self) -> usize {
        self.weight.cols
    }

    /// Latent code whose decoding is the best rank-`L` reconstruction of `image`.
    pub fn encode(&self, image: &ToyImage) -> Result<Vec<f64>> {
        if image.resolution() != self.resolution {
            return Err(Error::ResolutionMismatch {
                expected: self.resolution,
                got: image.resolution(),
            });
        }
        let (a, b) = PIXEL_SQUEEZE;
        let centered: Vec<f64> = image
            .pixels()
            .iter()
            .zip(&self.bias.data)
            .map(|(&v, m)| logit(a + b * v) - m)
            .collect();
        let p = self.pixel_count();
        Ok((0..self.latent_dim())
            .map(|i| {
                let w = &self.weight.data[i * p..(i + 1) * p];
                let sq: f64 = w.iter().map(|v| v * v).sum();
                w.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>() / sq
            })
            .collect())
    }

    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let y = linear(g, z, w, b);
        g.sigmoid(y)
    }

    pub fn decode(&self, z: &[f64]) -> Result<ToyImage> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z.to_vec()));
        let px = self.decode_graph(&mut g, zv);
        ToyImage::new(self.resolution, g.value(px).data.clone())
    }
}

// ---------------------------------------------------------------------------
// Low-rank adapter

/// Effective weight of layer `W` is `W + (alpha/rank)·down·up`. With `W`
/// stored `in × out`, `down` is `in × rank` and `up` is `rank × out`;
/// `up` starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub params: ParamSet,
}

impl LowRankAdapter {
    pub fn new(base: &ParamSet, rank: usize, alpha: f64, rng: &mut RngStream) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Invalid("adapter rank must be >= 1".into()));
        }
        let mut params = ParamSet::new();
        for layer in ADAPTED_LAYERS {
            let w = base.try_get(&format!("{layer}.w")).ok_or_else(|| Error::ShapeMismatch {
                context: "LowRankAdapter::new",
                detail: format!("base network has no layer `{layer}`"),
            })?;
            let std = 1.0 / (w.rows as f64).sqrt();
            let down = Tensor::new(w.rows, rank, rng.normals(w.rows * rank).into_iter().map(|v| v * std).collect());
            params.insert(format!("{layer}.down"), down);
            params.insert(format!("{layer}.up"), Tensor::zeros(rank, w.cols));
        }
        Ok(Self { rank, alpha, params })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_hash(&self) -> String {
        self.params.hash_hex()
    }

    /// Check factor shapes against a base network.
    pub fn check_compatible(&self, base: &ParamSet) -> Result<()> {
        for layer in ADAPTED_LAYERS {
            let w = base.get(&format!("{layer}.w"));
            let (down, up) = (self.params.try_get(&format!("{layer}.down")), self.params.try_get(&format!("{layer}.up")));
            let ok = matches!((down, up), (Some(d), Some(u))
                if d.shape() == (w.rows, self.rank) && u.shape() == (self.rank, w.cols));
            if !ok {
                return Err(Error::ShapeMismatch {
                    context: "adapter",
                    detail: format!("factors for `{layer}` do not fit a {}x{} weight at rank {}", w.rows, w.cols, self.rank),
                });
            }
        }
        Ok(())
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new(ADAPTER_KIND, serde_json::json!({"rank": self.rank, "alpha": self.alpha}));
        dump.insert_params("params", &self.params);
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        let rank = dump.meta["rank"].as_u64().ok_or_else(|| Error::Invalid("adapter checkpoint: missing rank".into()))?;
        let alpha = dump.meta["alpha"].as_f64().ok_or_else(|| Error::Invalid("adapter checkpoint: missing alpha".into()))?;
        Ok(Self {
            rank: rank as usize,
            alpha,
            params: dump.params("params"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dump().save(path, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dump(&TensorDump::load(path, ADAPTER_KIND)?)
    }
}

/// An adapter's parameters placed on a graph.
pub struct BoundAdapter {
    pub vars: Bound,
    pub scale: f64,
}

impl BoundAdapter {
    pub fn bind(adapter: &LowRankAdapter, g: &mut Graph, trainable: bool) -> Self {
        Self {
            vars: adapter.params.bind(g, trainable),
            scale: adapter.scale(),
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient mask

/// Which chain steps let gradient through; `flags[j]` is for `t = j + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradMask {
    pub flags: Vec<bool>,
}

impl GradMask {
    pub fn all(t: usize) -> Self {
        Self { flags: vec![true; t] }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Indices of enabled steps as `t` values.
    pub fn enabled_steps(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(j, _)| j + 1).collect()
    }
}

/// Uniformly random `k`-subset of the `t` steps.
pub fn make_grad_mask(t: usize, k: usize, rng: &mut RngStream) -> Result<GradMask> {
    if k < 1 || k > t {
        return Err(Error::GradMask { k, t });
    }
    let mut flags = vec![false; t];
    for i in rng.subset(t, k) {
        flags[i] = true;
    }
    Ok(GradMask { flags })
}

/// The last `k` denoising steps (`t = k..1`).
pub fn fixed_suffix_mask(t: usize, k: usize) -> Result<GradMask> {
    if k < 1 || k > t {
        return Err(Error::GradMask { k, t });
    }
    Ok(GradMask {
        flags: (0..t).map(|j| j < k).collect(),
    })
}

// ---------------------------------------------------------------------------
// Guidance

/// `uncond + s·(cond − uncond)`, evaluated as `(1 − s)·uncond + s·cond`.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, s: f64) -> Result<Tensor> {
    if uncond.shape() != cond.shape() {
        return Err(Error::ShapeMismatch {
            context: "cfg_combine",
            detail: format!("{:?} vs {:?}", uncond.shape(), cond.shape()),
        });
    }
    Ok(uncond.zip_map(cond, |u, c| (1.0 - s) * u + s * c))
}

fn cfg_combine_graph(g: &mut Graph, uncond: Var, cond: Var, s: f64) -> Var {
    let u = g.scale(uncond, 1.0 - s);
    let c = g.scale(cond, s);
    g.add(u, c)
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub resolution: usize,
}

impl GeneratorConfig {
    pub fn from_run(cfg: &crate::RunConfig) -> Self {
        Self {
            latent_dim: cfg.latent_shape,
            hidden: cfg.generator_hidden,
            num_classes: cfg.num_classes,
            resolution: cfg.image_resolution,
        }
    }

    fn input_dim(&self) -> usize {
        self.latent_dim + 2 * TIME_FREQS + self.num_classes + 1
    }
}

/// Base denoiser, decoder, and training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub base: ParamSet,
    pub decoder: Decoder,
    pub schedule: NoiseSchedule,
}

/// Noise consumed by one chain run of `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub init: Tensor,
    /// Indexed by chain step `j`; entry 0 is unused (no noise at the last step).
    pub steps: Vec<Tensor>,
}

impl ChainNoise {
    /// Draw order: initial latent, then steps `t = T..2`.
    pub fn draw(n: usize, latent_dim: usize, chain_len: usize, rng: &mut RngStream) -> Self {
        let init = Tensor::new(n, latent_dim, rng.normals(n * latent_dim));
        let mut steps = vec![Tensor::zeros(n, latent_dim); chain_len];
        for j in (1..chain_len).rev() {
            steps[j] = Tensor::new(n, latent_dim, rng.normals(n * latent_dim));
        }
        Self { init, steps }
    }

    pub fn rows(&self) -> usize {
        self.init.rows
    }
}

/// A chain run recorded on a graph.
pub struct GraphSample {
    /// `n × P` decoded pixels.
    pub pixels: Var,
    /// `n × L` final latent.
    pub latent: Var,
    /// Guided noise predictions of the gradient-disabled steps (`None` where enabled).
    pub frozen_eps: Vec<Option<Tensor>>,
}

fn time_embedding(t: usize, train_steps: usize) -> [f64; 2 * TIME_FREQS] {
    let tau = t as f64 / train_steps as f64;
    let mut out = [0.0; 2 * TIME_FREQS];
    for k in 0..TIME_FREQS {
        let w = PI * (1 << k) as f64 / 2.0;
        out[2 * k] = (w * tau).sin();
        out[2 * k + 1] = (w * tau).cos();
    }
    out
}

impl Generator {
    /// Untrained denoiser: LeCun-normal hidden layers, zero output layer.
    pub fn init(config: GeneratorConfig, decoder: Decoder, schedule: NoiseSchedule, rng: &mut RngStream) -> Result<Self> {
        if decoder.latent_dim() != config.latent_dim || decoder.resolution != config.resolution {
            return Err(Error::ShapeMismatch {
                context: "Generator::init",
                detail: "decoder does not match generator latent size or resolution".into(),
            });
        }
        let mut base = ParamSet::new();
        let h = config.hidden;
        for (name, fan_in, fan_out) in [("l1", config.input_dim(), h), ("l2", h, h)] {
            let (w, b) = init_linear(rng, fan_in, fan_out);
            base.insert(format!("{name}.w"), w);
            base.insert(format!("{name}.b"), b);
        }
        base.insert("l3.w", Tensor::zeros(h, config.latent_dim));
        base.insert("l3.b", Tensor::zeros(1, config.latent_dim));
        Ok(Self {
            config,
            base,
            decoder,
            schedule,
        })
    }

    pub fn null_class(&self) -> usize {
        self.config.num_classes
    }

    pub fn base_hash(&self) -> String {
        self.base.hash_hex()
    }

    fn check_class(&self, class: Option<usize>) -> Result<()> {
        match class {
            Some(c) if c >= self.config.num_classes => Err(Error::ClassOutOfRange {
                class_id: c,
                num_classes: self.config.num_classes,
            }),
            _ => Ok(()),
        }
    }

    /// Constant conditioning block `[time embedding | one-hot class]` for each row.
    fn conditioning(&self, t: usize, classes: &[usize]) -> Tensor {
        let c1 = self.config.num_classes + 1;
        let emb = time_embedding(t, self.schedule.train_steps);
        let cols = emb.len() + c1;
        let mut out = Tensor::zeros(classes.len(), cols);
        for (r, &c) in classes.iter().enumerate() {
            out.data[r * cols..r * cols + emb.len()].copy_from_slice(&emb);
            out.data[r * cols + emb.len() + c] = 1.0;
        }
        out
    }

    fn conditioning_rows(&self, ts: &[usize], classes: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = ts
            .iter()
            .zip(classes)
            .map(|(&t, &c)| self.conditioning(t, &[c]).data)
            .collect();
        Tensor::from_rows(&rows)
    }

    fn layer(&self, g: &mut Graph, base: &Bound, adapter: Option<&BoundAdapter>, name: &str, x: Var) -> Var {
        let mut y = g.matmul(x, base.get(&format!("{name}.w")));
        if let Some(a) = adapter {
            let down = g.matmul(x, a.vars.get(&format!("{name}.down")));
            let low = g.matmul(down, a.vars.get(&format!("{name}.up")));
            let low = g.scale(low, a.scale);
            y = g.add(y, low);
        }
        g.add_row(y, base.get(&format!("{name}.b")))
    }

    /// Raw noise prediction for latents `z` under conditioning rows `cond`.
    pub fn predict_graph(&self, g: &mut Graph, base: &Bound, adapter: Option<&BoundAdapter>, z: Var, cond: Tensor) -> Var {
        let c = g.constant(cond);
        let x = g.concat_cols(&[z, c]);
        let h = self.layer(g, base, adapter, "l1", x);
        let h = g.silu(h);
        let h = self.layer(g, base, adapter, "l2", h);
        let h = g.silu(h);
        self.layer(g, base, adapter, "l3", h)
    }

    /// Guided prediction at chain step `j` for rows with the given classes.
    fn guided_eps(
        &self,
        g: &mut Graph,
        base: &Bound,
        adapter: Option<&BoundAdapter>,
        z: Var,
        j: usize,
        classes: &[usize],
        s: f64,
    ) -> Var {
        let n = classes.len();
        let t = self.schedule.timesteps[j];
        let nulls = vec![self.null_class(); n];
        let mut cond = self.conditioning(t, classes);
        let unc = self.conditioning(t, &nulls);
        cond.data.extend_from_slice(&unc.data);
        cond.rows += n;
        let zz = g.concat_rows(&[z, z]);
        let both = self.predict_graph(g, base, adapter, zz, cond);
        let c = g.slice_rows(both, 0, n);
        let u = g.slice_rows(both, n, n);
        cfg_combine_graph(g, u, c, s)
    }

    /// Record a chain run on `g`.
    ///
    /// Steps whose mask flag is off evaluate the denoiser on a detached copy
    /// of the latent with constant parameters (or take the prediction from
    /// `replay` when given), so gradient reaches the adapter only through
    /// enabled steps while still flowing along the latent path.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_graph(
        &self,
        g: &mut Graph,
        base: &Bound,
        adapter: Option<(&LowRankAdapter, &BoundAdapter)>,
        classes: &[Option<usize>],
        guidance: f64,
        mask: &GradMask,
        noise: &ChainNoise,
        replay: Option<&[Option<Tensor>]>,
    ) -> Result<GraphSample> {
        let steps = self.schedule.len();
        if mask.len() != steps {
            return Err(Error::ShapeMismatch {
                context: "sample_graph",
                detail: format!("mask has {} flags for a {steps}-step chain", mask.len()),
            });
        }
        if noise.rows() != classes.len() || noise.steps.len() != steps {
            return Err(Error::ShapeMismatch {
                context: "sample_graph",
                detail: "noise does not match batch size or chain length".into(),
            });
        }
        for &c in classes {
            self.check_class(c)?;
        }
        let ids: Vec<usize> = classes.iter().map(|c| c.unwrap_or(self.null_class())).collect();
        let bound_adapter = adapter.map(|(_, b)| b);
        let mut frozen = vec![None; steps];
        let mut z = g.constant(noise.init.clone());
        for j in (0..steps).rev() {
            let eps = if mask.flags[j] {
                self.guided_eps(g, base, bound_adapter, z, j, &ids, guidance)
            } else {
                let value = match replay.and_then(|r| r[j].clone()) {
                    Some(v) => v,
                    None => self.guided_eps_value(adapter.map(|(a, _)| a), g.value(z), j, &ids, guidance),
                };
                frozen[j] = Some(value.clone());
                g.constant(value)
            };
            let ab = self.schedule.alpha_bars[j];
            let beta = self.schedule.betas[j];
            let coef = beta / (1.0 - ab).sqrt();
            let scaled = g.scale(eps, coef);
            let diff = g.sub(z, scaled);
            z = g.scale(diff, 1.0 / (1.0 - beta).sqrt());
            if j > 0 {
                let n = g.constant(noise.steps[j].scale(self.schedule.sigma(j)));
                z = g.add(z, n);
            }
        }
        let pixels = self.decoder.decode_graph(g, z);
        Ok(GraphSample {
            pixels,
            latent: z,
            frozen_eps: frozen,
        })
    }

    fn guided_eps_value(&self, adapter: Option<&LowRankAdapter>, z: &Tensor, j: usize, classes: &[usize], s: f64) -> Tensor {
        let mut g = Graph::new();
        let base = self.base.bind(&mut g, false);
        let ba = adapter.map(|a| BoundAdapter::bind(a, &mut g, false));
        let zv = g.constant(z.clone());
        let e = self.guided_eps(&mut g, &base, ba.as_ref(), zv, j, classes, s);
        g.value(e).clone()
    }

    /// Value-only sampling: decoded image plus the latent after every step
    /// (first entry is the initial noise).
    pub fn sample(
        &self,
        adapter: Option<&LowRankAdapter>,
        class: Option<usize>,
        guidance: f64,
        rng: &mut RngStream,
    ) -> Result<(ToyImage, Vec<Tensor>)> {
        self.check_class(class)?;
        let ids = [class.unwrap_or(self.null_class())];
        let steps = self.schedule.len();
        let noise = ChainNoise::draw(1, self.config.latent_dim, steps, rng);
        let mut z = noise.init.clone();
        let mut trajectory = vec![z.clone()];
        for j in (0..steps).rev() {
            let eps = self.guided_eps_value(adapter, &z, j, &ids, guidance);
            let ab = self.schedule.alpha_bars[j];
            let beta = self.schedule.betas[j];
            let coef = beta / (1.0 - ab).sqrt();
            z = z.zip_map(&eps, |zi, ei| (zi - coef * ei) / (1.0 - beta).sqrt());
            if j > 0 {
                let sigma = self.schedule.sigma(j);
                z = z.zip_map(&noise.steps[j], |zi, ni| zi + sigma * ni);
            }
            trajectory.push(z.clone());
        }
        let image = self.decoder.decode(&z.data)?;
        Ok((image, trajectory))
    }

    /// The same generator evaluated on a shorter chain.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut out = self.clone();
        out.schedule = self.schedule.respaced(steps)?;
        Ok(out)
    }

    /// Raw (unguided) noise prediction for one latent.
    pub fn predict(&self, adapter: Option<&LowRankAdapter>, z: &[f64], t: usize, class: Option<usize>) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let mut g = Graph::new();
        let base = self.base.bind(&mut g, false);
        let ba = adapter.map(|a| BoundAdapter::bind(a, &mut g, false));
        let zv = g.constant(Tensor::row(z.to_vec()));
        let cond = self.conditioning(t, &[class.unwrap_or(self.null_class())]);
        let e = self.predict_graph(&mut g, &base, ba.as_ref(), zv, cond);
        Ok(g.value(e).data.clone())
    }

    /// Fold `(alpha/rank)·down·up` into the base weights.
    pub fn merge_adapter(&self, adapter: &LowRankAdapter) -> Result<Generator> {
        adapter.check_compatible(&self.base)?;
        let mut out = self.clone();
        for layer in ADAPTED_LAYERS {
            let delta = adapter
                .params
                .get(&format!("{layer}.down"))
                .matmul(adapter.params.get(&format!("{layer}.up")))
                .scale(adapter.scale());
            out.base.get_mut(&format!("{layer}.w")).add_assign(&delta);
        }
        Ok(out)
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new(
            GENERATOR_KIND,
            serde_json::json!({
                "config": self.config,
                "schedule": self.schedule,
                "decoder_resolution": self.decoder.resolution,
            }),
        );
        dump.insert_params("base", &self.base);
        dump.tensors.insert("decoder/weight".into(), self.decoder.weight.clone());
        dump.tensors.insert("decoder/bias".into(), self.decoder.bias.clone());
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        let config: GeneratorConfig = serde_json::from_value(dump.meta["config"].clone())?;
        let schedule: NoiseSchedule = serde_json::from_value(dump.meta["schedule"].clone())?;
        let tensor = |k: &str| {
            dump.tensors
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("generator checkpoint: missing tensor `{k}`")))
        };
        Ok(Self {
            config,
            base: dump.params("base"),
            decoder: Decoder {
                resolution: config.resolution,
                weight: tensor("decoder/weight")?,
                bias: tensor("decoder/bias")?,
            },
            schedule,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dump().save(path, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dump(&TensorDump::load(path, GENERATOR_KIND)?)
    }
}

// ---------------------------------------------------------------------------
// Base pre-training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub rho: f64,
    pub dataset_size: usize,
    pub eval_size: usize,
}

impl PretrainSettings {
    pub fn from_run(cfg: &crate::RunConfig) -> Self {
        Self {
            steps: cfg.generator_steps,
            lr: cfg.generator_pretrain_lr,
            batch: 64,
            rho: cfg.rho_train,
            dataset_size: 4000,
            eval_size: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Per-element denoising loss on a fixed evaluation set before training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct DenoisingBatch {
    z0: Tensor,
    eps: Tensor,
    ts: Vec<usize>,
    classes: Vec<usize>,
}

fn noisy_latents(schedule: &NoiseSchedule, b: &DenoisingBatch) -> Tensor {
    let l = b.z0.cols;
    let mut zt = Tensor::zeros(b.z0.rows, l);
    for r in 0..b.z0.rows {
        let ab = schedule.alpha_bars[b.ts[r] - 1];
        for c in 0..l {
            zt.data[r * l + c] = ab.sqrt() * b.z0.at(r, c) + (1.0 - ab).sqrt() * b.eps.at(r, c);
        }
    }
    zt
}

fn draw_batch(latents: &[(Vec<f64>, usize)], null: usize, t_steps: usize, n: usize, drop: bool, rng: &mut RngStream) -> DenoisingBatch {
    let l = latents[0].0.len();
    let mut z0 = Vec::with_capacity(n * l);
    let mut ts = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let (z, c) = &latents[rng.below(latents.len())];
        z0.extend_from_slice(z);
        ts.push(1 + rng.below(t_steps));
        let dropped = drop && rng.uniform() < COND_DROP;
        classes.push(if dropped { null } else { *c });
    }
    DenoisingBatch {
        z0: Tensor::new(n, l, z0),
        eps: Tensor::new(n, l, rng.normals(n * l)),
        ts,
        classes,
    }
}

impl Generator {
    fn denoising_loss(&self, g: &mut Graph, base: &Bound, batch: &DenoisingBatch) -> Var {
        let zt = g.constant(noisy_latents(&self.schedule, batch));
        let cond = self.conditioning_rows(&batch.ts, &batch.classes);
        let pred = self.predict_graph(g, base, None, zt, cond);
        let target = g.constant(batch.eps.clone());
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        g.mean(sq)
    }

    fn eval_denoising(&self, batch: &DenoisingBatch) -> f64 {
        let mut g = Graph::new();
        let base = self.base.bind(&mut g, false);
        let l = self.denoising_loss(&mut g, &base, batch);
        g.value(l).item()
    }
}

/// Train the base denoiser with the per-element denoising loss on decoder
/// encodings of world images drawn at bias strength `settings.rho`.
pub fn pretrain_base(
    world: &World,
    mut generator: Generator,
    settings: &PretrainSettings,
    rng: &mut RngStream,
) -> Result<(Generator, PretrainReport)> {
    if settings.steps == 0 {
        return Err(Error::ZeroSteps);
    }
    let mut data_rng = rng.fork("data");
    let latents: Vec<(Vec<f64>, usize)> = world
        .sample_dataset(settings.dataset_size, settings.rho, &mut data_rng)?
        .into_iter()
        .map(|li| Ok((generator.decoder.encode(&li.image)?, li.class_id)))
        .collect::<Result<_>>()?;
    let null = generator.null_class();
    let t_steps = generator.schedule.train_steps;
    let eval = draw_batch(&latents, null, t_steps, settings.eval_size, false, &mut rng.fork("eval"));
    let initial_loss = generator.eval_denoising(&eval);

    let mut opt = AdamW::new(AdamWSettings::new(settings.lr, 0.9, 0.999, 0.0, None), &generator.base);
    let mut step_rng = rng.fork("steps");
    for step in 0..settings.steps {
        let batch = draw_batch(&latents, null, t_steps, settings.batch, true, &mut step_rng);
        let mut g = Graph::new();
        let base = generator.base.bind(&mut g, true);
        let loss = generator.denoising_loss(&mut g, &base, &batch);
        if !g.value(loss).all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                which: "denoising",
            });
        }
        let grads = g.backward(loss);
        let mut grads = base.grads(&g, &grads);
        opt.update(&mut generator.base, &mut grads);
    }
    let final_loss = generator.eval_denoising(&eval);
    Ok((generator, PretrainReport { initial_loss, final_loss }))
}

/// Fit the decoder, initialize, and pre-train a base generator from a run config.
pub fn build_base_generator(cfg: &crate::RunConfig, rng: &mut RngStream) -> Result<(Generator, PretrainReport)> {
    let world = World::new(cfg.num_classes, cfg.image_resolution)?;
    let decoder = Decoder::fit(&world, cfg.latent_shape, 2000, 0.5, &mut rng.fork("decoder"))?;
    let schedule = NoiseSchedule::cosine(cfg.t_steps)?;
    let generator = Generator::init(GeneratorConfig::from_run(cfg), decoder, schedule, &mut rng.fork("init"))?;
    pretrain_base(&world, generator, &PretrainSettings::from_run(cfg), &mut rng.fork("pretrain"))
}
