//! Bi-level semantic alignment: an adversarial entire-dataset term over
//! encoder-space features and a per-image cosine term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::TensorDump;
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, Bound, ParamSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vocab::FeatureVector;

pub const CHECKPOINT_KIND: &str = "discriminator";

/// Discriminator outputs are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]`.
pub const CLAMP_EPS: f64 = 1e-7;

/// Linear-ReLU-Linear followed by a logistic output stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub feature_dim: usize,
    pub hidden: usize,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(feature_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamSet::new();
        let (w1, b1) = init_linear(rng, feature_dim, hidden);
        let (w2, b2) = init_linear(rng, hidden, 1);
        params.insert("l1.w", w1);
        params.insert("l1.b", b1);
        params.insert("l2.w", w2);
        params.insert("l2.b", b2);
        Self {
            feature_dim,
            hidden,
            params,
        }
    }

    /// Zero the output layer so every input maps to exactly 0.5.
    pub fn with_zero_output(mut self) -> Self {
        self.params.insert("l2.w", Tensor::zeros(self.hidden, 1));
        self.params.insert("l2.b", Tensor::zeros(1, 1));
        self
    }

    pub fn param_hash(&self) -> String {
        self.params.hash_hex()
    }

    /// `n × 1` clamped probabilities for feature rows `f`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &Bound, f: Var) -> Var {
        let h = linear(g, f, vars.get("l1.w"), vars.get("l1.b"));
        let h = g.relu(h);
        let o = linear(g, h, vars.get("l2.w"), vars.get("l2.b"));
        let p = g.sigmoid(o);
        g.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    }

    fn check_dim(&self, f: &FeatureVector) -> Result<()> {
        if f.dim() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                context: "discriminate",
                detail: format!("feature dim {} vs discriminator dim {}", f.dim(), self.feature_dim),
            });
        }
        Ok(())
    }

    pub fn discriminate(&self, f: &FeatureVector) -> Result<f64> {
        self.check_dim(f)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::row(f.as_slice().to_vec()));
        let p = self.forward_graph(&mut g, &vars, x);
        Ok(g.value(p).item())
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new(
            CHECKPOINT_KIND,
            serde_json::json!({"feature_dim": self.feature_dim, "hidden": self.hidden}),
        );
        dump.insert_params("params", &self.params);
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        let get = |k: &str| {
            dump.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Invalid(format!("discriminator checkpoint: missing `{k}`")))
        };
        Ok(Self {
            feature_dim: get("feature_dim")?,
            hidden: get("hidden")?,
            params: dump.params("params"),
        })
    }
}

/// `ln D(f_text) + ln(1 - D(f_image))`.
pub fn entire_alignment_loss(disc: &Discriminator, f_text: &FeatureVector, f_image: &FeatureVector) -> Result<f64> {
    Ok(entire_from_probs(disc.discriminate(f_text)?, disc.discriminate(f_image)?))
}

/// The entire-alignment loss from discriminator outputs.
pub fn entire_from_probs(d_text: f64, d_image: f64) -> f64 {
    d_text.ln() + (1.0 - d_image).ln()
}

/// Loss the discriminator minimizes: `-L_en`.
pub fn discriminator_objective(disc: &Discriminator, f_text: &FeatureVector, f_image: &FeatureVector) -> Result<f64> {
    Ok(-entire_alignment_loss(disc, f_text, f_image)?)
}

/// Batch-mean entire-alignment loss on the graph. Returns
/// `(L_en, generator_term)` where the generator term is `ln(1 - D(f_image))`
/// (or `-ln D(f_image)` when `nonsaturating`), the only part that depends on
/// the image features.
pub fn entire_alignment_graph(
    g: &mut Graph,
    disc: &Discriminator,
    vars: &Bound,
    f_text: Var,
    f_image: Var,
    nonsaturating: bool,
) -> (Var, Var) {
    let dt = disc.forward_graph(g, vars, f_text);
    let di = disc.forward_graph(g, vars, f_image);
    let log_dt = g.log(dt);
    let one_minus = g.scale(di, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let log_fake = g.log(one_minus);
    let per_row = g.add(log_dt, log_fake);
    let l_en = g.mean(per_row);
    let gen_term = if nonsaturating {
        let l = g.log(di);
        let l = g.mean(l);
        g.scale(l, -1.0)
    } else {
        g.mean(log_fake)
    };
    (l_en, gen_term)
}

/// Uniform draw from `{0..C-1} \ {exclude}`.
pub fn select_negative_class(num_classes: usize, exclude: usize, rng: &mut RngStream) -> Result<usize> {
    if num_classes < 2 {
        return Err(Error::TooFewClasses {
            needed: 2,
            got: num_classes,
        });
    }
    if exclude >= num_classes {
        return Err(Error::ClassOutOfRange {
            class_id: exclude,
            num_classes,
        });
    }
    let r = rng.below(num_classes - 1);
    Ok(if r >= exclude { r + 1 } else { r })
}

/// `1 - cos(f_im, f_pc)`, dividing by both norms.
pub fn individual_alignment_loss(f_im: &[f64], f_pc: &[f64]) -> Result<f64> {
    if f_im.len() != f_pc.len() {
        return Err(Error::ShapeMismatch {
            context: "individual_alignment_loss",
            detail: format!("{} vs {}", f_im.len(), f_pc.len()),
        });
    }
    let na = f_im.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = f_pc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = f_im.iter().zip(f_pc).map(|(a, b)| a * b).sum();
    Ok(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Batch-mean `1 - cos` between matching rows.
pub fn individual_alignment_graph(g: &mut Graph, f_im: Var, f_pc: Var) -> Var {
    let a = g.normalize_rows(f_im);
    let b = g.normalize_rows(f_pc);
    let prod = g.mul(a, b);
    let cos = g.sum_cols(prod);
    let cos = g.mean(cos);
    let neg = g.scale(cos, -1.0);
    g.add_scalar(neg, 1.0)
}

pub fn bi_level_loss(l_en: f64, l_in: f64) -> f64 {
    l_en + l_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamW, AdamWSettings};
    use crate::rng::derive_stream;

    fn unit(rng: &mut RngStream, d: usize) -> FeatureVector {
        FeatureVector::normalized(rng.normals(d)).unwrap()
    }

    #[test]
    fn output_range_and_zero_layer() {
        let mut rng = derive_stream(0, "disc");
        let disc = Discriminator::new(8, 32, &mut rng);
        for _ in 0..1000 {
            let f = unit(&mut rng, 8);
            let p = disc.discriminate(&f).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(p, disc.discriminate(&f).unwrap());
        }
        let zero = disc.with_zero_output();
        let f = unit(&mut rng, 8);
        assert_eq!(zero.discriminate(&f).unwrap(), 0.5);
        assert!(zero.discriminate(&unit(&mut rng, 4)).is_err());
    }

    #[test]
    fn entire_loss_examples() {
        let mut rng = derive_stream(1, "disc");
        let disc = Discriminator::new(4, 16, &mut rng).with_zero_output();
        let (a, b) = (unit(&mut rng, 4), unit(&mut rng, 4));
        let l = entire_alignment_loss(&disc, &a, &b).unwrap();
        assert!((l - (-1.3862944)).abs() < 1e-7);
        assert_eq!(discriminator_objective(&disc, &a, &b).unwrap(), -l);
        let best = entire_from_probs(1.0 - CLAMP_EPS, CLAMP_EPS);
        assert!((best + 2e-7).abs() < 1e-12);
        let worst = entire_from_probs(CLAMP_EPS, 0.5);
        assert!((worst - (1e-7f64.ln() + 0.5f64.ln())).abs() < 1e-12);
        assert!((1e-7f64.ln() + 16.118).abs() < 1e-3);
    }

    #[test]
    fn negative_class_is_uniform_and_excludes() {
        let mut rng = derive_stream(0, "negclass");
        let mut counts = [0usize; 10];
        let n = 100_000;
        for _ in 0..n {
            let c = select_negative_class(10, 3, &mut rng).unwrap();
            counts[c] += 1;
        }
        assert_eq!(counts[3], 0);
        let p = 1.0 / 9.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (c, &k) in counts.iter().enumerate().filter(|(c, _)| *c != 3) {
            assert!((k as f64 - n as f64 * p).abs() < 3.0 * sigma, "class {c}: {k}");
        }
        assert!(select_negative_class(1, 0, &mut rng).is_err());
    }

    #[test]
    fn individual_loss_examples() {
        assert_eq!(individual_alignment_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(individual_alignment_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(individual_alignment_loss(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let l = individual_alignment_loss(&[1.0, 0.0], &[s, s]).unwrap();
        assert!((l - 0.2928932).abs() < 1e-6);
        assert!(matches!(individual_alignment_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        let scaled = individual_alignment_loss(&[7.0, 0.0], &[0.3, 0.3]).unwrap();
        assert!((scaled - l).abs() < 1e-12);
    }

    #[test]
    fn individual_graph_matches_value() {
        let mut rng = derive_stream(2, "ind");
        let a: Vec<f64> = rng.normals(5);
        let b: Vec<f64> = rng.normals(5);
        let mut g = Graph::new();
        let va = g.constant(Tensor::row(a.clone()));
        let vb = g.constant(Tensor::row(b.clone()));
        let l = individual_alignment_graph(&mut g, va, vb);
        assert!((g.value(l).item() - individual_alignment_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bi_level_examples() {
        assert_eq!(bi_level_loss(0.0, 0.0), 0.0);
        assert!((bi_level_loss(-1.3862944, 0.2928932) - (-1.0934012)).abs() < 1e-12);
    }

    #[test]
    fn one_discriminator_step_does_not_decrease_l_en() {
        let mut rng = derive_stream(3, "step");
        let mut disc = Discriminator::new(6, 24, &mut rng);
        let text: Vec<FeatureVector> = (0..8).map(|_| unit(&mut rng, 6)).collect();
        let image: Vec<FeatureVector> = (0..8).map(|_| unit(&mut rng, 6)).collect();
        let stack = |fs: &[FeatureVector]| Tensor::from_rows(&fs.iter().map(|f| f.as_slice().to_vec()).collect::<Vec<_>>());
        let eval = |disc: &Discriminator, train: bool| {
            let mut g = Graph::new();
            let vars = disc.params.bind(&mut g, train);
            let t = g.constant(stack(&text));
            let i = g.constant(stack(&image));
            let (l_en, _) = entire_alignment_graph(&mut g, disc, &vars, t, i, false);
            let value = g.value(l_en).item();
            let obj = g.scale(l_en, -1.0);
            let grads = g.backward(obj);
            (value, vars.grads(&g, &grads))
        };
        let (before, mut grads) = eval(&disc, true);
        let mut opt = AdamW::new(AdamWSettings::new(1e-3, 0.0, 0.999, 0.0, None), &disc.params);
        opt.update(&mut disc.params, &mut grads);
        let (after, _) = eval(&disc, false);
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn final_bias_gradient_matches_finite_difference() {
        let mut rng = derive_stream(4, "fdbias");
        let disc = Discriminator::new(6, 24, &mut rng).with_zero_output();
        let (a, b) = (unit(&mut rng, 6), unit(&mut rng, 6));
        let mut g = Graph::new();
        let vars = disc.params.bind(&mut g, true);
        let t = g.constant(Tensor::row(a.as_slice().to_vec()));
        let i = g.constant(Tensor::row(b.as_slice().to_vec()));
        let (l_en, _) = entire_alignment_graph(&mut g, &disc, &vars, t, i, false);
        let obj = g.scale(l_en, -1.0);
        let grads = vars.grads(&g, &g.backward(obj));
        let analytic = grads.get("l2.b").item();
        let h = 1e-5;
        let at = |delta: f64| {
            let mut d = disc.clone();
            d.params.get_mut("l2.b").data[0] += delta;
            discriminator_objective(&d, &a, &b).unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        // D = 0.5 on both inputs, so the objective's bias derivative is exactly 0.
        assert!((analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-6));
        assert!(analytic.abs() < 1e-12);
    }

    #[test]
    fn nonsaturating_generator_term() {
        let mut rng = derive_stream(5, "ns");
        let disc = Discriminator::new(4, 16, &mut rng).with_zero_output();
        let mut g = Graph::new();
        let vars = disc.params.bind(&mut g, false);
        let t = g.constant(Tensor::row(unit(&mut rng, 4).as_slice().to_vec()));
        let i = g.constant(Tensor::row(unit(&mut rng, 4).as_slice().to_vec()));
        let (_, sat) = entire_alignment_graph(&mut g, &disc, &vars, t, i, false);
        let (_, ns) = entire_alignment_graph(&mut g, &disc, &vars, t, i, true);
        assert!((g.value(sat).item() - 0.5f64.ln()).abs() < 1e-12);
        assert!((g.value(ns).item() + 0.5f64.ln()).abs() < 1e-12);
    }
}
