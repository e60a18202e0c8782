//! Dual image/text encoder mapping both modalities into one unit-norm
//! feature space.
//!
//! The image tower is a two-hidden-layer MLP over centered pixels. The text
//! tower looks prompts up in an embedding table (prompts are exact-match
//! keys; unseen prompts get a fixed pseudo-random embedding derived from the
//! prompt string) followed by a one-hidden-layer MLP. After contrastive
//! pre-training the encoder is frozen; frozen towers are still
//! differentiable with respect to their pixel inputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Dtype, TensorDump};
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::nn::{init_linear, linear, AdamW, AdamWSettings, Bound, ParamSet};
use crate::rng::{derive_stream, RngStream};
use crate::tensor::Tensor;
use crate::vocab::{ClassVocabulary, FeatureVector, DEFAULT_TEMPLATE};
use crate::worldgen::World;

pub const CHECKPOINT_KIND: &str = "encoder";

/// Fixed inverse temperature of the contrastive objective.
const LOGIT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub feature_dim: usize,
    pub width: usize,
}

impl EncoderConfig {
    pub fn from_run(cfg: &crate::RunConfig) -> Self {
        Self {
            resolution: cfg.image_resolution,
            feature_dim: cfg.feature_dim,
            width: cfg.encoder_width,
        }
    }

    fn pixel_count(&self) -> usize {
        self.resolution * self.resolution * 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    params: ParamSet,
    prompts: BTreeMap<String, usize>,
    frozen: bool,
}

/// Graph handles for an encoder's parameters.
pub struct BoundEncoder<'a> {
    encoder: &'a DualEncoder,
    vars: Bound,
}

impl DualEncoder {
    /// Randomly initialized, trainable encoder with an embedding row per prompt.
    pub fn new(config: EncoderConfig, prompts: &[String], rng: &mut RngStream) -> Self {
        let mut params = ParamSet::new();
        let (w, h, d) = (config.width, config.feature_dim, config.feature_dim);
        for (name, fan_in, fan_out) in [
            ("img.l1", config.pixel_count(), w),
            ("img.l2", w, w),
            ("img.l3", w, d),
            ("txt.l1", h, w),
            ("txt.l2", w, d),
        ] {
            let (wt, b) = init_linear(rng, fan_in, fan_out);
            params.insert(format!("{name}.w"), wt);
            params.insert(format!("{name}.b"), b);
        }
        let mut table = BTreeMap::new();
        for p in prompts {
            let next = table.len();
            table.entry(p.clone()).or_insert(next);
        }
        let mut embed = Tensor::zeros(table.len(), h);
        for (p, &row) in &table {
            embed.data[row * h..(row + 1) * h].copy_from_slice(&hashed_embedding(p, h));
        }
        params.insert("txt.embed", embed);
        Self {
            config,
            params,
            prompts: table,
            frozen: false,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn param_hash(&self) -> String {
        self.params.hash_hex()
    }

    /// Bind parameters on `g`; they receive gradient only when not frozen.
    pub fn bind<'a>(&'a self, g: &mut Graph) -> BoundEncoder<'a> {
        BoundEncoder {
            encoder: self,
            vars: self.params.bind(g, !self.frozen),
        }
    }

    fn check_images(&self, images: &[ToyImage]) -> Result<()> {
        for img in images {
            if img.resolution() != self.config.resolution {
                return Err(Error::ResolutionMismatch {
                    expected: self.config.resolution,
                    got: img.resolution(),
                });
            }
        }
        Ok(())
    }

    pub fn encode_image(&self, images: &[ToyImage]) -> Result<Vec<FeatureVector>> {
        self.encode_image_scaled(images, 1.0)
    }

    /// Like [`encode_image`](Self::encode_image) with the pre-normalization
    /// activations multiplied by `prenorm_scale`.
    pub fn encode_image_scaled(&self, images: &[ToyImage], prenorm_scale: f64) -> Result<Vec<FeatureVector>> {
        self.check_images(images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let enc = self.bind(&mut g);
        let x = g.constant(stack_images(images));
        let pre = enc.image_preactivation(&mut g, x);
        let pre = g.scale(pre, prenorm_scale);
        let f = g.normalize_rows(pre);
        rows_to_features(g.value(f))
    }

    pub fn encode_text(&self, prompts: &[&str]) -> Result<Vec<FeatureVector>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let enc = self.bind(&mut g);
        let f = enc.text_features(&mut g, prompts)?;
        rows_to_features(g.value(f))
    }

    /// `C × d` matrix of `encode_text(prompt(i))` rows.
    pub fn build_class_features(&self, vocab: &ClassVocabulary) -> Result<ClassFeatures> {
        if !self.frozen {
            return Err(Error::EncoderNotFrozen("build_class_features"));
        }
        let prompts = (0..vocab.len()).map(|i| vocab.prompt(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        Ok(ClassFeatures(self.encode_text(&refs)?))
    }

    pub fn to_dump(&self) -> TensorDump {
        let prompts: Vec<(&String, &usize)> = self.prompts.iter().collect();
        let mut dump = TensorDump::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "config": self.config,
                "prompts": prompts,
                "frozen": self.frozen,
            }),
        );
        dump.insert_params("params", &self.params);
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("encoder checkpoint: {m}"));
        let config: EncoderConfig = serde_json::from_value(dump.meta["config"].clone())?;
        let prompts: Vec<(String, usize)> = serde_json::from_value(dump.meta["prompts"].clone())?;
        let frozen = dump.meta["frozen"].as_bool().ok_or_else(|| bad("missing frozen flag"))?;
        Ok(Self {
            config,
            params: dump.params("params"),
            prompts: prompts.into_iter().collect(),
            frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dump().save(path, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dump(&TensorDump::load(path, CHECKPOINT_KIND)?)
    }
}

/// Deterministic embedding for a prompt string.
fn hashed_embedding(prompt: &str, dim: usize) -> Vec<f64> {
    let mut rng = derive_stream(0, &format!("prompt-embedding/{prompt}"));
    rng.normals(dim)
}

pub fn stack_images(images: &[ToyImage]) -> Tensor {
    let n = images[0].num_values();
    let mut data = Vec::with_capacity(images.len() * n);
    for img in images {
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(images.len(), n, data)
}

fn rows_to_features(t: &Tensor) -> Result<Vec<FeatureVector>> {
    (0..t.rows)
        .map(|r| FeatureVector::from_unit(t.row_slice(r).to_vec()))
        .collect()
}

impl BoundEncoder<'_> {
    /// Image-tower output before normalization (`n × d`).
    pub fn image_preactivation(&self, g: &mut Graph, pixels: Var) -> Var {
        let v = &self.vars;
        let x = g.add_scalar(pixels, -0.5);
        let h = linear(g, x, v.get("img.l1.w"), v.get("img.l1.b"));
        let h = g.silu(h);
        let h = linear(g, h, v.get("img.l2.w"), v.get("img.l2.b"));
        let h = g.silu(h);
        linear(g, h, v.get("img.l3.w"), v.get("img.l3.b"))
    }

    /// Unit-norm image features for flattened pixel rows.
    pub fn image_features(&self, g: &mut Graph, pixels: Var) -> Var {
        let pre = self.image_preactivation(g, pixels);
        g.normalize_rows(pre)
    }

    pub fn text_features(&self, g: &mut Graph, prompts: &[&str]) -> Result<Var> {
        let enc = self.encoder;
        let h = enc.config.feature_dim;
        let table = self.vars.get("txt.embed");
        let n_rows = enc.prompts.len();
        let mut rows = Vec::with_capacity(prompts.len());
        for p in prompts {
            if p.trim().is_empty() {
                return Err(Error::EmptyPrompt);
            }
            let row = match enc.prompts.get(*p) {
                Some(&i) => {
                    let mut onehot = Tensor::zeros(1, n_rows);
                    onehot.data[i] = 1.0;
                    let oh = g.constant(onehot);
                    g.matmul(oh, table)
                }
                None => g.constant(Tensor::row(hashed_embedding(p, h))),
            };
            rows.push(row);
        }
        let e = g.concat_rows(&rows);
        let v = &self.vars;
        let x = linear(g, e, v.get("txt.l1.w"), v.get("txt.l1.b"));
        let x = g.silu(x);
        let x = linear(g, x, v.get("txt.l2.w"), v.get("txt.l2.b"));
        Ok(g.normalize_rows(x))
    }
}

/// Text features of every class prompt, row `i` for class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures(pub Vec<FeatureVector>);

impl ClassFeatures {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn row(&self, i: usize) -> &FeatureVector {
        &self.0[i]
    }

    /// Index of the most cosine-similar row.
    pub fn nearest(&self, f: &FeatureVector) -> usize {
        (0..self.0.len())
            .max_by(|&a, &b| f.dot(&self.0[a]).total_cmp(&f.dot(&self.0[b])))
            .expect("non-empty class features")
    }
}

/// Prompt strings a class is trained under: its bare name, the vocabulary
/// prompt, and the `photo of {name}` description.
pub fn class_prompts(vocab: &ClassVocabulary, class_id: usize) -> Result<Vec<String>> {
    let name = vocab.name(class_id)?.to_owned();
    let mut out = vec![name.clone(), vocab.prompt(class_id)?, DEFAULT_TEMPLATE.replace("{name}", &name)];
    out.dedup();
    let mut seen = Vec::new();
    out.retain(|p| {
        if seen.contains(p) {
            false
        } else {
            seen.push(p.clone());
            true
        }
    });
    Ok(out)
}

/// Symmetric cross-entropy contrastive training on unbiased (ρ = 0) world
/// images. Each step draws one image per class in shuffled order, pairs it
/// with one of that class's prompts (same prompt form for the whole batch),
/// and takes one AdamW step. The returned encoder is frozen.
pub fn pretrain_contrastive(
    world: &World,
    vocab: &ClassVocabulary,
    config: EncoderConfig,
    steps: usize,
    lr: f64,
    rng: &mut RngStream,
) -> Result<DualEncoder> {
    if steps == 0 {
        return Err(Error::ZeroSteps);
    }
    if vocab.len() != world.num_classes() {
        return Err(Error::Invalid(format!(
            "vocabulary has {} classes, world has {}",
            vocab.len(),
            world.num_classes()
        )));
    }
    if config.resolution != world.resolution {
        return Err(Error::ResolutionMismatch {
            expected: config.resolution,
            got: world.resolution,
        });
    }
    let c = vocab.len();
    let per_class: Vec<Vec<String>> = (0..c).map(|i| class_prompts(vocab, i)).collect::<Result<_>>()?;
    let all_prompts: Vec<String> = per_class.iter().flatten().cloned().collect();
    let mut init_rng = rng.fork("init");
    let mut encoder = DualEncoder::new(config, &all_prompts, &mut init_rng);
    let mut opt = AdamW::new(AdamWSettings::new(lr, 0.9, 0.999, 0.0, None), &encoder.params);
    let targets: Vec<usize> = (0..c).collect();

    for _ in 0..steps {
        let mut order: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut order);
        let form = rng.below(per_class.iter().map(Vec::len).min().unwrap_or(1));
        let images = order
            .iter()
            .map(|&k| world.sample_biased(k, 0.0, rng).map(|li| li.image))
            .collect::<Result<Vec<_>>>()?;
        let prompts: Vec<&str> = order.iter().map(|&k| per_class[k][form].as_str()).collect();

        let mut g = Graph::new();
        let bound = encoder.bind(&mut g);
        let x = g.constant(stack_images(&images));
        let fi = bound.image_features(&mut g, x);
        let ft = bound.text_features(&mut g, &prompts)?;
        let ftt = g.transpose(ft);
        let logits = g.matmul(fi, ftt);
        let logits = g.scale(logits, LOGIT_SCALE);
        let li = g.log_softmax_rows(logits);
        let li = g.pick_per_row(li, targets.clone());
        let lt_in = g.transpose(logits);
        let lt = g.log_softmax_rows(lt_in);
        let lt = g.pick_per_row(lt, targets.clone());
        let both = g.add(li, lt);
        let loss = g.mean(both);
        let loss = g.scale(loss, -0.5);
        let grads = g.backward(loss);
        let mut grads = bound.vars.grads(&g, &grads);
        drop(bound);
        opt.update(&mut encoder.params, &mut grads);
    }
    Ok(encoder.freeze())
}

/// Fraction of images whose nearest class feature is their own class.
pub fn zero_shot_accuracy(encoder: &DualEncoder, class_features: &ClassFeatures, images: &[(ToyImage, usize)]) -> Result<f64> {
    let imgs: Vec<ToyImage> = images.iter().map(|(i, _)| i.clone()).collect();
    let feats = encoder.encode_image(&imgs)?;
    let correct = feats
        .iter()
        .zip(images)
        .filter(|(f, (_, label))| class_features.nearest(f) == *label)
        .count();
    Ok(correct as f64 / images.len() as f64)
}
