//! lbGen fine-tuning: the complete loss step, alternating generator and
//! discriminator updates, checkpoints, and the JSONL training log.
//!
//! All randomness of generator step `s` comes from streams derived from
//! `(seed, s)`, so a run resumed from a checkpoint replays exactly the draws
//! of an uninterrupted one.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{entire_alignment_graph, individual_alignment_graph, select_negative_class, Discriminator};
use crate::autodiff::Graph;
use crate::checkpoint::{Dtype, TensorDump};
use crate::encoder::{ClassFeatures, DualEncoder};
use crate::error::{Error, Result};
use crate::generator::{fixed_suffix_mask, make_grad_mask, BoundAdapter, ChainNoise, GradMask, Generator, LowRankAdapter};
use crate::image::ToyImage;
use crate::nn::{AdamW, AdamWSettings, ParamSet};
use crate::quality::{quality_loss_graph, QualityScorer};
use crate::rng::{derive_stream, RngStream};
use crate::tensor::Tensor;
use crate::vocab::{ClassVocabulary, FeatureVector};
use crate::RunConfig;

pub const CHECKPOINT_KIND: &str = "trainer";

/// Components of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_en: f64,
    pub l_in: f64,
    pub l_bi: f64,
    pub l_q: f64,
    pub l_total: f64,
    pub sampled_negative_class: usize,
    pub grad_mask: GradMask,
}

impl LossBreakdown {
    /// Assemble from components: `L_bi = L_en + L_in`, `L_total = L_bi + λ·L_q`.
    pub fn compose(l_en: f64, l_in: f64, l_q: f64, lambda_q: f64, negative: usize, mask: GradMask) -> Self {
        let l_bi = l_en + l_in;
        Self {
            l_en,
            l_in,
            l_bi,
            l_q,
            l_total: l_bi + lambda_q * l_q,
            sampled_negative_class: negative,
            grad_mask: mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub generator: AdamWSettings,
    pub discriminator: AdamWSettings,
}

impl OptimizerSettings {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            generator: AdamWSettings::new(cfg.generator_lr, 0.9, 0.999, cfg.weight_decay, Some(0.1)),
            discriminator: AdamWSettings::new(cfg.discriminator_lr, 0.0, 0.999, cfg.weight_decay, Some(1.0)),
        }
    }
}

/// Random choices of one generator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub class_id: usize,
    pub negative: usize,
    pub mask: GradMask,
    pub noise: ChainNoise,
}

/// Frozen components shared by every step.
pub struct TrainContext<'a> {
    pub generator: &'a Generator,
    pub encoder: &'a DualEncoder,
    pub scorer: &'a dyn QualityScorer,
    pub vocab: &'a ClassVocabulary,
    pub config: &'a RunConfig,
    pub class_features: ClassFeatures,
    pub descriptions: ClassFeatures,
}

/// Result of [`TrainContext::compute_loss_step`].
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Gradient of the generator objective with respect to adapter factors.
    pub adapter_grads: ParamSet,
    pub images: Vec<ToyImage>,
    /// Image features of the batch, detached (`n × d`).
    pub image_features: Tensor,
    /// Guided predictions of gradient-disabled chain steps, for replay.
    pub frozen_eps: Vec<Option<Tensor>>,
}

fn repeat_row(f: &FeatureVector, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * f.dim());
    for _ in 0..n {
        data.extend_from_slice(f.as_slice());
    }
    Tensor::new(n, f.dim(), data)
}

impl<'a> TrainContext<'a> {
    pub fn new(
        generator: &'a Generator,
        encoder: &'a DualEncoder,
        scorer: &'a dyn QualityScorer,
        vocab: &'a ClassVocabulary,
        config: &'a RunConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !encoder.is_frozen() {
            return Err(Error::EncoderNotFrozen("fine-tuning"));
        }
        if vocab.len() != generator.config.num_classes {
            return Err(Error::Invalid(format!(
                "vocabulary has {} classes, generator was trained on {}",
                vocab.len(),
                generator.config.num_classes
            )));
        }
        if vocab.len() < 2 {
            return Err(Error::TooFewClasses {
                needed: 2,
                got: vocab.len(),
            });
        }
        if generator.schedule.len() != config.t_steps {
            return Err(Error::Invalid(format!(
                "generator chain has {} steps, config T is {}",
                generator.schedule.len(),
                config.t_steps
            )));
        }
        if encoder.config().resolution != generator.config.resolution {
            return Err(Error::ResolutionMismatch {
                expected: generator.config.resolution,
                got: encoder.config().resolution,
            });
        }
        let class_features = encoder.build_class_features(vocab)?;
        let descriptions = (0..vocab.len()).map(|i| vocab.description(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = descriptions.iter().map(String::as_str).collect();
        let descriptions = ClassFeatures(encoder.encode_text(&refs)?);
        Ok(Self {
            generator,
            encoder,
            scorer,
            vocab,
            config,
            class_features,
            descriptions,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    /// Class trained at generator step `step`: classes cycle through a
    /// freshly shuffled order every `C` steps.
    pub fn class_for_step(&self, step: usize) -> usize {
        let c = self.num_classes();
        let mut order: Vec<usize> = (0..c).collect();
        derive_stream(self.config.seed, &format!("class-order/{}", step / c)).shuffle(&mut order);
        order[step % c]
    }

    fn step_stream(&self, step: usize, label: &str) -> RngStream {
        derive_stream(self.config.seed, &format!("step/{step}/{label}"))
    }

    pub fn draw_step(&self, step: usize) -> Result<StepDraws> {
        let class_id = self.class_for_step(step);
        self.draws_for(class_id, &mut self.step_stream(step, "negative"), &mut self.step_stream(step, "mask"), &mut self.step_stream(step, "noise"))
    }

    /// Draw a negative class, gradient mask, and chain noise.
    pub fn draws_for(&self, class_id: usize, neg_rng: &mut RngStream, mask_rng: &mut RngStream, noise_rng: &mut RngStream) -> Result<StepDraws> {
        let cfg = self.config;
        let negative = select_negative_class(self.num_classes(), class_id, neg_rng)?;
        let mask = if cfg.fixed_suffix_mask {
            fixed_suffix_mask(cfg.t_steps, cfg.grad_steps)?
        } else {
            make_grad_mask(cfg.t_steps, cfg.grad_steps, mask_rng)?
        };
        let noise = ChainNoise::draw(cfg.batch_size, self.generator.config.latent_dim, cfg.t_steps, noise_rng);
        Ok(StepDraws {
            class_id,
            negative,
            mask,
            noise,
        })
    }

    /// One complete loss computation: generate a batch of the class, pick a
    /// negative text feature, encode images and the class description,
    /// then `L_en`, `L_in`, `L_bi`, `L_q`, and `L_total`. Gradients reach
    /// the adapter only through the enabled chain steps.
    pub fn compute_loss_step(
        &self,
        adapter: &LowRankAdapter,
        disc: &Discriminator,
        draws: &StepDraws,
        replay: Option<&[Option<Tensor>]>,
    ) -> Result<StepOutput> {
        let cfg = self.config;
        let n = draws.noise.rows();
        let res = self.generator.config.resolution;
        let mut g = Graph::new();
        let base = self.generator.base.bind(&mut g, false);
        let ba = BoundAdapter::bind(adapter, &mut g, true);
        let classes = vec![Some(draws.class_id); n];
        let sample = self.generator.sample_graph(
            &mut g,
            &base,
            Some((adapter, &ba)),
            &classes,
            cfg.guidance_scale,
            &draws.mask,
            &draws.noise,
            replay,
        )?;

        let enc = self.encoder.bind(&mut g);
        let f_im = enc.image_features(&mut g, sample.pixels);
        let f_te = g.constant(repeat_row(self.class_features.row(draws.negative), n));
        let f_pc = g.constant(repeat_row(self.descriptions.row(draws.class_id), n));

        let dvars = disc.params.bind(&mut g, false);
        let (l_en, gen_term) = entire_alignment_graph(&mut g, disc, &dvars, f_te, f_im, cfg.nonsaturating);
        let l_in = individual_alignment_graph(&mut g, f_im, f_pc);
        let logits = self.scorer.level_logits_graph(&mut g, sample.pixels, res);
        let l_q = quality_loss_graph(&mut g, logits);
        let l_q = g.mean(l_q);

        // ln D(f_te) is constant here, so the saturating objective has the
        // same adapter gradient as L_total itself.
        let adv = if cfg.nonsaturating { gen_term } else { l_en };
        let bi = g.add(adv, l_in);
        let q = g.scale(l_q, cfg.lambda_q);
        let objective = g.add(bi, q);

        let breakdown = LossBreakdown::compose(
            g.value(l_en).item(),
            g.value(l_in).item(),
            g.value(l_q).item(),
            cfg.lambda_q,
            draws.negative,
            draws.mask.clone(),
        );
        if !breakdown.l_total.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0, which: "L_total" });
        }
        let grads = g.backward(objective);
        let adapter_grads = ba.vars.grads(&g, &grads);
        let pixels = g.value(sample.pixels);
        let images = (0..n)
            .map(|r| ToyImage::new(res, pixels.row_slice(r).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(StepOutput {
            breakdown,
            adapter_grads,
            images,
            image_features: g.value(f_im).clone(),
            frozen_eps: sample.frozen_eps,
        })
    }

    /// Discriminator loss `-L_en` on detached image features and a negative
    /// text feature; returns `(L_en, gradient)`.
    pub fn discriminator_step_grads(&self, disc: &Discriminator, image_features: &Tensor, negative: usize) -> (f64, ParamSet) {
        let n = image_features.rows;
        let mut g = Graph::new();
        let vars = disc.params.bind(&mut g, true);
        let f_im = g.constant(image_features.clone());
        let f_te = g.constant(repeat_row(self.class_features.row(negative), n));
        let (l_en, _) = entire_alignment_graph(&mut g, disc, &vars, f_te, f_im, false);
        let objective = g.scale(l_en, -1.0);
        let grads = g.backward(objective);
        (g.value(l_en).item(), vars.grads(&g, &grads))
    }
}

/// One JSONL training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub class_id: usize,
    pub neg_class: usize,
    #[serde(rename = "L_en")]
    pub l_en: f64,
    #[serde(rename = "L_in")]
    pub l_in: Option<f64>,
    #[serde(rename = "L_bi")]
    pub l_bi: Option<f64>,
    #[serde(rename = "L_q")]
    pub l_q: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_steps: Option<Vec<usize>>,
}

impl LogRecord {
    fn generator(step: usize, class_id: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            kind: "G".into(),
            class_id,
            neg_class: b.sampled_negative_class,
            l_en: b.l_en,
            l_in: Some(b.l_in),
            l_bi: Some(b.l_bi),
            l_q: Some(b.l_q),
            l_total: b.l_total,
            grad_steps: Some(b.grad_mask.enabled_steps()),
        }
    }

    fn discriminator(step: usize, class_id: usize, negative: usize, l_en: f64) -> Self {
        Self {
            step,
            kind: "D".into(),
            class_id,
            neg_class: negative,
            l_en,
            l_in: None,
            l_bi: None,
            l_q: None,
            l_total: -l_en,
            grad_steps: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Parse a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Everything that changes during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Generator steps completed.
    pub step: usize,
    pub adapter: LowRankAdapter,
    pub disc: Discriminator,
    pub gen_opt: AdamW,
    pub disc_opt: AdamW,
}

impl TrainerState {
    /// Fresh zero-output adapter and discriminator for `generator`.
    pub fn init(generator: &Generator, config: &RunConfig) -> Result<Self> {
        let mut rng = derive_stream(config.seed, "trainer-init");
        let adapter = LowRankAdapter::new(&generator.base, config.adapter_rank, config.lora_alpha.unwrap_or(config.adapter_rank as f64), &mut rng.fork("adapter"))?;
        let disc = Discriminator::new(config.feature_dim, config.disc_hidden_width(), &mut rng.fork("disc"));
        let opts = OptimizerSettings::from_run(config);
        Ok(Self {
            step: 0,
            gen_opt: AdamW::new(opts.generator, &adapter.params),
            disc_opt: AdamW::new(opts.discriminator, &disc.params),
            adapter,
            disc,
        })
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "step": self.step,
                "adapter": {"rank": self.adapter.rank, "alpha": self.adapter.alpha},
                "disc": {"feature_dim": self.disc.feature_dim, "hidden": self.disc.hidden},
                "gen_opt": {"settings": self.gen_opt.settings, "step": self.gen_opt.step},
                "disc_opt": {"settings": self.disc_opt.settings, "step": self.disc_opt.step},
            }),
        );
        dump.insert_params("adapter", &self.adapter.params);
        dump.insert_params("disc", &self.disc.params);
        dump.insert_params("gen_opt.m", &self.gen_opt.m);
        dump.insert_params("gen_opt.v", &self.gen_opt.v);
        dump.insert_params("disc_opt.m", &self.disc_opt.m);
        dump.insert_params("disc_opt.v", &self.disc_opt.v);
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        let m = &dump.meta;
        let bad = || Error::Invalid("trainer checkpoint: malformed metadata".into());
        let uint = |v: &serde_json::Value| v.as_u64().ok_or_else(bad);
        let opt = |key: &str, prefix: &str| -> Result<AdamW> {
            Ok(AdamW {
                settings: serde_json::from_value(m[key]["settings"].clone())?,
                step: uint(&m[key]["step"])?,
                m: dump.params(&format!("{prefix}.m")),
                v: dump.params(&format!("{prefix}.v")),
            })
        };
        Ok(Self {
            step: uint(&m["step"])? as usize,
            adapter: LowRankAdapter {
                rank: uint(&m["adapter"]["rank"])? as usize,
                alpha: m["adapter"]["alpha"].as_f64().ok_or_else(bad)?,
                params: dump.params("adapter"),
            },
            disc: Discriminator {
                feature_dim: uint(&m["disc"]["feature_dim"])? as usize,
                hidden: uint(&m["disc"]["hidden"])? as usize,
                params: dump.params("disc"),
            },
            gen_opt: opt("gen_opt", "gen_opt")?,
            disc_opt: opt("disc_opt", "disc_opt")?,
        })
    }

    /// Atomic write; identical states give identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dump().save(path, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dump(&TensorDump::load(path, CHECKPOINT_KIND)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FinetuneOptions {
    /// Stop once this many generator steps have completed in total.
    pub stop_after: Option<usize>,
    /// Skip generator updates (discriminator still trains).
    pub freeze_generator: bool,
}

/// Summary of one generator/discriminator step pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub class_id: usize,
    pub breakdown: LossBreakdown,
    pub disc_negatives: Vec<usize>,
    pub disc_l_en: Vec<f64>,
    pub gen_clip_norm: f64,
    pub disc_clip_norms: Vec<f64>,
}

/// Run one generator update followed by the configured number of
/// discriminator updates on the detached batch features.
pub fn train_step(ctx: &TrainContext, state: &mut TrainerState, freeze_generator: bool) -> Result<StepReport> {
    let step = state.step;
    let draws = ctx.draw_step(step)?;
    let out = ctx.compute_loss_step(&state.adapter, &state.disc, &draws, None).map_err(|e| match e {
        Error::NonFiniteLoss { which, .. } => Error::NonFiniteLoss { step, which },
        e => e,
    })?;
    let mut grads = out.adapter_grads;
    let gen_clip_norm = if freeze_generator {
        0.0
    } else {
        state.gen_opt.update(&mut state.adapter.params, &mut grads).post_clip_norm
    };
    if !state.adapter.params.all_finite() {
        return Err(Error::NonFiniteLoss { step, which: "adapter" });
    }

    let mut disc_negatives = Vec::new();
    let mut disc_l_en = Vec::new();
    let mut disc_clip_norms = Vec::new();
    for d in 0..ctx.config.disc_steps_per_generator_step {
        let mut rng = ctx.step_stream(step, &format!("disc-negative/{d}"));
        let negative = select_negative_class(ctx.num_classes(), draws.class_id, &mut rng)?;
        let (l_en, mut grads) = ctx.discriminator_step_grads(&state.disc, &out.image_features, negative);
        if !l_en.is_finite() {
            return Err(Error::NonFiniteLoss { step, which: "discriminator L_en" });
        }
        disc_clip_norms.push(state.disc_opt.update(&mut state.disc.params, &mut grads).post_clip_norm);
        disc_negatives.push(negative);
        disc_l_en.push(l_en);
    }
    let report = StepReport {
        step,
        class_id: draws.class_id,
        breakdown: out.breakdown,
        disc_negatives,
        disc_l_en,
        disc_clip_norms,
        gen_clip_norm,
    };
    state.step += 1;
    Ok(report)
}

/// Train until `epochs × steps_per_epoch` generator steps (or `stop_after`)
/// have completed, appending G and D records to `log`.
pub fn finetune(ctx: &TrainContext, mut state: TrainerState, options: FinetuneOptions, log: &mut dyn Write) -> Result<TrainerState> {
    let total = ctx.config.total_steps();
    let end = options.stop_after.map_or(total, |s| s.min(total));
    while state.step < end {
        let report = train_step(ctx, &mut state, options.freeze_generator)?;
        write_records(log, &report)?;
    }
    log.flush().map_err(|e| Error::io(Path::new("<training log>"), e))?;
    Ok(state)
}

fn write_records(log: &mut dyn Write, report: &StepReport) -> Result<()> {
    let io = |e| Error::io(Path::new("<training log>"), e);
    writeln!(log, "{}", LogRecord::generator(report.step, report.class_id, &report.breakdown).to_json_line()).map_err(io)?;
    for (&negative, &l_en) in report.disc_negatives.iter().zip(&report.disc_l_en) {
        writeln!(log, "{}", LogRecord::discriminator(report.step, report.class_id, negative, l_en).to_json_line()).map_err(io)?;
    }
    Ok(())
}

/// Mean over `window` values starting at `start`.
pub fn window_mean(values: &[f64], start: usize, window: usize) -> Option<f64> {
    let slice = values.get(start..start + window)?;
    Some(slice.iter().sum::<f64>() / window as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::{tiny_config, ToyStack};
    use std::sync::OnceLock;

    fn stack() -> &'static ToyStack {
        static STACK: OnceLock<ToyStack> = OnceLock::new();
        STACK.get_or_init(|| ToyStack::build(&tiny_config()).unwrap())
    }

    fn perturbed_adapter(a: &LowRankAdapter) -> LowRankAdapter {
        let mut a = a.clone();
        let mut rng = derive_stream(7, "perturb");
        for (_, t) in a.params.iter_mut() {
            for v in &mut t.data {
                *v += 0.2 * rng.normal();
            }
        }
        a
    }

    #[test]
    fn zero_lambda_gives_bi_level_total() {
        let s = stack();
        let cfg = RunConfig { lambda_q: 0.0, ..tiny_config() };
        let ctx = s.context(&cfg).unwrap();
        let state = TrainerState::init(&s.generator, &cfg).unwrap();
        let out = ctx.compute_loss_step(&state.adapter, &state.disc, &ctx.draw_step(0).unwrap(), None).unwrap();
        let b = out.breakdown;
        assert_eq!(b.l_total, b.l_bi);
        assert_eq!(b.l_bi, b.l_en + b.l_in);
        assert!((0.0..=2.0).contains(&b.l_in));
    }

    #[test]
    fn negative_class_never_equals_class() {
        let s = stack();
        let cfg = tiny_config();
        let ctx = s.context(&cfg).unwrap();
        for step in 0..2000 {
            let d = ctx.draw_step(step).unwrap();
            assert_ne!(d.negative, d.class_id);
            assert_eq!(d.mask.count(), cfg.grad_steps);
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let s = stack();
        let cfg = tiny_config();
        let ctx = s.context(&cfg).unwrap();
        let state = TrainerState::init(&s.generator, &cfg).unwrap();
        let adapter = perturbed_adapter(&state.adapter);
        let draws = ctx.draw_step(3).unwrap();
        let out = ctx.compute_loss_step(&adapter, &state.disc, &draws, None).unwrap();
        let mut rng = derive_stream(0, "coords");
        let names: Vec<String> = adapter.params.names().cloned().collect();
        let h = 1e-5;
        for _ in 0..20 {
            let name = &names[rng.below(names.len())];
            let i = rng.below(adapter.params.get(name).len());
            let eval = |delta: f64| {
                let mut a = adapter.clone();
                a.params.get_mut(name).data[i] += delta;
                ctx.compute_loss_step(&a, &state.disc, &draws, Some(&out.frozen_eps)).unwrap().breakdown.l_total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = out.adapter_grads.get(name).data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(rel < 1e-3, "{name}[{i}]: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn updates_are_exclusive_and_clipped() {
        let s = stack();
        let cfg = tiny_config();
        let ctx = s.context(&cfg).unwrap();
        let mut state = TrainerState::init(&s.generator, &cfg).unwrap();
        let base = s.generator.base_hash();
        for _ in 0..4 {
            let before_disc = state.disc.param_hash();
            let draws = ctx.draw_step(state.step).unwrap();
            let out = ctx.compute_loss_step(&state.adapter, &state.disc, &draws, None).unwrap();
            let mut grads = out.adapter_grads;
            let clip = state.gen_opt.update(&mut state.adapter.params, &mut grads);
            assert!(clip.post_clip_norm <= 0.1 + 1e-9);
            assert_eq!(state.disc.param_hash(), before_disc);

            let before_adapter = state.adapter.param_hash();
            let (_, mut dgrads) = ctx.discriminator_step_grads(&state.disc, &out.image_features, draws.negative);
            let clip = state.disc_opt.update(&mut state.disc.params, &mut dgrads);
            assert!(clip.post_clip_norm <= 1.0 + 1e-9);
            assert_eq!(state.adapter.param_hash(), before_adapter);
            assert_eq!(s.generator.base_hash(), base);
            state.step += 1;
        }
    }

    #[test]
    fn log_alternates_and_runs_are_deterministic() {
        let s = stack();
        let cfg = tiny_config();
        let ctx = s.context(&cfg).unwrap();
        let run = || {
            let mut log = Vec::new();
            let state = finetune(&ctx, TrainerState::init(&s.generator, &cfg).unwrap(), FinetuneOptions::default(), &mut log).unwrap();
            (state.to_dump().to_bytes(Dtype::F64), log)
        };
        let (ckpt_a, log_a) = run();
        let (ckpt_b, log_b) = run();
        assert_eq!(ckpt_a, ckpt_b);
        assert_eq!(log_a, log_b);
        let records: Vec<LogRecord> = String::from_utf8(log_a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 2 * cfg.total_steps());
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.kind, if i % 2 == 0 { "G" } else { "D" });
            assert_eq!(r.step, i / 2);
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let s = stack();
        let cfg = tiny_config();
        let ctx = s.context(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");

        let mut full_log = Vec::new();
        let full = finetune(&ctx, TrainerState::init(&s.generator, &cfg).unwrap(), FinetuneOptions::default(), &mut full_log).unwrap();

        let mut log = Vec::new();
        let opts = FinetuneOptions { stop_after: Some(4), ..Default::default() };
        let partial = finetune(&ctx, TrainerState::init(&s.generator, &cfg).unwrap(), opts, &mut log).unwrap();
        partial.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        partial.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        let resumed = TrainerState::load(&path).unwrap();
        assert_eq!(resumed, partial);
        let resumed = finetune(&ctx, resumed, FinetuneOptions::default(), &mut log).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(log, full_log);
    }

    #[test]
    fn frozen_generator_keeps_adapter() {
        let s = stack();
        let cfg = tiny_config();
        let ctx = s.context(&cfg).unwrap();
        let init = TrainerState::init(&s.generator, &cfg).unwrap();
        let opts = FinetuneOptions { freeze_generator: true, ..Default::default() };
        let out = finetune(&ctx, init.clone(), opts, &mut std::io::sink()).unwrap();
        assert_eq!(out.adapter, init.adapter);
        assert_ne!(out.disc, init.disc);
    }
}
