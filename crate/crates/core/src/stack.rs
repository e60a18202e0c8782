//! The frozen pre-trained components of a toy experiment, built from a run
//! config.

use crate::encoder::{pretrain_contrastive, DualEncoder, EncoderConfig};
use crate::error::Result;
use crate::generator::{build_base_generator, Generator, PretrainReport};
use crate::quality::MockScorer;
use crate::rng::derive_stream;
use crate::trainer::TrainContext;
use crate::vocab::ClassVocabulary;
use crate::worldgen::World;
use crate::RunConfig;

pub struct ToyStack {
    pub config: RunConfig,
    pub world: World,
    pub vocab: ClassVocabulary,
    pub encoder: DualEncoder,
    pub generator: Generator,
    pub generator_report: Option<PretrainReport>,
    pub scorer: MockScorer,
}

/// Contrastively pre-train the encoder on unbiased world images.
pub fn build_encoder(cfg: &RunConfig) -> Result<DualEncoder> {
    cfg.validate()?;
    let world = World::new(cfg.num_classes, cfg.image_resolution)?;
    let vocab = ClassVocabulary::numbered(cfg.num_classes);
    let mut rng = derive_stream(cfg.seed, "encoder-pretrain");
    pretrain_contrastive(&world, &vocab, EncoderConfig::from_run(cfg), cfg.encoder_steps, cfg.encoder_lr, &mut rng)
}

/// Fit the decoder and pre-train the base denoiser on the biased world.
pub fn build_generator(cfg: &RunConfig) -> Result<(Generator, PretrainReport)> {
    cfg.validate()?;
    build_base_generator(cfg, &mut derive_stream(cfg.seed, "generator-pretrain"))
}

impl ToyStack {
    /// Pre-train both the encoder and the base generator.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let encoder = build_encoder(cfg)?;
        let (generator, report) = build_generator(cfg)?;
        Self::from_parts(cfg, encoder, generator, Some(report))
    }

    pub fn from_parts(cfg: &RunConfig, encoder: DualEncoder, generator: Generator, report: Option<PretrainReport>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            world: World::new(cfg.num_classes, cfg.image_resolution)?,
            vocab: ClassVocabulary::numbered(cfg.num_classes),
            encoder,
            generator,
            generator_report: report,
            scorer: MockScorer::from_config(cfg),
        })
    }

    /// Training context for `cfg` (which may differ from the build config in
    /// seed or fine-tuning settings).
    pub fn context<'a>(&'a self, cfg: &'a RunConfig) -> Result<TrainContext<'a>> {
        TrainContext::new(&self.generator, &self.encoder, &self.scorer, &self.vocab, cfg)
    }
}

/// A small configuration for fast tests and smoke runs.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        num_classes: 3,
        image_resolution: 8,
        latent_shape: 6,
        t_steps: 4,
        grad_steps: 2,
        feature_dim: 8,
        batch_size: 2,
        encoder_steps: 60,
        encoder_width: 16,
        generator_steps: 60,
        generator_hidden: 16,
        steps_per_epoch: 5,
        epochs: 2,
        ..RunConfig::default()
    }
}
