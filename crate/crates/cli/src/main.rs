use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lbgen::encoder::DualEncoder;
use lbgen::evaluation::{
    evaluate_bias, fewshot_curve, metrics_from_predictions, read_predictions, transfer_features, write_predictions, Backbone,
    BackboneSettings, BenchmarkSizes, MetricsReport, DEFAULT_FRACTIONS,
};
use lbgen::generator::{Generator, LowRankAdapter};
use lbgen::report::{build_report, ReportInputs};
use lbgen::stack::{build_encoder, build_generator, ToyStack};
use lbgen::synthesis::{generate_dataset, load_dataset, validate_manifest, SynthConfig, MANIFEST_FILE};
use lbgen::trainer::{finetune, FinetuneOptions, LogRecord, TrainerState};
use lbgen::worldgen::World;
use lbgen::{derive_stream, load_config, RunConfig};

const CONFIG_ENV: &str = "LBGEN_CONFIG";

#[derive(Parser)]
#[command(name = "lbgen", version, about = "Toy low-bias dataset generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Run config JSON (falls back to $LBGEN_CONFIG, then defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "lbgen-out")]
    out: PathBuf,
    /// Worker threads for synthesis.
    #[arg(long)]
    workers: Option<usize>,
    /// Replace existing artifacts instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastively pre-train the image/text encoder.
    PretrainEncoder {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the decoder and pre-train the base denoiser on the biased world.
    PretrainGenerator {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a low-rank adapter with the alignment and quality losses.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Trainer checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many generator steps in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Generate a labeled dataset with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Synthesis settings JSON; defaults derive from the run config.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Render labeled samples from the synthetic world.
    WorldgenDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Bias strength (defaults to the config's rho_train).
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Texture inclination, context bias, and background gap.
    EvalBias {
        #[command(flatten)]
        common: Common,
        /// Existing prediction JSONL to score.
        #[arg(long, conflicts_with = "manifest")]
        predictions: Option<PathBuf>,
        /// Synthetic dataset to train a backbone on.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Linear-probe transfer and few-shot curves.
    EvalTransfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        probe_seeds: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        train_size: usize,
        #[arg(long, default_value_t = 1000)]
        test_size: usize,
    },
    /// Aggregate logs, manifests, and metrics into one JSON report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        metrics: Vec<PathBuf>,
        /// Also write a loss-curve PNG.
        #[arg(long)]
        plot: bool,
    },
    /// Run the whole toy experiment end to end.
    Demo {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PretrainEncoder { common }
            | Command::PretrainGenerator { common }
            | Command::Finetune { common, .. }
            | Command::Synth { common, .. }
            | Command::WorldgenDump { common, .. }
            | Command::EvalBias { common, .. }
            | Command::EvalTransfer { common, .. }
            | Command::Report { common, .. }
            | Command::Demo { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::PretrainEncoder { .. } => "pretrain-encoder",
            Command::PretrainGenerator { .. } => "pretrain-generator",
            Command::Finetune { .. } => "finetune",
            Command::Synth { .. } => "synth",
            Command::WorldgenDump { .. } => "worldgen-dump",
            Command::EvalBias { .. } => "eval-bias",
            Command::EvalTransfer { .. } => "eval-transfer",
            Command::Report { .. } => "report",
            Command::Demo { .. } => "demo",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => load_config(&p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory plus the overwrite policy for one command.
struct Outputs<'a> {
    dir: &'a Path,
    overwrite: bool,
    command: &'static str,
    cfg: &'a RunConfig,
    artifacts: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(common: &'a Common, command: &'static str, cfg: &'a RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self {
            dir: &common.out,
            overwrite: common.overwrite,
            command,
            cfg,
            artifacts: vec![],
        })
    }

    /// Refuse up front if any target exists and overwriting is off.
    fn claim(&mut self, names: &[&str]) -> Result<()> {
        let mut names: Vec<&str> = names.to_vec();
        let meta = self.meta_name();
        names.push(&meta);
        if !self.overwrite {
            let existing: Vec<String> = names
                .iter()
                .map(|n| self.dir.join(n))
                .filter(|p| p.exists())
                .map(|p| p.display().to_string())
                .collect();
            if !existing.is_empty() {
                bail!("refusing to overwrite existing artifacts (pass --overwrite): {}", existing.join(", "));
            }
        }
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_owned());
        }
        self.dir.join(name)
    }

    fn meta_name(&self) -> String {
        format!("{}.run_meta.json", self.command)
    }

    fn finish(self) -> Result<()> {
        let meta = json!({
            "command": self.command,
            "config_hash": self.cfg.hash_hex(),
            "seed": self.cfg.seed,
            "versions": { "lbgen": env!("CARGO_PKG_VERSION") },
            "artifacts": self.artifacts,
            "config": self.cfg,
        });
        let path = self.dir.join(self.meta_name());
        std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn load_or_build_encoder(path: Option<&Path>, cfg: &RunConfig) -> Result<DualEncoder> {
    Ok(match path {
        Some(p) => DualEncoder::load(p)?,
        None => build_encoder(cfg)?,
    })
}

fn load_or_build_generator(path: Option<&Path>, cfg: &RunConfig) -> Result<Generator> {
    Ok(match path {
        Some(p) => Generator::load(p)?,
        None => build_generator(cfg)?.0,
    })
}

fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let cfg = resolve_config(common)?;
    let name = command.name();
    match command {
        Command::PretrainEncoder { .. } => {
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&["encoder.bin"])?;
            let encoder = build_encoder(&cfg)?;
            encoder.save(&out.path("encoder.bin"))?;
            println!("encoder {}", encoder.param_hash());
            out.finish()
        }
        Command::PretrainGenerator { .. } => {
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&["generator.bin", "generator_pretrain.json"])?;
            let (generator, report) = build_generator(&cfg)?;
            generator.save(&out.path("generator.bin"))?;
            let summary = json!({ "initial_loss": report.initial_loss, "final_loss": report.final_loss });
            std::fs::write(out.path("generator_pretrain.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!("denoising loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
            out.finish()
        }
        Command::Finetune {
            encoder,
            generator,
            resume,
            stop_after,
            ..
        } => {
            let mut out = Outputs::new(common, name, &cfg)?;
            if resume.is_none() {
                out.claim(&["adapter.bin", "trainer_state.bin", "train_log.jsonl"])?;
            }
            let enc = load_or_build_encoder(encoder.as_deref(), &cfg)?;
            let gen = load_or_build_generator(generator.as_deref(), &cfg)?;
            run_finetune(&mut out, &cfg, enc, gen, resume.as_deref(), *stop_after)?;
            out.finish()
        }
        Command::Synth {
            generator,
            adapter,
            synth_config,
            per_class,
            steps,
            guidance,
            ..
        } => {
            let mut synth = match synth_config {
                Some(p) => SynthConfig::load(p)?,
                None => SynthConfig::from_run(&cfg),
            };
            if common.seed.is_some() {
                synth.seed_base = cfg.seed;
            }
            synth.per_class = per_class.unwrap_or(synth.per_class);
            synth.steps = steps.unwrap_or(synth.steps);
            synth.guidance_scale = guidance.unwrap_or(synth.guidance_scale);
            synth.workers = common.workers.unwrap_or(synth.workers);
            synth.validate()?;
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&[MANIFEST_FILE])?;
            let gen = load_or_build_generator(generator.as_deref(), &cfg)?;
            let adapter = adapter.as_deref().map(LowRankAdapter::load).transpose()?;
            run_synth(&mut out, &cfg, &gen, adapter.as_ref(), &synth)?;
            out.finish()
        }
        Command::WorldgenDump { count, rho, .. } => {
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&["labels.jsonl"])?;
            let world = World::new(cfg.num_classes, cfg.image_resolution)?;
            let items = world.sample_dataset(*count, rho.unwrap_or(cfg.rho_train), &mut derive_stream(cfg.seed, "worldgen-dump"))?;
            let mut labels = String::new();
            for (i, li) in items.iter().enumerate() {
                let file = format!("{i}.png");
                li.image.save_png(&out.path(&file))?;
                labels += &serde_json::to_string(&json!({
                    "file": file,
                    "class_id": li.class_id,
                    "attributes": li.attributes,
                    "uncommon_count": li.uncommon_count,
                }))?;
                labels.push('\n');
            }
            std::fs::write(out.path("labels.jsonl"), labels)?;
            out.finish()
        }
        Command::EvalBias { predictions, manifest, .. } => {
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&["bias_metrics.json", "predictions.jsonl"])?;
            let metrics = match (predictions, manifest) {
                (Some(p), _) => metrics_from_predictions(&read_predictions(p)?),
                (None, Some(m)) => run_eval_bias(&mut out, &cfg, m)?,
                (None, None) => bail!("eval-bias needs --predictions or --manifest"),
            };
            write_json(&out.path("bias_metrics.json"), &metrics)?;
            println!("TI {:?} CB_avg {:?} BG_Gap {:?}", metrics.ti, metrics.cb_avg, metrics.bg_gap);
            out.finish()
        }
        Command::EvalTransfer {
            manifest,
            fractions,
            probe_seeds,
            train_size,
            test_size,
            ..
        } => {
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&["transfer_metrics.json"])?;
            let fractions = fractions.clone().unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
            let metrics = run_eval_transfer(&cfg, manifest, &fractions, probe_seeds, *train_size, *test_size)?;
            write_json(&out.path("transfer_metrics.json"), &metrics)?;
            for p in &metrics.probe {
                println!("fraction {:.2} seed {}: {:.4}", p.train_fraction, p.seed, p.accuracy);
            }
            out.finish()
        }
        Command::Report {
            manifest, log, metrics, plot, ..
        } => {
            let inputs = ReportInputs {
                manifest: manifest.clone(),
                log: log.clone(),
                metrics: metrics.clone(),
            };
            let report = build_report(&inputs)?;
            let text = report.to_json()?;
            let mut out = Outputs::new(common, name, &cfg)?;
            out.claim(&["report.json", "summary.txt"])?;
            std::fs::write(out.path("report.json"), &text)?;
            std::fs::write(out.path("summary.txt"), report.summary())?;
            if *plot {
                let p = out.path("loss.png");
                report.write_loss_plot(&p)?;
            }
            print!("{text}");
            out.finish()
        }
        Command::Demo { .. } => run_demo(common, &cfg),
    }
}

fn write_json(path: &Path, value: &MetricsReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_finetune(out: &mut Outputs, cfg: &RunConfig, encoder: DualEncoder, generator: Generator, resume: Option<&Path>, stop_after: Option<usize>) -> Result<TrainerState> {
    let stack = ToyStack::from_parts(cfg, encoder, generator, None)?;
    let ctx = stack.context(cfg)?;
    let log_path = out.path("train_log.jsonl");
    let state = match resume {
        Some(p) => {
            let state = TrainerState::load(p)?;
            // Drop records past the checkpoint so the log matches a straight run.
            let text = if log_path.exists() { std::fs::read_to_string(&log_path)? } else { String::new() };
            let mut w = BufWriter::new(File::create(&log_path)?);
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: LogRecord = serde_json::from_str(line)?;
                if r.step < state.step {
                    writeln!(w, "{line}")?;
                }
            }
            w.flush()?;
            state
        }
        None => TrainerState::init(&stack.generator, cfg)?,
    };
    let file = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut log = BufWriter::new(file);
    let options = FinetuneOptions {
        stop_after,
        freeze_generator: false,
    };
    let state = finetune(&ctx, state, options, &mut log)?;
    state.save(&out.path("trainer_state.bin"))?;
    state.adapter.save(&out.path("adapter.bin"))?;
    println!("finetune stopped at step {} of {}", state.step, cfg.total_steps());
    Ok(state)
}

fn run_synth(out: &mut Outputs, cfg: &RunConfig, generator: &Generator, adapter: Option<&LowRankAdapter>, synth: &SynthConfig) -> Result<PathBuf> {
    let stack_vocab = lbgen::ClassVocabulary::numbered(cfg.num_classes);
    let scorer = lbgen::quality::MockScorer::from_config(cfg);
    let manifest = generate_dataset(generator, adapter, &stack_vocab, &scorer, synth, out.dir)?;
    out.path(MANIFEST_FILE);
    let report = validate_manifest(&manifest, Some(&scorer));
    if !report.is_clean() {
        bail!("manifest validation failed: {:?}", report.violations);
    }
    println!("wrote {} images to {}", report.records, out.dir.display());
    Ok(manifest)
}

fn train_backbone(cfg: &RunConfig, manifest: &Path) -> Result<Backbone> {
    let data = load_dataset(manifest)?;
    if let Some((img, _)) = data.first() {
        if img.resolution() != cfg.image_resolution {
            bail!("dataset resolution {} does not match config image_resolution {}", img.resolution(), cfg.image_resolution);
        }
    }
    Ok(Backbone::train(&data, cfg.num_classes, &BackboneSettings::default(), &mut derive_stream(cfg.seed, "backbone"))?)
}

fn run_eval_bias(out: &mut Outputs, cfg: &RunConfig, manifest: &Path) -> Result<MetricsReport> {
    let backbone = train_backbone(cfg, manifest)?;
    let world = World::new(cfg.num_classes, cfg.image_resolution)?;
    let (records, metrics) = evaluate_bias(&backbone, &world, &BenchmarkSizes::default(), cfg.seed)?;
    write_predictions(&out.path("predictions.jsonl"), &records)?;
    Ok(metrics)
}

fn run_eval_transfer(cfg: &RunConfig, manifest: &Path, fractions: &[f64], seeds: &[u64], n_train: usize, n_test: usize) -> Result<MetricsReport> {
    let backbone = train_backbone(cfg, manifest)?;
    let world = World::new(cfg.num_classes, cfg.image_resolution)?;
    let (train, test) = transfer_features(&backbone, &world, n_train, n_test, cfg.seed)?;
    let probe = fewshot_curve(&train, &test, cfg.num_classes, fractions, seeds, cfg.probe_l2)?;
    Ok(MetricsReport {
        probe,
        ..MetricsReport::default()
    })
}

fn run_demo(common: &Common, cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::new(common, "demo", cfg)?;
    out.claim(&["encoder.bin", "generator.bin", "report.json"])?;
    let encoder = build_encoder(cfg)?;
    encoder.save(&out.path("encoder.bin"))?;
    let (generator, pre) = build_generator(cfg)?;
    generator.save(&out.path("generator.bin"))?;
    println!("base denoiser loss {:.4} -> {:.4}", pre.initial_loss, pre.final_loss);

    let stage = |sub: &str| Common {
        out: common.out.join(sub),
        ..common.clone()
    };
    let ft = stage("finetune");
    let mut ft_out = Outputs::new(&ft, "finetune", cfg)?;
    ft_out.claim(&["adapter.bin", "trainer_state.bin", "train_log.jsonl"])?;
    let state = run_finetune(&mut ft_out, cfg, encoder, generator.clone(), None, None)?;
    let log = ft_out.path("train_log.jsonl");
    ft_out.finish()?;

    let mut synth = SynthConfig::from_run(cfg);
    synth.workers = common.workers.unwrap_or(synth.workers);
    let datasets = [("synth_base", None), ("synth_finetuned", Some(&state.adapter))];
    let mut manifests = Vec::new();
    for (sub, adapter) in datasets {
        let c = stage(sub);
        let mut o = Outputs::new(&c, "synth", cfg)?;
        o.claim(&[MANIFEST_FILE])?;
        manifests.push(run_synth(&mut o, cfg, &generator, adapter, &synth)?);
        o.finish()?;
    }

    let ev = stage("eval");
    let mut ev_out = Outputs::new(&ev, "eval", cfg)?;
    ev_out.claim(&["bias_metrics.json", "transfer_metrics.json", "predictions.jsonl"])?;
    let bias = run_eval_bias(&mut ev_out, cfg, &manifests[1])?;
    write_json(&ev_out.path("bias_metrics.json"), &bias)?;
    let transfer = run_eval_transfer(cfg, &manifests[1], &DEFAULT_FRACTIONS, &[0, 1, 2], 1000, 1000)?;
    write_json(&ev_out.path("transfer_metrics.json"), &transfer)?;
    let metric_paths = vec![ev_out.path("bias_metrics.json"), ev_out.path("transfer_metrics.json")];
    ev_out.finish()?;

    let report = build_report(&ReportInputs {
        manifest: Some(manifests[1].clone()),
        log: Some(log),
        metrics: metric_paths,
    })?;
    std::fs::write(out.path("report.json"), report.to_json()?)?;
    report.write_loss_plot(&out.path("loss.png"))?;
    print!("{}", report.summary());
    out.finish()
}
