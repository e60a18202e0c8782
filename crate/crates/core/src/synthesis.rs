//! Synthetic dataset generation: sample every class from a (fine-tuned)
//! generator, score each image, and write PNGs plus a JSONL manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::generator::{Generator, LowRankAdapter};
use crate::image::ToyImage;
use crate::quality::QualityScorer;
use crate::rng::{derive_stream, mix64};
use crate::vocab::ClassVocabulary;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub resolution: usize,
    pub per_class: usize,
    pub seed_base: u64,
    pub workers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance_scale: 2.0,
            resolution: 16,
            per_class: 5,
            seed_base: 0,
            workers: 1,
        }
    }
}

impl SynthConfig {
    pub fn from_run(cfg: &crate::RunConfig) -> Self {
        Self {
            steps: cfg.t_steps,
            guidance_scale: cfg.guidance_scale,
            resolution: cfg.image_resolution,
            seed_base: cfg.seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Invalid("per_class must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::ZeroSteps);
        }
        if self.workers == 0 {
            return Err(Error::Invalid("workers must be >= 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Invalid("guidance_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub class_id: usize,
    pub class_name: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub steps: usize,
    pub quality_score: f64,
}

/// Seed of image `index` of `class_id`: `seed_base ⊕ mix64(class_id << 32 | index)`.
pub fn image_seed(seed_base: u64, class_id: usize, index: usize) -> u64 {
    seed_base ^ mix64(((class_id as u64) << 32) | index as u64)
}

/// Sample one image deterministically from its seed.
pub fn synthesize_image(generator: &Generator, adapter: Option<&LowRankAdapter>, class_id: usize, seed: u64, guidance: f64) -> Result<ToyImage> {
    let mut rng = derive_stream(seed, "synth");
    let (image, _) = generator.sample(adapter, Some(class_id), guidance, &mut rng)?;
    Ok(image.quantized())
}

/// Write `C × per_class` images under `out_dir/{class_id}/{index}.png` and a
/// manifest sorted by `(class_id, index)`. Output bytes do not depend on the
/// worker count.
pub fn generate_dataset(
    generator: &Generator,
    adapter: Option<&LowRankAdapter>,
    vocab: &ClassVocabulary,
    scorer: &dyn QualityScorer,
    synth: &SynthConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    synth.validate()?;
    if vocab.len() != generator.config.num_classes {
        return Err(Error::Invalid(format!(
            "vocabulary has {} classes but the generator checkpoint has {}",
            vocab.len(),
            generator.config.num_classes
        )));
    }
    if synth.resolution != generator.config.resolution {
        return Err(Error::ResolutionMismatch {
            expected: generator.config.resolution,
            got: synth.resolution,
        });
    }
    if let Some(a) = adapter {
        a.check_compatible(&generator.base)?;
    }
    let chain = generator.with_steps(synth.steps)?;
    for c in 0..vocab.len() {
        let dir = out_dir.join(c.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..vocab.len())
        .flat_map(|c| (0..synth.per_class).map(move |i| (c, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(synth.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    let records: Vec<ManifestRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(class_id, index)| {
                let seed = image_seed(synth.seed_base, class_id, index);
                let image = synthesize_image(&chain, adapter, class_id, seed, synth.guidance_scale)?;
                let file = format!("{class_id}/{index}.png");
                let path = out_dir.join(&file);
                std::fs::write(&path, image.encode_png()?).map_err(|e| Error::io(&path, e))?;
                Ok(ManifestRecord {
                    file,
                    class_id,
                    class_name: vocab.name(class_id)?.to_owned(),
                    seed,
                    guidance_scale: synth.guidance_scale,
                    steps: synth.steps,
                    quality_score: scorer.score(&image),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    // `jobs` is already in (class_id, index) order and collect preserves it.
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_atomic(&manifest, text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Images and labels listed in a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<(ToyImage, usize)>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| Ok((ToyImage::load_png(&root.join(&r.file))?, r.class_id)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Parse,
    MissingFile,
    ScoreRange,
    ScoreMismatch,
    InvalidField,
    ClassCoverage,
    ClassBalance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based manifest line, if the problem belongs to one record.
    pub line: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestReport {
    pub records: usize,
    pub per_class: BTreeMap<usize, usize>,
    pub violations: Vec<Violation>,
}

impl ManifestReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every record, file presence, class coverage and balance, and score
/// ranges. With a scorer, scores are also recomputed from the PNGs.
pub fn validate_manifest(path: &Path, scorer: Option<&dyn QualityScorer>) -> ManifestReport {
    let mut violations = Vec::new();
    let mut per_class = BTreeMap::new();
    let mut records = 0;
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            return ManifestReport {
                records: 0,
                per_class,
                violations: vec![Violation {
                    line: None,
                    kind: ViolationKind::MissingFile,
                    message: format!("{}: {e}", path.display()),
                }],
            }
        }
    };
    let root = path.parent().unwrap_or(Path::new("."));
    let mut flag = |line, kind, message: String| violations.push(Violation { line, kind, message });
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ln = Some(i + 1);
        let r: ManifestRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                flag(ln, ViolationKind::Parse, e.to_string());
                continue;
            }
        };
        records += 1;
        *per_class.entry(r.class_id).or_insert(0) += 1;
        if !(1.0..=5.0).contains(&r.quality_score) {
            flag(ln, ViolationKind::ScoreRange, format!("quality_score {} outside [1, 5]", r.quality_score));
        }
        if r.class_name.trim().is_empty() || r.steps == 0 || !(r.guidance_scale >= 0.0) {
            flag(ln, ViolationKind::InvalidField, "empty class_name, zero steps, or negative guidance".into());
        }
        let file = root.join(&r.file);
        match ToyImage::load_png(&file) {
            Err(_) if !file.exists() => flag(ln, ViolationKind::MissingFile, format!("{} does not exist", r.file)),
            Err(e) => flag(ln, ViolationKind::InvalidField, format!("{}: {e}", r.file)),
            Ok(img) => {
                if let Some(s) = scorer {
                    let score = s.score(&img);
                    if (score - r.quality_score).abs() > 1e-6 {
                        flag(ln, ViolationKind::ScoreMismatch, format!("{}: recorded {} vs recomputed {score}", r.file, r.quality_score));
                    }
                }
            }
        }
    }
    if let Some(&max) = per_class.keys().max() {
        for c in 0..=max {
            if !per_class.contains_key(&c) {
                flag(None, ViolationKind::ClassCoverage, format!("class {c} has no records"));
            }
        }
    }
    let counts: Vec<usize> = per_class.values().copied().collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        flag(None, ViolationKind::ClassBalance, format!("unequal per-class counts {per_class:?}"));
    }
    ManifestReport {
        records,
        per_class,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::MockScorer;
    use crate::stack::{build_generator, tiny_config};
    use std::sync::OnceLock;

    fn generator() -> &'static Generator {
        static G: OnceLock<Generator> = OnceLock::new();
        G.get_or_init(|| build_generator(&tiny_config()).unwrap().0)
    }

    fn synth(workers: usize) -> SynthConfig {
        SynthConfig {
            steps: 4,
            resolution: 8,
            per_class: 4,
            workers,
            seed_base: 11,
            ..SynthConfig::default()
        }
    }

    fn run(workers: usize, dir: &Path) -> PathBuf {
        let vocab = ClassVocabulary::numbered(3);
        generate_dataset(generator(), None, &vocab, &MockScorer::default(), &synth(workers), dir).unwrap()
    }

    #[test]
    fn manifest_has_one_line_per_image_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(2, dir.path());
        let records = read_manifest(&m).unwrap();
        assert_eq!(records.len(), 12);
        let report = validate_manifest(&m, Some(&MockScorer::default()));
        assert!(report.is_clean(), "{:?}", report.violations);
        assert_eq!(report.per_class.values().copied().collect::<Vec<_>>(), vec![4, 4, 4]);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = run(1, a.path());
        let mb = run(4, b.path());
        assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
        for c in 0..3 {
            for i in 0..4 {
                let f = format!("{c}/{i}.png");
                assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
            }
        }
    }

    #[test]
    fn faults_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(1, dir.path());
        std::fs::remove_file(dir.path().join("1/2.png")).unwrap();
        let report = validate_manifest(&m, None);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::MissingFile);

        let text = std::fs::read_to_string(&m).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut r: ManifestRecord = serde_json::from_str(&lines[0]).unwrap();
        r.quality_score = 6.0;
        lines[0] = serde_json::to_string(&r).unwrap();
        std::fs::write(&m, lines.join("\n")).unwrap();
        let report = validate_manifest(&m, None);
        assert!(report.violations.iter().any(|v| v.kind == ViolationKind::ScoreRange && v.line == Some(1)));
    }

    #[test]
    fn mismatched_vocabulary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClassVocabulary::numbered(4);
        assert!(generate_dataset(generator(), None, &vocab, &MockScorer::default(), &synth(1), dir.path()).is_err());
    }

    #[test]
    fn seeds_differ_per_image() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..10 {
            for i in 0..100 {
                assert!(seen.insert(image_seed(0, c, i)));
            }
        }
    }
}
