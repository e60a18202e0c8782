//! Aggregates a training log, a synthesis manifest, and a metrics file into
//! one deterministic JSON report plus a plain-text summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{MetricsReport, ProbeResult};
use crate::image::ToyImage;
use crate::synthesis::read_manifest;
use crate::trainer::read_log;

pub const HISTOGRAM_BINS: usize = 8;
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub manifest: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub metrics: Vec<PathBuf>,
}

impl ReportInputs {
    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        self.manifest.iter().chain(&self.log).chain(&self.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub generator_steps: Vec<usize>,
    #[serde(rename = "L_en")]
    pub l_en: Vec<f64>,
    #[serde(rename = "L_in")]
    pub l_in: Vec<f64>,
    #[serde(rename = "L_q")]
    pub l_q: Vec<f64>,
    #[serde(rename = "L_total")]
    pub l_total: Vec<f64>,
    pub discriminator_steps: Vec<usize>,
    #[serde(rename = "D_L_en")]
    pub disc_l_en: Vec<f64>,
    /// Window means of `L_in` over the first and last steps.
    #[serde(rename = "L_in_first_window")]
    pub l_in_first: Option<f64>,
    #[serde(rename = "L_in_last_window")]
    pub l_in_last: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub per_class_mean: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotPoint {
    pub train_fraction: f64,
    pub mean_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub loss_curves: Option<LossCurves>,
    pub quality_histogram: Option<QualityHistogram>,
    #[serde(rename = "TI")]
    pub ti: Option<f64>,
    #[serde(rename = "CB_avg")]
    pub cb_avg: Option<f64>,
    #[serde(rename = "BG_Gap")]
    pub bg_gap: Option<f64>,
    pub fewshot: Vec<FewshotPoint>,
    pub ti_excludes_neither: bool,
    pub warnings: Vec<String>,
}

pub fn loss_curves(records: &[crate::trainer::LogRecord]) -> LossCurves {
    let mut c = LossCurves {
        generator_steps: vec![],
        l_en: vec![],
        l_in: vec![],
        l_q: vec![],
        l_total: vec![],
        discriminator_steps: vec![],
        disc_l_en: vec![],
        l_in_first: None,
        l_in_last: None,
    };
    for r in records {
        if r.kind == "D" {
            c.discriminator_steps.push(r.step);
            c.disc_l_en.push(r.l_en);
        } else {
            c.generator_steps.push(r.step);
            c.l_en.push(r.l_en);
            c.l_in.push(r.l_in.unwrap_or(f64::NAN));
            c.l_q.push(r.l_q.unwrap_or(f64::NAN));
            c.l_total.push(r.l_total);
        }
    }
    let n = c.l_in.len();
    if n >= SMOOTHING_WINDOW {
        c.l_in_first = crate::trainer::window_mean(&c.l_in, 0, SMOOTHING_WINDOW);
        c.l_in_last = crate::trainer::window_mean(&c.l_in, n - SMOOTHING_WINDOW, SMOOTHING_WINDOW);
    }
    c
}

/// Histogram of scores over `[1, 5]` in equal-width bins.
pub fn quality_histogram(scores: &[(usize, f64)]) -> Option<QualityHistogram> {
    if scores.is_empty() {
        return None;
    }
    let width = 4.0 / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|i| 1.0 + width * i as f64).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(class, s) in scores {
        let bin = (((s - 1.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
        let e = sums.entry(class).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    Some(QualityHistogram {
        edges,
        counts,
        mean: scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64,
        per_class_mean: sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
    })
}

/// Group probe results by training fraction, largest fraction first.
pub fn fewshot_points(probes: &[ProbeResult]) -> Vec<FewshotPoint> {
    let mut groups: Vec<FewshotPoint> = Vec::new();
    for p in probes {
        match groups.iter_mut().find(|g| g.train_fraction == p.train_fraction) {
            Some(g) => {
                g.accuracies.push(p.accuracy);
                g.seeds.push(p.seed);
            }
            None => groups.push(FewshotPoint {
                train_fraction: p.train_fraction,
                mean_accuracy: 0.0,
                accuracies: vec![p.accuracy],
                seeds: vec![p.seed],
            }),
        }
    }
    for g in &mut groups {
        g.mean_accuracy = g.accuracies.iter().sum::<f64>() / g.accuracies.len() as f64;
    }
    groups.sort_by(|a, b| b.train_fraction.total_cmp(&a.train_fraction));
    groups
}

/// Build the report. Every supplied path must exist; absent inputs produce
/// null sections and a warning. Several metrics files are merged, later
/// values taking precedence.
pub fn build_report(inputs: &ReportInputs) -> Result<Report> {
    let missing: Vec<String> = inputs.paths().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("missing report inputs: {}", missing.join(", "))));
    }
    let mut report = Report {
        loss_curves: None,
        quality_histogram: None,
        ti: None,
        cb_avg: None,
        bg_gap: None,
        fewshot: vec![],
        ti_excludes_neither: true,
        warnings: vec![],
    };
    match &inputs.log {
        Some(p) => report.loss_curves = Some(loss_curves(&read_log(p)?)),
        None => report.warnings.push("no training log supplied".into()),
    }
    match &inputs.manifest {
        Some(p) => {
            let scores: Vec<(usize, f64)> = read_manifest(p)?.iter().map(|r| (r.class_id, r.quality_score)).collect();
            report.quality_histogram = quality_histogram(&scores);
            if report.quality_histogram.is_none() {
                report.warnings.push("manifest has no records".into());
            }
        }
        None => report.warnings.push("no manifest supplied".into()),
    }
    if inputs.metrics.is_empty() {
        report.warnings.push("no metrics supplied".into());
    }
    let mut probes = Vec::new();
    for p in &inputs.metrics {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let m: MetricsReport = serde_json::from_str(&text)?;
        report.ti = m.ti.or(report.ti);
        report.cb_avg = m.cb_avg.or(report.cb_avg);
        report.bg_gap = m.bg_gap.or(report.bg_gap);
        report.ti_excludes_neither &= m.ti_excludes_neither;
        probes.extend(m.probe);
        report.warnings.extend(m.warnings);
    }
    report.fewshot = fewshot_points(&probes);
    for (name, v) in [("TI", report.ti), ("CB_avg", report.cb_avg), ("BG_Gap", report.bg_gap)] {
        if v.is_none() {
            report.warnings.push(format!("{name} unavailable"));
        }
    }
    Ok(report)
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.2}"));
        let mut out = String::new();
        if let Some(c) = &self.loss_curves {
            out += &format!(
                "training: {} generator steps, {} discriminator steps\n",
                c.generator_steps.len(),
                c.discriminator_steps.len()
            );
            if let (Some(a), Some(b)) = (c.l_in_first, c.l_in_last) {
                out += &format!("L_in window mean: {a:.4} -> {b:.4}\n");
            }
        }
        if let Some(h) = &self.quality_histogram {
            out += &format!("quality: mean {:.3} over {} images\n", h.mean, h.counts.iter().sum::<usize>());
        }
        out += &format!("TI {}  CB_avg {}  BG_Gap {}\n", fmt(self.ti), fmt(self.cb_avg), fmt(self.bg_gap));
        for p in &self.fewshot {
            out += &format!("probe @ {:.2}: {:.4}\n", p.train_fraction, p.mean_accuracy);
        }
        for w in &self.warnings {
            out += &format!("warning: {w}\n");
        }
        out
    }

    /// Write a line plot of the loss curves as a PNG, if any exist.
    pub fn write_loss_plot(&self, path: &Path) -> Result<bool> {
        let Some(c) = &self.loss_curves else { return Ok(false) };
        if c.l_total.is_empty() {
            return Ok(false);
        }
        let series: [(&[f64], [f64; 3]); 3] = [
            (&c.l_total, [0.1, 0.1, 0.1]),
            (&c.l_in, [0.1, 0.3, 0.9]),
            (&c.disc_l_en, [0.9, 0.2, 0.1]),
        ];
        plot_series(&series, 128).save_png(path)?;
        Ok(true)
    }
}

fn plot_series(series: &[(&[f64], [f64; 3])], res: usize) -> ToyImage {
    let mut img = ToyImage::filled(res, [1.0, 1.0, 1.0]);
    let finite = || series.iter().flat_map(|s| s.0.iter().copied()).filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return img;
    }
    let span = (hi - lo).max(1e-12);
    for (values, color) in series {
        if values.is_empty() {
            continue;
        }
        for x in 0..res {
            let i = x * values.len() / res;
            let v = values[i];
            if !v.is_finite() {
                continue;
            }
            let y = res - 1 - (((v - lo) / span) * (res - 1) as f64).round() as usize;
            for (ch, &c) in color.iter().enumerate() {
                img.set(y, x, ch, c);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_inputs_give_null_metrics_and_warnings() {
        let r = build_report(&ReportInputs::default()).unwrap();
        assert!(r.ti.is_none() && r.cb_avg.is_none() && r.bg_gap.is_none());
        assert!(r.warnings.len() >= 3);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(v["TI"].is_null());
    }

    #[test]
    fn missing_inputs_are_listed() {
        let inputs = ReportInputs {
            log: Some("/nonexistent/log.jsonl".into()),
            ..Default::default()
        };
        let err = build_report(&inputs).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/log.jsonl"));
    }

    #[test]
    fn histogram_bins_cover_range() {
        let h = quality_histogram(&[(0, 1.0), (0, 5.0), (1, 3.0)]).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 1);
        assert_eq!(h.per_class_mean[&0], 3.0);
    }

    #[test]
    fn fewshot_points_group_by_fraction() {
        let p = |f, s, a| ProbeResult {
            accuracy: a,
            train_fraction: f,
            seed: s,
            iterations: 1,
        };
        let pts = fewshot_points(&[p(0.1, 0, 0.5), p(1.0, 0, 0.9), p(0.1, 1, 0.7)]);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].train_fraction, 1.0);
        assert!((pts[1].mean_accuracy - 0.6).abs() < 1e-12);
        assert_eq!(pts[1].seeds, vec![0, 1]);
    }
}
