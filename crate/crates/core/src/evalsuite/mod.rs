//! Occlusion-aware evaluation: NME and its visible/occluded split, occlusion
//! classification metrics and error-curve statistics.

mod metrics;

pub use metrics::{
    ced_curve, error_curve_stats, f1_at_threshold, has_ties, nme, nme_split, normalized_errors, occ_ap,
    occ_ap_with, pr_curve, ranking, roc_auc, ApMode,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, AnnotatedSample};
use crate::error::{Error, Result};
use crate::layout::OUTER_EYE_CORNERS;
use crate::model::{Model, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Normalization {
    /// Outer eye-corner distance, or the box diagonal when either corner is
    /// occluded in the ground truth.
    InterOcular,
    BoxDiagonal,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Pool every landmark instance.
    #[default]
    Micro,
    /// Compute per landmark index, then average the defined values.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub normalization: Normalization,
    pub tau: f64,
    pub cutoff: f64,
    pub averaging: Averaging,
    pub ap_mode: ApMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::InterOcular,
            tau: 0.5,
            cutoff: 0.1,
            averaging: Averaging::Micro,
            ap_mode: ApMode::FiniteSample,
        }
    }
}

impl MetricConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.tau > 0.0 && self.tau < 1.0) {
            out.push(format!("eval.tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            out.push(format!("eval.cutoff must be positive, got {}", self.cutoff));
        }
        if let Normalization::Fixed(d) = self.normalization {
            if !(d > 0.0 && d.is_finite()) {
                out.push(format!("eval.normalization fixed value must be positive, got {d}"));
            }
        }
        out
    }

    /// Normalizer `d` for one ground-truth sample.
    pub fn normalizer(&self, sample: &AnnotatedSample) -> f64 {
        let diag = sample.bbox.width.hypot(sample.bbox.height);
        match self.normalization {
            Normalization::Fixed(d) => d,
            Normalization::BoxDiagonal => diag,
            Normalization::InterOcular => {
                let (a, b) = OUTER_EYE_CORNERS;
                if sample.visibility[a] == 1 && sample.visibility[b] == 1 {
                    let (p, q) = (sample.points[a], sample.points[b]);
                    let d = (p[0] - q[0]).hypot(p[1] - q[1]);
                    if d > 0.0 {
                        return d;
                    }
                }
                diag
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nme: f64,
    pub nme_vis: Option<f64>,
    pub nme_occ: Option<f64>,
    pub occ_ap: Option<f64>,
    pub f1: f64,
    pub roc_auc: Option<f64>,
    pub fr: f64,
    pub ced_auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub vis: usize,
    pub occ: usize,
}

/// Data behind the CED and PR plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub per_sample_nme: Vec<f64>,
    /// `[threshold, recall, precision]`
    pub pr: Vec<[f64; 3]>,
    /// True when equal occlusion scores made AP depend on input order.
    pub ap_ties: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub metrics: Metrics,
    pub per_landmark_nme: Vec<f64>,
    pub counts: Counts,
    pub curves: Curves,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `(x, fraction ≤ x)` points of the cumulative error distribution.
    pub fn ced_points(&self) -> Vec<(f64, f64)> {
        ced_curve(&self.curves.per_sample_nme, self.config.cutoff)
    }
}

/// Predictions that reproduce the ground truth exactly.
pub fn oracle_predictions(samples: &[AnnotatedSample]) -> Vec<Prediction> {
    samples
        .iter()
        .map(|s| Prediction {
            points: s.points.clone(),
            visibility: s.visibility.iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

fn ranking_metrics(scores: &[f64], labels: &[u8], cfg: &MetricConfig) -> Result<(Option<f64>, f64, Option<f64>)> {
    Ok((
        occ_ap_with(scores, labels, cfg.ap_mode)?,
        f1_at_threshold(scores, labels, cfg.tau)?,
        roc_auc(scores, labels)?,
    ))
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores predictions against their ground-truth samples.
pub fn evaluate_predictions(
    samples: &[AnnotatedSample],
    preds: &[Prediction],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let p = samples[0].points.len();
    let mut errors = Vec::with_capacity(samples.len() * p);
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len() * p);
    let mut labels = Vec::with_capacity(samples.len() * p);
    for (s, pr) in samples.iter().zip(preds) {
        s.validate()?;
        if pr.visibility.len() != p {
            return Err(Error::Shape(format!("{} visibility outputs for {p} points", pr.visibility.len())));
        }
        let e = normalized_errors(&pr.points, &s.points, cfg.normalizer(s))?;
        per_sample.push(e.iter().sum::<f64>() / p as f64);
        errors.extend(e);
        scores.extend(pr.visibility.iter().map(|v| 1.0 - v));
        labels.extend(s.visibility.iter().map(|&v| 1 - v));
    }
    let n = samples.len();
    let total = errors.len() as f64;
    let nme = errors.iter().sum::<f64>() / total;
    let (mut sv, mut so, mut nv, mut no) = (0.0, 0.0, 0usize, 0usize);
    for (e, &l) in errors.iter().zip(&labels) {
        if l == 0 {
            sv += e;
            nv += 1;
        } else {
            so += e;
            no += 1;
        }
    }
    let per_landmark_nme = (0..p)
        .map(|k| (0..n).map(|i| errors[i * p + k]).sum::<f64>() / n as f64)
        .collect();
    let (occ_ap, f1, auc) = match cfg.averaging {
        Averaging::Micro => ranking_metrics(&scores, &labels, cfg)?,
        Averaging::Macro => {
            let per: Vec<_> = (0..p)
                .map(|k| {
                    let s: Vec<f64> = (0..n).map(|i| scores[i * p + k]).collect();
                    let l: Vec<u8> = (0..n).map(|i| labels[i * p + k]).collect();
                    ranking_metrics(&s, &l, cfg)
                })
                .collect::<Result<_>>()?;
            (
                mean_defined(per.iter().map(|r| r.0)),
                per.iter().map(|r| r.1).sum::<f64>() / p as f64,
                mean_defined(per.iter().map(|r| r.2)),
            )
        }
    };
    let (fr, ced_auc) = error_curve_stats(&per_sample, cfg.cutoff)?;
    let pr = pr_curve(&scores, &labels)?.into_iter().map(|(t, r, p)| [t, r, p]).collect();
    Ok(MetricReport {
        config: cfg.clone(),
        metrics: Metrics {
            nme,
            nme_vis: (nv > 0).then(|| sv / nv as f64),
            nme_occ: (no > 0).then(|| so / no as f64),
            occ_ap,
            f1,
            roc_auc: auc,
            fr,
            ced_auc,
        },
        per_landmark_nme,
        counts: Counts { vis: nv, occ: no },
        curves: Curves {
            per_sample_nme: per_sample,
            pr,
            ap_ties: has_ties(&scores),
        },
    })
}

/// Runs inference over `samples` and scores it.
pub fn evaluate(model: &Model, samples: &[AnnotatedSample], cfg: &MetricConfig) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let preds = model.predict_samples(samples, 32)?;
    evaluate_predictions(samples, &preds, cfg)
}

/// Validation NME of each candidate decode temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    /// `[temperature, nme]` in grid order.
    pub grid: Vec<[f64; 2]>,
    /// Lowest-NME temperature; the earliest wins a tie.
    pub best: f64,
}

/// Scores every temperature in `grid` by NME on `samples`.
pub fn fit_temperature(
    model: &Model,
    samples: &[AnnotatedSample],
    cfg: &MetricConfig,
    grid: &[f64],
) -> Result<TemperatureFit> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration split".into()));
    }
    if grid.is_empty() {
        return Err(Error::Empty("temperature grid".into()));
    }
    let located = model.locate_samples(samples, 32, grid)?;
    let mut scored = Vec::with_capacity(grid.len());
    for (&t, points) in grid.iter().zip(&located) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (s, p) in samples.iter().zip(points) {
            let e = normalized_errors(p, &s.points, cfg.normalizer(s))?;
            sum += e.iter().sum::<f64>();
            count += e.len();
        }
        scored.push([t, sum / count as f64]);
    }
    let best = scored
        .iter()
        .fold(scored[0], |b, c| if c[1] < b[1] { *c } else { b })[0];
    Ok(TemperatureFit { grid: scored, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_sample, SceneParams};

    fn samples(n: u64) -> Vec<AnnotatedSample> {
        let scene = SceneParams {
            image_size: 48,
            ..SceneParams::default()
        };
        (0..n).map(|s| synthesize_sample(s + 11, &scene).unwrap()).collect()
    }

    #[test]
    fn temperature_fit_agrees_with_full_evaluation() {
        let mut mc = crate::model::ModelConfig::default();
        mc.backbone.stacks = 1;
        mc.backbone.channels = 8;
        mc.backbone.crop_h = 16;
        mc.backbone.crop_w = 16;
        mc.visibility.proj_channels = 4;
        let mut model = Model::new(&mc, &crate::layout::LandmarkLayout::bundled()).unwrap();
        let s = samples(3);
        let cfg = MetricConfig::default();
        let grid = [0.5, 0.05, 2.0];
        let fit = fit_temperature(&model, &s, &cfg, &grid).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for (t, row) in grid.iter().zip(&fit.grid) {
            model.config.temperature = *t;
            let full = evaluate(&model, &s, &cfg).unwrap().metrics.nme;
            assert_eq!(row[0], *t);
            assert!((row[1] - full).abs() < 1e-12, "{t}: {} vs {full}", row[1]);
            if full < best.0 {
                best = (full, *t);
            }
        }
        assert_eq!(fit.best, best.1);
        assert!(fit_temperature(&model, &s, &cfg, &[]).is_err());
        assert!(fit_temperature(&model, &s, &cfg, &[0.0]).is_err());
        assert!(fit_temperature(&model, &[], &cfg, &grid).is_err());
    }

    #[test]
    fn oracle_predictor_is_perfect() {
        let s = samples(6);
        assert!(s.iter().any(|x| x.visibility.contains(&0)));
        let r = evaluate_predictions(&s, &oracle_predictions(&s), &MetricConfig::default()).unwrap();
        let m = &r.metrics;
        assert_eq!(m.nme, 0.0);
        assert_eq!((m.occ_ap, m.f1, m.roc_auc), (Some(1.0), 1.0, Some(1.0)));
        assert_eq!((m.fr, m.ced_auc), (0.0, 1.0));
        assert_eq!(r.counts.vis + r.counts.occ, 100 * s.len());
    }

    #[test]
    fn always_visible_predictor_has_zero_f1() {
        let s = samples(6);
        let mut preds = oracle_predictions(&s);
        for p in &mut preds {
            p.visibility = vec![1.0; 100];
        }
        let r = evaluate_predictions(&s, &preds, &MetricConfig::default()).unwrap();
        assert_eq!(r.metrics.f1, 0.0);
        assert_eq!(r.metrics.roc_auc, Some(0.5));
        assert!(r.curves.ap_ties);
    }

    #[test]
    fn nulls_when_nothing_is_occluded() {
        let mut s = samples(2);
        for x in &mut s {
            x.visibility = vec![1; 100];
        }
        let mut preds = oracle_predictions(&s);
        preds[0].points[3][0] += 1.0;
        let r = evaluate_predictions(&s, &preds, &MetricConfig::default()).unwrap();
        assert_eq!(r.metrics.nme_occ, None);
        assert_eq!(r.metrics.occ_ap, None);
        assert_eq!(r.metrics.roc_auc, None);
        assert_eq!(r.metrics.nme_vis, Some(r.metrics.nme));
        let json = r.to_json().unwrap();
        assert!(json.contains("\"occ_ap\": null"));
    }

    #[test]
    fn decomposition_identity_and_round_trip() {
        let s = samples(5);
        let mut preds = oracle_predictions(&s);
        for (i, p) in preds.iter_mut().enumerate() {
            for (k, q) in p.points.iter_mut().enumerate() {
                q[0] += ((i * 7 + k * 3) % 5) as f64 * 0.3;
                q[1] -= ((i + k) % 4) as f64 * 0.2;
            }
            p.visibility = (0..100).map(|k| ((k * 13 + i) % 10) as f64 / 10.0).collect();
        }
        for averaging in [Averaging::Micro, Averaging::Macro] {
            let cfg = MetricConfig {
                averaging,
                ..MetricConfig::default()
            };
            let r = evaluate_predictions(&s, &preds, &cfg).unwrap();
            let (v, o) = (r.counts.vis as f64, r.counts.occ as f64);
            let m = &r.metrics;
            let combined = (v * m.nme_vis.unwrap() + o * m.nme_occ.unwrap()) / (v + o);
            assert!((combined - m.nme).abs() < 1e-12);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("report.json");
            r.save(&path).unwrap();
            assert_eq!(MetricReport::load(&path).unwrap(), r);
        }
    }

    #[test]
    fn normalizer_falls_back_to_box_diagonal() {
        let mut s = samples(1).remove(0);
        let cfg = MetricConfig::default();
        let (a, b) = OUTER_EYE_CORNERS;
        s.visibility[a] = 1;
        s.visibility[b] = 1;
        let io = cfg.normalizer(&s);
        let d = (s.points[a][0] - s.points[b][0]).hypot(s.points[a][1] - s.points[b][1]);
        assert_eq!(io, d);
        s.visibility[b] = 0;
        assert_eq!(cfg.normalizer(&s), s.bbox.width.hypot(s.bbox.height));
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = samples(2);
        let preds = oracle_predictions(&s);
        assert!(matches!(
            evaluate_predictions(&[], &[], &MetricConfig::default()),
            Err(Error::Empty(_))
        ));
        assert!(evaluate_predictions(&s, &preds[..1], &MetricConfig::default()).is_err());
        let bad = MetricConfig {
            tau: 1.0,
            ..MetricConfig::default()
        };
        assert!(matches!(evaluate_predictions(&s, &preds, &bad), Err(Error::Config(_))));
    }
}
