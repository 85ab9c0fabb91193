//! Metric kernels. Labels use 1 = occluded (the positive class) and scores
//! are occlusion scores `1 − v̂`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_points(pred: &[[f64; 2]], gt: &[[f64; 2]], d: f64) -> Result<()> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid("d", format!("normalizer must be positive, got {d}")));
    }
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted points vs {} ground truth", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    Ok(())
}

/// Per-point errors `‖ŝ_p − s_p‖ / d`.
pub fn normalized_errors(pred: &[[f64; 2]], gt: &[[f64; 2]], d: f64) -> Result<Vec<f64>> {
    check_points(pred, gt, d)?;
    Ok(pred.iter().zip(gt).map(|(&a, &b)| distance(a, b) / d).collect())
}

/// Normalized mean error of one sample.
pub fn nme(pred: &[[f64; 2]], gt: &[[f64; 2]], d: f64) -> Result<f64> {
    let e = normalized_errors(pred, gt, d)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

fn mean_where(e: &[f64], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (i, &x) in e.iter().enumerate() {
        if keep(i) {
            s += x;
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

fn check_binary(labels: &[u8], name: &str) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::invalid(name, format!("labels must be 0 or 1, got {l}"))),
        None => Ok(()),
    }
}

/// NME over visible and occluded points of one sample; `None` for an
/// empty subset.
pub fn nme_split(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    visibility: &[u8],
    d: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    let e = normalized_errors(pred, gt, d)?;
    if visibility.len() != e.len() {
        return Err(Error::Shape(format!("{} visibility flags for {} points", visibility.len(), e.len())));
    }
    check_binary(visibility, "visibility")?;
    Ok((
        mean_where(&e, |i| visibility[i] == 1),
        mean_where(&e, |i| visibility[i] == 0),
    ))
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("occlusion scores".into()));
    }
    check_binary(labels, "labels")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean precision at the rank of each positive.
    #[default]
    FiniteSample,
    /// Mean interpolated precision at recall 0, 0.01, …, 1.
    Interpolated101,
}

/// Indices sorted by descending score; equal scores keep input order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Whether any two scores are equal, which makes AP depend on input order.
pub fn has_ties(scores: &[f64]) -> bool {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// `(recall, precision)` after each ranked item.
fn ranked_pr(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut tp = 0.0;
    ranking(scores)
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            tp += labels[i] as f64;
            (tp / pos, tp / (r + 1) as f64)
        })
        .collect()
}

pub fn occ_ap(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    occ_ap_with(scores, labels, ApMode::FiniteSample)
}

pub fn occ_ap_with(scores: &[f64], labels: &[u8], mode: ApMode) -> Result<Option<f64>> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Ok(None);
    }
    let pr = ranked_pr(scores, labels);
    Ok(Some(match mode {
        ApMode::FiniteSample => {
            let order = ranking(scores);
            let s: f64 = order
                .iter()
                .zip(&pr)
                .filter(|(&i, _)| labels[i] == 1)
                .map(|(_, &(_, p))| p)
                .sum();
            s / pos as f64
        }
        ApMode::Interpolated101 => {
            let mut s = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                s += pr
                    .iter()
                    .filter(|&&(rec, _)| rec >= r - 1e-12)
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
            }
            s / 101.0
        }
    }))
}

/// F1 of the rule "occluded iff score ≥ τ".
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], tau: f64) -> Result<f64> {
    check_scores(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= tau, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    Ok(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

/// Mann–Whitney AUC with ties counted one half, via midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Failure rate and normalized area under the cumulative error
/// distribution on `[0, cutoff]`.
///
/// The CED is a step function, so its integral is taken exactly:
/// `∫₀ᶜ F(x) dx / c = mean(max(0, 1 − e/c))`.
pub fn error_curve_stats(nmes: &[f64], cutoff: f64) -> Result<(f64, f64)> {
    if nmes.is_empty() {
        return Err(Error::Empty("per-sample NME list".into()));
    }
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::invalid("cutoff", format!("must be positive, got {cutoff}")));
    }
    if nmes.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::NonFinite("per-sample NME".into()));
    }
    let n = nmes.len() as f64;
    let fr = nmes.iter().filter(|&&e| e > cutoff).count() as f64 / n;
    let auc = nmes.iter().map(|&e| (1.0 - e / cutoff).max(0.0)).sum::<f64>() / n;
    Ok((fr, auc))
}

/// Points `(x, fraction of samples with NME ≤ x)` at each sorted NME up to
/// `cutoff`, closed at both ends.
pub fn ced_curve(nmes: &[f64], cutoff: f64) -> Vec<(f64, f64)> {
    let mut s = nmes.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out = vec![(0.0, s.iter().filter(|&&e| e <= 0.0).count() as f64 / n)];
    for (i, &e) in s.iter().enumerate() {
        if e > 0.0 && e <= cutoff && s.get(i + 1) != Some(&e) {
            out.push((e, (i + 1) as f64 / n));
        }
    }
    let last = s.iter().filter(|&&e| e <= cutoff).count() as f64 / n;
    out.push((cutoff, last));
    out
}

/// `(threshold, recall, precision)` at each distinct score, descending.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    check_scores(scores, labels)?;
    if !labels.contains(&1) {
        return Ok(Vec::new());
    }
    let order = ranking(scores);
    let pr = ranked_pr(scores, labels);
    Ok((0..order.len())
        .filter(|&r| r + 1 == order.len() || scores[order[r + 1]] != scores[order[r]])
        .map(|r| (scores[order[r]], pr[r].0, pr[r].1))
        .collect())
}
