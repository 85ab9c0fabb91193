//! Loss terms. The graph builders are what training differentiates; the
//! plain functions evaluate the same graphs on single-sample tensors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// λ_k per stage; empty means 1 for every stage.
    pub stages: Vec<f64>,
    pub point: f64,
    pub edge: f64,
    pub vis: f64,
    pub syn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stages: Vec::new(),
            point: 0.5,
            edge: 0.5,
            vis: 1.0,
            syn: 1.0,
        }
    }
}

impl LossWeights {
    pub fn stage_weights(&self, stacks: usize) -> Vec<f64> {
        if self.stages.is_empty() {
            vec![1.0; stacks]
        } else {
            self.stages.clone()
        }
    }

    pub fn problems(&self, stacks: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !self.stages.is_empty() && self.stages.len() != stacks {
            out.push(format!(
                "train.weights.stages has {} entries for {stacks} stacks",
                self.stages.len()
            ));
        }
        let all = self.stages.iter().chain([&self.point, &self.edge, &self.vis, &self.syn]);
        if all.into_iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            out.push("loss weights must be finite and >= 0".to_string());
        }
        out
    }
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub hm: f64,
    pub pt: f64,
    pub edge: f64,
    pub vis: f64,
    pub syn: f64,
}

/// Σ_k λ_k · (1/P) Σ_n w_n ‖Ĥᵏ_n − H_n‖². With `w_n = 1/N` this is the
/// batch mean of the per-sample loss.
pub fn heatmap_loss_var(
    g: &mut Graph,
    stages: &[Var],
    target: Arc<Tensor>,
    stage_weights: &[f64],
    sample_weights: Arc<Vec<f64>>,
) -> Var {
    let p = target.shape()[1] as f64;
    let terms: Vec<(Var, f64)> = stages
        .iter()
        .zip(stage_weights)
        .map(|(&h, &lam)| (g.sum_sq_diff(h, target.clone(), sample_weights.clone()), lam / p))
        .collect();
    g.weighted_sum(&terms)
}

/// (1/C) Σ_n w_n ‖X̂_n − X_n‖² for a `[N, C, h, w]` map.
pub fn map_loss_var(g: &mut Graph, pred: Var, target: Arc<Tensor>, sample_weights: Arc<Vec<f64>>) -> Var {
    let c = target.shape()[1] as f64;
    let s = g.sum_sq_diff(pred, target, sample_weights);
    g.scale(s, 1.0 / c)
}

/// (1/P) Σ_n w_n Σ_p BCE(v̂_np, y_np).
pub fn visibility_loss_var(g: &mut Graph, probs: Var, labels: Arc<Tensor>, sample_weights: Arc<Vec<f64>>) -> Var {
    let p = labels.shape()[1] as f64;
    let s = g.bce(probs, labels, sample_weights);
    g.scale(s, 1.0 / p)
}

fn batch1(t: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s).unwrap()
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Single-sample heatmap loss over `[P, h, w]` stage maps.
pub fn heatmap_loss(stage_heatmaps: &[Tensor], target: &Tensor, stage_weights: &[f64]) -> Result<f64> {
    if stage_heatmaps.len() != stage_weights.len() {
        return Err(Error::Shape(format!(
            "{} stages but {} weights",
            stage_heatmaps.len(),
            stage_weights.len()
        )));
    }
    for h in stage_heatmaps {
        same_shape(h, target, "heatmap loss")?;
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = stage_heatmaps.iter().map(|h| g.input(batch1(h))).collect();
    let l = heatmap_loss_var(&mut g, &vars, Arc::new(batch1(target)), stage_weights, Arc::new(vec![1.0]));
    Ok(g.value(l).item())
}

/// Single-sample (L_pt, L_edge).
pub fn aux_map_losses(
    point_pred: &Tensor,
    edge_pred: &Tensor,
    point_target: &Tensor,
    edge_target: &Tensor,
) -> Result<(f64, f64)> {
    same_shape(point_pred, point_target, "point map loss")?;
    same_shape(edge_pred, edge_target, "edge map loss")?;
    let mut g = Graph::new();
    let p = g.input(batch1(point_pred));
    let e = g.input(batch1(edge_pred));
    let lp = map_loss_var(&mut g, p, Arc::new(batch1(point_target)), Arc::new(vec![1.0]));
    let le = map_loss_var(&mut g, e, Arc::new(batch1(edge_target)), Arc::new(vec![1.0]));
    Ok((g.value(lp).item(), g.value(le).item()))
}

/// Single-sample BCE averaged over landmarks, probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn visibility_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "visibility loss lengths {} vs {}",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len();
    let mut g = Graph::new();
    let p = g.input(Tensor::from_vec(&[1, n], probs.to_vec())?);
    let y = Tensor::from_vec(&[1, n], labels.iter().map(|&v| v as f64).collect())?;
    let l = visibility_loss_var(&mut g, p, Arc::new(y), Arc::new(vec![1.0]));
    Ok(g.value(l).item())
}

/// L = L_hm + λ_pt L_pt + λ_edge L_edge + λ_vis L_vis + λ_syn L̃_vis, with
/// the visibility terms dropped during warm start.
pub fn total_loss(c: &LossComponents, w: &LossWeights, warm_start: bool) -> Result<f64> {
    for (name, v) in [("L_hm", c.hm), ("L_pt", c.pt), ("L_edge", c.edge), ("L_vis", c.vis), ("L_syn", c.syn)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    let (lv, ls) = if warm_start { (0.0, 0.0) } else { (w.vis, w.syn) };
    Ok(c.hm + w.point * c.pt + w.edge * c.edge + lv * c.vis + ls * c.syn)
}
