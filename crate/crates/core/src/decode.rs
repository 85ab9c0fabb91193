//! Edge-evidence aggregation, heatmap reweighting and expectation decoding.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layout::LandmarkLayout;
use crate::targets::heatmap_to_crop;
use crate::tensor::Tensor;

/// Graph handles of a decode pass; `coords` are heatmap coordinates
/// `[N, P, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    pub evidence: Option<Var>,
    pub mask: Option<Var>,
    pub attention: Var,
    pub coords: Var,
}

/// Decode results for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// `[P, h', w']`, each channel a distribution.
    pub attention: Tensor,
    /// Crop coordinates.
    pub coords: Vec<[f64; 2]>,
    /// `[P, h', w']`
    pub evidence: Tensor,
    /// `[P, h', w']`
    pub mask: Tensor,
}

pub fn membership_groups(layout: &LandmarkLayout) -> Arc<Vec<Vec<usize>>> {
    Arc::new(layout.edge_membership().to_vec())
}

/// Â_p = Σ_{e ∈ 𝓔(p)} Ê_e, ones for landmarks without edges.
pub fn evidence_var(g: &mut Graph, edge_pred: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
    g.gather_sum(edge_pred, groups)
}

/// Mask M̂ = P̂ ⊙ Â (either factor may be absent), reweighted logits
/// Ĥ ⊙ M̂, spatial softmax at `temperature` and expected coordinates.
pub fn decode_vars(
    g: &mut Graph,
    heatmaps: Var,
    point_pred: Option<Var>,
    evidence: Option<Var>,
    temperature: f64,
) -> DecodeVars {
    let mask = match (point_pred, evidence) {
        (Some(p), Some(a)) => Some(g.mul(p, a)),
        (Some(p), None) => Some(p),
        (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    let logits = match mask {
        Some(m) => g.mul(heatmaps, m),
        None => heatmaps,
    };
    let attention = g.spatial_softmax(logits, temperature);
    let coords = g.expectation(attention);
    DecodeVars {
        evidence,
        mask,
        attention,
        coords,
    }
}

fn check_map(name: &str, t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(Error::Shape(format!("{name} {s:?}, expected [{channels}, h, w]")));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok((s[1], s[2]))
}

fn batch1(t: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s).unwrap()
}

fn unbatch(t: &Tensor) -> Tensor {
    t.clone().reshape(&t.shape()[1..]).unwrap()
}

/// Single-sample `edge_pred: [N_E, h', w']` → `[P, h', w']`.
pub fn aggregate_edge_evidence(edge_pred: &Tensor, layout: &LandmarkLayout) -> Result<Tensor> {
    check_map("edge_pred", edge_pred, layout.num_edges())?;
    let mut g = Graph::new();
    let e = g.input(batch1(edge_pred));
    let a = evidence_var(&mut g, e, membership_groups(layout));
    Ok(unbatch(g.value(a)))
}

/// Single-sample decode of `heatmaps: [P, h', w']`; coordinates are
/// returned in crop pixels using `stride`.
pub fn reweight_and_decode(
    heatmaps: &Tensor,
    point_pred: &Tensor,
    evidence: &Tensor,
    temperature: f64,
    stride: usize,
) -> Result<DecodeResult> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature", "must be positive and finite"));
    }
    let p = heatmaps.shape().first().copied().unwrap_or(0);
    let hw = check_map("heatmaps", heatmaps, p)?;
    if check_map("point_pred", point_pred, p)? != hw || check_map("evidence", evidence, p)? != hw {
        return Err(Error::Shape("decode inputs disagree on map size".into()));
    }
    let mut g = Graph::new();
    let h = g.input(batch1(heatmaps));
    let pp = g.input(batch1(point_pred));
    let ev = g.input(batch1(evidence));
    let d = decode_vars(&mut g, h, Some(pp), Some(ev), temperature);
    Ok(DecodeResult {
        attention: unbatch(g.value(d.attention)),
        coords: coords_to_crop(g.value(d.coords), 0, stride),
        evidence: evidence.clone(),
        mask: unbatch(g.value(d.mask.unwrap())),
    })
}

/// Reads sample `i` of a `[N, P, 2]` heatmap-coordinate tensor as crop
/// coordinates.
pub fn coords_to_crop(coords: &Tensor, i: usize, stride: usize) -> Vec<[f64; 2]> {
    coords
        .slab(i)
        .chunks(2)
        .map(|c| heatmap_to_crop([c[0], c[1]], stride))
        .collect()
}
