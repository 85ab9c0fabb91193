//! Supervision targets: Gaussian landmark heatmaps, the point map and the
//! polyline-distance edge map, all at heatmap resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LandmarkLayout;
use crate::tensor::Tensor;

/// Widths (in heatmap cells) of the three target families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub sigma: f64,
    pub sigma_point: f64,
    pub sigma_edge: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            sigma_point: 1.0,
            sigma_edge: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    /// `[P, h', w']`
    pub heatmaps: Tensor,
    /// `[P, h', w']`
    pub point_map: Tensor,
    /// `[N_E, h', w']`
    pub edge_map: Tensor,
    pub sigma: f64,
}

/// Crop pixel coordinates → heatmap cell coordinates. Cell `u` covers crop
/// pixels `[u·stride, (u+1)·stride)` and is centred at `(u + 0.5)·stride`.
pub fn crop_to_heatmap(p: [f64; 2], stride: usize) -> [f64; 2] {
    let s = stride as f64;
    [p[0] / s - 0.5, p[1] / s - 0.5]
}

/// Inverse of [`crop_to_heatmap`].
pub fn heatmap_to_crop(p: [f64; 2], stride: usize) -> [f64; 2] {
    let s = stride as f64;
    [(p[0] + 0.5) * s, (p[1] + 0.5) * s]
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be > 0, got {sigma}")))
    }
}

fn fill_gaussian(dst: &mut [f64], s: [f64; 2], sigma: f64, w: usize) {
    let denom = 2.0 * sigma * sigma;
    for (i, v) in dst.iter_mut().enumerate() {
        let (u, vv) = ((i % w) as f64, (i / w) as f64);
        let d2 = (u - s[0]).powi(2) + (vv - s[1]).powi(2);
        *v = (-d2 / denom).exp();
    }
}

/// `exp(−‖(u,v) − s‖² / 2σ²)` on an `h×w` grid, `s = (u, v)` = (column, row).
pub fn gaussian_heatmap(s: [f64; 2], sigma: f64, h: usize, w: usize) -> Result<Tensor> {
    check_sigma("sigma", sigma)?;
    let mut t = Tensor::zeros(&[h, w]);
    fill_gaussian(t.data_mut(), s, sigma, w);
    Ok(t)
}

/// One Gaussian channel per point, `[P, h, w]`.
pub fn build_point_map(points: &[[f64; 2]], sigma: f64, h: usize, w: usize) -> Result<Tensor> {
    check_sigma("sigma_point", sigma)?;
    let mut t = Tensor::zeros(&[points.len(), h, w]);
    for (c, p) in points.iter().enumerate() {
        fill_gaussian(&mut t.data_mut()[c * h * w..(c + 1) * h * w], *p, sigma, w);
    }
    Ok(t)
}

/// Euclidean distance from `q` to segment `ab`; a degenerate segment is a point.
pub fn point_segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((q[0] - a[0]) * dx + (q[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a[0] + t * dx, a[1] + t * dy);
    ((q[0] - px).powi(2) + (q[1] - py).powi(2)).sqrt()
}

/// `exp(−d((u,v), Γ_e)² / 2σ²)` per edge, where `Γ_e` is the polyline through
/// that edge's landmarks. Output `[N_E, h, w]`.
pub fn build_edge_map(
    layout: &LandmarkLayout,
    points: &[[f64; 2]],
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    check_sigma("sigma_edge", sigma)?;
    if points.len() != layout.num_points() {
        return Err(Error::Shape(format!(
            "edge map needs {} points, got {}",
            layout.num_points(),
            points.len()
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let mut t = Tensor::zeros(&[layout.num_edges(), h, w]);
    for (e, edge) in layout.edges().iter().enumerate() {
        let verts: Vec<[f64; 2]> = edge.point_indices.iter().map(|&i| points[i]).collect();
        let dst = &mut t.data_mut()[e * h * w..(e + 1) * h * w];
        for (i, v) in dst.iter_mut().enumerate() {
            let q = [(i % w) as f64, (i / w) as f64];
            let d = verts
                .windows(2)
                .map(|s| point_segment_distance(q, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            *v = (-d * d / denom).exp();
        }
    }
    Ok(t)
}

/// All three target families for points given in crop pixel coordinates.
pub fn build_targets(
    layout: &LandmarkLayout,
    points_crop: &[[f64; 2]],
    stride: usize,
    map_h: usize,
    map_w: usize,
    cfg: &TargetConfig,
) -> Result<TargetMaps> {
    let pts: Vec<[f64; 2]> = points_crop
        .iter()
        .map(|&p| crop_to_heatmap(p, stride))
        .collect();
    Ok(TargetMaps {
        heatmaps: build_point_map(&pts, cfg.sigma, map_h, map_w)?,
        point_map: build_point_map(&pts, cfg.sigma_point, map_h, map_w)?,
        edge_map: build_edge_map(layout, &pts, cfg.sigma_edge, map_h, map_w)?,
        sigma: cfg.sigma,
    })
}
