//! Landmark-aware masking: random occluders on the crop, their
//! heatmap-resolution mask, and pseudo visibility labels from mask/heatmap
//! overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{hash_noise, Occluder, OccluderShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub count: [usize; 2],
    /// Area of each shape as a fraction of the crop.
    pub area: [f64; 2],
    /// Overlap threshold δ.
    pub delta: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            count: [1, 3],
            area: [0.02, 0.25],
            delta: 0.5,
        }
    }
}

impl MaskParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.count[0] > self.count[1] {
            out.push("train.masking.count: min > max".to_string());
        }
        if !(0.0 <= self.area[0] && self.area[0] <= self.area[1] && self.area[1] <= 1.0) {
            out.push(format!("train.masking.area: bad range {:?}", self.area));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            out.push(format!("train.masking.delta must lie in (0, 1], got {}", self.delta));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Solid([f64; 3]),
    /// Per-pixel uniform colour noise.
    Noise(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    /// `[h, w]` binary mask at crop resolution.
    pub crop_mask: Tensor,
    /// `[h', w']` binary mask at heatmap resolution.
    pub map_mask: Tensor,
    pub fill: Fill,
    pub delta: f64,
}

impl MaskSpec {
    /// Rasterizes `shapes` (crop pixel coordinates) and downsamples by
    /// `stride` with area averaging, keeping cells at least half covered.
    pub fn from_shapes(
        shapes: &[Occluder],
        fill: Fill,
        crop_h: usize,
        crop_w: usize,
        stride: usize,
        delta: f64,
    ) -> Result<Self> {
        if stride == 0 || crop_h % stride != 0 || crop_w % stride != 0 {
            return Err(Error::invalid("stride", "must divide the crop size"));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::invalid("delta", format!("must lie in (0, 1], got {delta}")));
        }
        let mut crop_mask = Tensor::zeros(&[crop_h, crop_w]);
        for r in 0..crop_h {
            for c in 0..crop_w {
                let p = [c as f64 + 0.5, r as f64 + 0.5];
                let inside = shapes
                    .iter()
                    .any(|o| o.half_size[0] > 0.0 && o.half_size[1] > 0.0 && o.contains(p));
                if inside {
                    crop_mask.data_mut()[r * crop_w + c] = 1.0;
                }
            }
        }
        let (mh, mw) = (crop_h / stride, crop_w / stride);
        let mut map_mask = Tensor::zeros(&[mh, mw]);
        let cell = (stride * stride) as f64;
        for v in 0..mh {
            for u in 0..mw {
                let mut covered = 0.0;
                for r in v * stride..(v + 1) * stride {
                    for c in u * stride..(u + 1) * stride {
                        covered += crop_mask.data()[r * crop_w + c];
                    }
                }
                if covered / cell >= 0.5 {
                    map_mask.data_mut()[v * mw + u] = 1.0;
                }
            }
        }
        Ok(Self {
            crop_mask,
            map_mask,
            fill,
            delta,
        })
    }
}

/// Random occluders on an `crop_h × crop_w` crop, deterministic per seed.
pub fn sample_mask(seed: u64, crop_h: usize, crop_w: usize, stride: usize, params: &MaskParams) -> Result<MaskSpec> {
    let problems = params.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(params.count[0]..=params.count[1]);
    let crop_area = (crop_h * crop_w) as f64;
    let shapes: Vec<Occluder> = (0..n)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                OccluderShape::Rect
            } else {
                OccluderShape::Ellipse
            };
            let frac = rng.gen_range(params.area[0]..=params.area[1]);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let unit = match shape {
                OccluderShape::Rect => 4.0,
                OccluderShape::Ellipse => std::f64::consts::PI,
            };
            let a = frac * crop_area / unit;
            Occluder {
                shape,
                center: [rng.gen::<f64>() * crop_w as f64, rng.gen::<f64>() * crop_h as f64],
                half_size: [(a * aspect).sqrt(), (a / aspect).sqrt()],
                color: [0.0; 3],
                noise: 0.0,
                noise_seed: 0,
            }
        })
        .collect();
    let fill = if rng.gen_bool(0.5) {
        Fill::Solid([rng.gen(), rng.gen(), rng.gen()])
    } else {
        Fill::Noise(rng.gen())
    };
    MaskSpec::from_shapes(&shapes, fill, crop_h, crop_w, stride, params.delta)
}

/// ṽ_p = 1 iff ⟨M, H_p / ΣH_p⟩ < δ. A channel with zero mass has zero
/// overlap and is labeled visible.
pub fn pseudo_visibility(map_mask: &Tensor, heatmaps: &Tensor, delta: f64) -> Result<Vec<u8>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1], got {delta}")));
    }
    let ms = map_mask.shape();
    let hs = heatmaps.shape();
    if ms.len() != 2 || hs.len() != 3 || hs[1] != ms[0] || hs[2] != ms[1] {
        return Err(Error::Shape(format!("mask {ms:?} vs heatmaps {hs:?}")));
    }
    let hw = ms[0] * ms[1];
    Ok(heatmaps
        .data()
        .chunks(hw)
        .map(|h| {
            let mass: f64 = h.iter().sum();
            let overlap = if mass > 0.0 {
                h.iter().zip(map_mask.data()).map(|(a, m)| a * m).sum::<f64>() / mass
            } else {
                0.0
            };
            u8::from(overlap < delta)
        })
        .collect())
}

/// Applies the fill over masked crop pixels of `crop: [3, h, w]`.
pub fn masked_view(crop: &Tensor, spec: &MaskSpec) -> Result<Tensor> {
    let s = crop.shape();
    if s.len() != 3 || s[0] != 3 || s[1..] != *spec.crop_mask.shape() {
        return Err(Error::Shape(format!(
            "crop {s:?} vs mask {:?}",
            spec.crop_mask.shape()
        )));
    }
    let hw = s[1] * s[2];
    let mut out = crop.clone();
    for (i, &m) in spec.crop_mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for k in 0..3 {
            out.data_mut()[k * hw + i] = match spec.fill {
                Fill::Solid(c) => c[k],
                Fill::Noise(seed) => 0.5 + 0.5 * hash_noise(seed, (k * hw + i) as u64),
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::gaussian_heatmap;
    use proptest::prelude::{prop_assert, proptest};

    fn full_rect(h: usize, w: usize) -> Occluder {
        Occluder {
            shape: OccluderShape::Rect,
            center: [w as f64 / 2.0, h as f64 / 2.0],
            half_size: [w as f64 / 2.0, h as f64 / 2.0],
            color: [0.0; 3],
            noise: 0.0,
            noise_seed: 0,
        }
    }

    #[test]
    fn zero_area_gives_empty_mask() {
        let p = MaskParams {
            area: [0.0, 0.0],
            ..MaskParams::default()
        };
        let m = sample_mask(4, 16, 16, 4, &p).unwrap();
        assert!(m.crop_mask.data().iter().all(|&v| v == 0.0));
        assert!(m.map_mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covering_rectangle_gives_full_mask() {
        let m = MaskSpec::from_shapes(&[full_rect(16, 16)], Fill::Solid([0.2; 3]), 16, 16, 4, 0.5).unwrap();
        assert!(m.crop_mask.data().iter().all(|&v| v == 1.0));
        assert!(m.map_mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_same_mask() {
        let p = MaskParams::default();
        assert_eq!(sample_mask(9, 32, 32, 4, &p).unwrap(), sample_mask(9, 32, 32, 4, &p).unwrap());
        assert!(sample_mask(9, 32, 32, 4, &MaskParams { delta: 0.0, ..p }).is_err());
    }

    #[test]
    fn pseudo_labels_extremes() {
        let h = Tensor::from_vec(
            &[2, 3, 3],
            [gaussian_heatmap([1.0, 1.0], 1.0, 3, 3).unwrap().into_data(), vec![0.1; 9]].concat(),
        )
        .unwrap();
        assert_eq!(pseudo_visibility(&Tensor::zeros(&[3, 3]), &h, 0.5).unwrap(), vec![1, 1]);
        assert_eq!(pseudo_visibility(&Tensor::full(&[3, 3], 1.0), &h, 1.0).unwrap(), vec![0, 0]);
        assert!(pseudo_visibility(&Tensor::zeros(&[2, 3]), &h, 0.5).is_err());
    }

    #[test]
    fn right_half_mask_on_centred_gaussian() {
        let h = gaussian_heatmap([2.0, 2.0], 1.0, 5, 5).unwrap();
        let mut m = Tensor::zeros(&[5, 5]);
        for v in 0..5 {
            for u in 2..5 {
                m.data_mut()[v * 5 + u] = 1.0;
            }
        }
        // Cell-by-cell oracle.
        let mut num = 0.0;
        let mut den = 0.0;
        for v in 0..5 {
            for u in 0..5 {
                let g = (-(((u as f64 - 2.0).powi(2) + (v as f64 - 2.0).powi(2)) / 2.0)).exp();
                den += g;
                if u >= 2 {
                    num += g;
                }
            }
        }
        let want = u8::from(num / den < 0.5);
        let got = pseudo_visibility(&m, &h.reshape(&[1, 5, 5]).unwrap(), 0.5).unwrap();
        assert_eq!(got, vec![want]);
        // The centre column carries mass, so more than half is covered.
        assert_eq!(want, 0);
    }

    #[test]
    fn masked_view_examples() {
        let crop = Tensor::from_vec(&[3, 4, 4], (0..48).map(|i| i as f64 / 48.0).collect()).unwrap();
        let empty = MaskSpec::from_shapes(&[], Fill::Solid([0.3; 3]), 4, 4, 2, 0.5).unwrap();
        assert_eq!(masked_view(&crop, &empty).unwrap(), crop);
        let full = MaskSpec::from_shapes(&[full_rect(4, 4)], Fill::Solid([0.1, 0.2, 0.3]), 4, 4, 2, 0.5).unwrap();
        let out = masked_view(&crop, &full).unwrap();
        for k in 0..3 {
            assert!(out.data()[k * 16..(k + 1) * 16].iter().all(|&v| v == [0.1, 0.2, 0.3][k]));
        }
        let spec = sample_mask(3, 4, 4, 2, &MaskParams::default()).unwrap();
        let once = masked_view(&crop, &spec).unwrap();
        assert_eq!(masked_view(&once, &spec).unwrap(), once);
    }

    proptest! {
        #[test]
        fn growing_mask_never_restores_visibility(
            seed in 0u64..1000,
            extra in proptest::collection::vec(0usize..36, 1..10),
            delta in 0.05f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Tensor::from_vec(&[4, 6, 6], (0..144).map(|_| rng.gen::<f64>().powi(3)).collect()).unwrap();
            let mut m = Tensor::from_vec(&[6, 6], (0..36).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect()).unwrap();
            let before = pseudo_visibility(&m, &h, delta).unwrap();
            for i in extra {
                m.data_mut()[i] = 1.0;
            }
            let after = pseudo_visibility(&m, &h, delta).unwrap();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(a <= b);
            }
        }
    }
}
