//! Samples, crop normalization, annotation I/O and the synthetic scene
//! generator.

mod annotation;
mod synth;

pub use annotation::{
    generate_dataset, load_split, read_annotation, write_annotation, AnnotationFile, Manifest,
    ManifestEntry, Split, write_atomic,
};
pub use synth::{
    apply_occluders, project_template, ray_hits_ellipsoid_before, render_face, sample_occluders,
    synthesize_sample, synthesize_scene, template_points, FaceRender, Occluder, OccluderShape,
    SceneParams, Style, SynthScene, HEAD_RADII,
};
pub(crate) use synth::hash_noise;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::NUM_POINTS;
use crate::tensor::Tensor;

/// `H×W×3` image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every value to the nearest 8-bit level so PNG storage is exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image {
                path: path.into(),
                message: "buffer size mismatch".into(),
            })?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.into(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.into(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }

    /// Bilinear sample at continuous pixel coordinates (pixel `i` spans
    /// `[i, i+1)`); samples outside the image read as zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let mut out = [0.0; 3];
        for (dy, wy) in [(0isize, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0isize, 1.0 - tx), (1, tx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (r, c) = (y0 as isize + dy, x0 as isize + dx);
                if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
                    continue;
                }
                let px = self.get(r as usize, c as usize);
                for k in 0..3 {
                    out[k] += w * px[k];
                }
            }
        }
        out
    }
}

/// Face box `(x, y, width, height)` in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x && p[0] <= self.x + self.width && p[1] >= self.y && p[1] <= self.y + self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub image: Image,
    pub bbox: BBox,
    pub points: Vec<[f64; 2]>,
    /// 1 = visible, 0 = occluded.
    pub visibility: Vec<u8>,
    pub domain_tag: String,
}

impl AnnotatedSample {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != NUM_POINTS {
            return Err(Error::schema(
                "points",
                format!("expected {NUM_POINTS} points, found {}", self.points.len()),
            ));
        }
        if self.visibility.len() != NUM_POINTS {
            return Err(Error::schema(
                "visibility",
                format!("expected {NUM_POINTS} flags, found {}", self.visibility.len()),
            ));
        }
        if let Some(v) = self.visibility.iter().find(|&&v| v > 1) {
            return Err(Error::schema("visibility", format!("value {v} is not 0 or 1")));
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::schema("points", "non-finite coordinate"));
        }
        if !(self.bbox.width > 0.0 && self.bbox.height > 0.0) {
            return Err(Error::schema("box", "width and height must be positive"));
        }
        Ok(())
    }
}

/// 2×3 affine map `[a b c; d e f]` taking `(x, y)` to
/// `(a·x + b·y + c, d·x + e·y + f)`.
pub type Affine = [[f64; 3]; 2];

pub fn apply_affine(t: &Affine, p: [f64; 2]) -> [f64; 2] {
    [
        t[0][0] * p[0] + t[0][1] * p[1] + t[0][2],
        t[1][0] * p[0] + t[1][1] * p[1] + t[1][2],
    ]
}

pub fn invert_affine(t: &Affine) -> Affine {
    let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
    let (a, b, d, e) = (t[1][1] / det, -t[0][1] / det, -t[1][0] / det, t[0][0] / det);
    [
        [a, b, -(a * t[0][2] + b * t[1][2])],
        [d, e, -(d * t[0][2] + e * t[1][2])],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCrop {
    /// `[3, h, w]`
    pub crop: Tensor,
    /// Source → crop.
    pub transform: Affine,
    pub points_crop: Vec<[f64; 2]>,
}

/// Affine crop-and-resize of the face box to `h×w` with bilinear resampling.
pub fn normalize_crop(sample: &AnnotatedSample, h: usize, w: usize) -> Result<NormalizedCrop> {
    let b = sample.bbox;
    if !(b.width > 0.0 && b.height > 0.0) {
        return Err(Error::invalid("box", "width and height must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("crop size", "h and w must be positive"));
    }
    let (sx, sy) = (w as f64 / b.width, h as f64 / b.height);
    let transform: Affine = [[sx, 0.0, -b.x * sx], [0.0, sy, -b.y * sy]];
    let inv = invert_affine(&transform);
    let mut crop = Tensor::zeros(&[3, h, w]);
    for r in 0..h {
        for c in 0..w {
            let src = apply_affine(&inv, [c as f64 + 0.5, r as f64 + 0.5]);
            let px = sample.image.sample_bilinear(src[0], src[1]);
            for k in 0..3 {
                crop.data_mut()[(k * h + r) * w + c] = px[k];
            }
        }
    }
    let points_crop = sample
        .points
        .iter()
        .map(|&p| apply_affine(&transform, p))
        .collect();
    Ok(NormalizedCrop {
        crop,
        transform,
        points_crop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with(image: Image, bbox: BBox) -> AnnotatedSample {
        AnnotatedSample {
            image,
            bbox,
            points: vec![[bbox.x + bbox.width / 2.0, bbox.y + bbox.height / 2.0]; NUM_POINTS],
            visibility: vec![1; NUM_POINTS],
            domain_tag: "test".into(),
        }
    }

    fn ramp(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for r in 0..h {
            for c in 0..w {
                img.set(r, c, [r as f64 / h as f64, c as f64 / w as f64, 0.5]);
            }
        }
        img
    }

    #[test]
    fn identity_crop() {
        let img = ramp(8, 8);
        let s = sample_with(
            img.clone(),
            BBox {
                x: 0.0,
                y: 0.0,
                width: 8.0,
                height: 8.0,
            },
        );
        let nc = normalize_crop(&s, 8, 8).unwrap();
        assert_eq!(nc.transform, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        for r in 0..8 {
            for c in 0..8 {
                let px = img.get(r, c);
                for k in 0..3 {
                    assert_eq!(nc.crop.data()[(k * 8 + r) * 8 + c], px[k]);
                }
            }
        }
    }

    #[test]
    fn box_centre_maps_to_crop_centre() {
        let s = sample_with(
            ramp(20, 20),
            BBox {
                x: 3.0,
                y: 5.0,
                width: 10.0,
                height: 12.0,
            },
        );
        let nc = normalize_crop(&s, 16, 32).unwrap();
        let p = nc.points_crop[0];
        assert!((p[0] - 16.0).abs() < 1e-12 && (p[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn double_width_box_halves_x_scale() {
        let bbox = BBox {
            x: 4.0,
            y: 2.0,
            width: 32.0,
            height: 16.0,
        };
        let mut s = sample_with(ramp(40, 40), bbox);
        s.points[0] = [bbox.x + bbox.width, bbox.y + bbox.height];
        let nc = normalize_crop(&s, 16, 16).unwrap();
        assert_eq!(nc.transform[0][0], 0.5);
        // Hand-composed: x_c = (36 - 4)·0.5 = 16, y_c = (18 - 2)·1 = 16.
        assert!((nc.points_crop[0][0] - 16.0).abs() < 1e-12);
        assert!((nc.points_crop[0][1] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_frame_pixels_are_zero_and_bad_box_rejected() {
        let s = sample_with(
            ramp(8, 8),
            BBox {
                x: -8.0,
                y: 0.0,
                width: 8.0,
                height: 8.0,
            },
        );
        let nc = normalize_crop(&s, 8, 8).unwrap();
        assert_eq!(nc.crop.data()[0], 0.0);
        let mut bad = s.clone();
        bad.bbox.width = 0.0;
        assert!(normalize_crop(&bad, 8, 8).is_err());
    }

    #[test]
    fn transform_reproduces_points_crop() {
        let s = sample_with(
            ramp(30, 30),
            BBox {
                x: 2.5,
                y: 1.25,
                width: 21.0,
                height: 17.0,
            },
        );
        let nc = normalize_crop(&s, 64, 64).unwrap();
        for (p, q) in s.points.iter().zip(&nc.points_crop) {
            let r = apply_affine(&nc.transform, *p);
            assert!((r[0] - q[0]).abs() < 1e-6 && (r[1] - q[1]).abs() < 1e-6);
        }
        let back = apply_affine(&invert_affine(&nc.transform), nc.points_crop[0]);
        assert!((back[0] - s.points[0][0]).abs() < 1e-9);
    }
}
