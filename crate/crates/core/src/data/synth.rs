//! Procedural face scenes with exact landmark and visibility ground truth.
//!
//! A 100-point template lives on (or just outside) an ellipsoid head proxy.
//! The head is rotated by yaw/pitch and perspective-projected. A landmark is
//! self-occluded when the segment from the camera to it enters the ellipsoid
//! first, externally occluded when its projection falls inside a pasted
//! occluder, and visible otherwise (out-of-frame points are invisible too).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, BBox, Image};
use crate::error::{Error, Result};
use crate::layout::NUM_POINTS;

/// Semi-axes `(x, y, z)` of the head ellipsoid in template units.
pub const HEAD_RADII: [f64; 3] = [1.0, 1.3, 1.0];
const CAMERA_DISTANCE: f64 = 6.0;
const SURFACE_LIFT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Human,
    MammalEared,
    Robot,
}

impl Style {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "human" => Ok(Style::Human),
            "mammal-eared" | "mammal" => Ok(Style::MammalEared),
            "robot" => Ok(Style::Robot),
            other => Err(Error::invalid("style", format!("unknown style tag '{other}'"))),
        }
    }

    pub fn domain_tag(self) -> &'static str {
        match self {
            Style::Human => "synthetic-human",
            Style::MammalEared => "synthetic-mammal",
            Style::Robot => "synthetic-robot",
        }
    }
}

/// Scene distribution. Ranges are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub image_size: usize,
    pub yaw_deg: [f64; 2],
    pub pitch_deg: [f64; 2],
    /// Style tags to draw from uniformly: "human", "mammal-eared", "robot".
    pub styles: Vec<String>,
    pub occluder_count: [usize; 2],
    /// Occluder area as a fraction of the face box area.
    pub occluder_area: [f64; 2],
    /// "solid", "noise", "gradient" or "mixed".
    pub background: String,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: 128,
            yaw_deg: [-70.0, 70.0],
            pitch_deg: [-20.0, 20.0],
            styles: vec!["human".into(), "mammal-eared".into(), "robot".into()],
            occluder_count: [0, 3],
            occluder_area: [0.02, 0.25],
            background: "mixed".into(),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<Vec<Style>> {
        if self.image_size < 16 {
            return Err(Error::invalid("scene.image_size", "must be >= 16"));
        }
        if self.styles.is_empty() {
            return Err(Error::invalid("scene.styles", "at least one style is required"));
        }
        for (name, r) in [("scene.yaw_deg", self.yaw_deg), ("scene.pitch_deg", self.pitch_deg)] {
            if !(r[0] <= r[1]) || r[0] < -90.0 || r[1] > 90.0 {
                return Err(Error::invalid(name, format!("bad range {r:?}")));
            }
        }
        if self.occluder_count[0] > self.occluder_count[1] {
            return Err(Error::invalid("scene.occluder_count", "min > max"));
        }
        let a = self.occluder_area;
        if !(0.0 <= a[0] && a[0] <= a[1] && a[1] <= 1.0) {
            return Err(Error::invalid("scene.occluder_area", format!("bad range {a:?}")));
        }
        if !matches!(self.background.as_str(), "solid" | "noise" | "gradient" | "mixed") {
            return Err(Error::invalid(
                "scene.background",
                format!("unknown background mode '{}'", self.background),
            ));
        }
        self.styles.iter().map(|s| Style::parse(s)).collect()
    }
}

fn lift_to_surface(x: f64, y: f64, bump: f64) -> [f64; 3] {
    let [a, b, c] = HEAD_RADII;
    let z = c * (1.0 - (x / a).powi(2) - (y / b).powi(2)).max(0.0).sqrt();
    let n = [x / (a * a), y / (b * b), z / (c * c)];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let lift = SURFACE_LIFT + bump;
    [x + lift * n[0] / len, y + lift * n[1] / len, z + lift * n[2] / len]
}

/// The 100 template points in head coordinates (x right in the image, y up,
/// z towards the camera at zero pose).
pub fn template_points(style: Style) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(NUM_POINTS);
    let mut face = |x: f64, y: f64, bump: f64| pts.push(lift_to_surface(x, y, bump));
    // jaw 0..=16
    for i in 0..17 {
        let t = i as f64 / 16.0;
        let ang = std::f64::consts::PI * t;
        face(-0.82 * ang.cos(), 0.15 - 1.05 * ang.sin(), 0.0);
    }
    // brows 17..=26
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = if side < 0.0 { -0.62 + 0.5 * t } else { 0.12 + 0.5 * t };
            face(x, 0.42 + 0.08 * (std::f64::consts::PI * t).sin(), 0.01);
        }
    }
    // nose bridge 27..=30
    for i in 0..4 {
        face(0.0, 0.25 - 0.12 * i as f64, 0.06 + 0.06 * i as f64);
    }
    // nose base 31..=35
    for (x, y, bump) in [
        (-0.18, -0.22, 0.08),
        (-0.09, -0.25, 0.12),
        (0.0, -0.27, 0.15),
        (0.09, -0.25, 0.12),
        (0.18, -0.22, 0.08),
    ] {
        face(x, y, bump);
    }
    // eyes 36..=47
    let right_eye = [
        (-0.52, 0.22),
        (-0.41, 0.27),
        (-0.30, 0.27),
        (-0.20, 0.22),
        (-0.30, 0.17),
        (-0.41, 0.17),
    ];
    for (x, y) in right_eye {
        face(x, y, 0.0);
    }
    let left_eye = [
        (0.20, 0.22),
        (0.30, 0.27),
        (0.41, 0.27),
        (0.52, 0.22),
        (0.41, 0.17),
        (0.30, 0.17),
    ];
    for (x, y) in left_eye {
        face(x, y, 0.0);
    }
    // outer lip 48..=59
    for (x, y) in [
        (-0.32, -0.55),
        (-0.20, -0.48),
        (-0.08, -0.45),
        (0.0, -0.47),
        (0.08, -0.45),
        (0.20, -0.48),
        (0.32, -0.55),
        (0.20, -0.64),
        (0.08, -0.68),
        (0.0, -0.69),
        (-0.08, -0.68),
        (-0.20, -0.64),
    ] {
        face(x, y, 0.03);
    }
    // inner lip 60..=67
    for (x, y) in [
        (-0.26, -0.55),
        (-0.10, -0.52),
        (0.0, -0.53),
        (0.10, -0.52),
        (0.26, -0.55),
        (0.10, -0.58),
        (0.0, -0.59),
        (-0.10, -0.58),
    ] {
        face(x, y, 0.025);
    }
    // pupils 68, 69
    face(-0.36, 0.22, 0.005);
    face(0.36, 0.22, 0.005);
    // iris rings 70..=77
    for cx in [-0.36, 0.36] {
        for k in 0..4 {
            let ang = std::f64::consts::FRAC_PI_2 * k as f64 + std::f64::consts::FRAC_PI_2;
            face(cx + 0.045 * ang.cos(), 0.22 + 0.045 * ang.sin(), 0.005);
        }
    }
    // inner mouth ring 78..=85
    for k in 0..8 {
        let ang = std::f64::consts::TAU * k as f64 / 8.0;
        face(0.16 * ang.cos(), -0.555 + 0.028 * ang.sin(), 0.02);
    }
    // ears 86..=99
    for side in [-1.0, 1.0] {
        for k in 0..7 {
            pts.push(ear_point(style, side, k));
        }
    }
    debug_assert_eq!(pts.len(), NUM_POINTS);
    pts
}

fn ear_point(style: Style, side: f64, k: usize) -> [f64; 3] {
    let [a, b, c] = HEAD_RADII;
    match style {
        Style::MammalEared => {
            let outline = [
                (0.28, 1.28),
                (0.38, 1.52),
                (0.48, 1.76),
                (0.58, 1.98),
                (0.70, 1.65),
                (0.80, 1.30),
                (0.88, 1.00),
            ];
            let (x, y) = outline[k];
            [side * x, y, -0.05]
        }
        Style::Human | Style::Robot => {
            let phi = (-100.0 + 200.0 * k as f64 / 6.0).to_radians();
            let y = 0.12 + 0.28 * phi.sin();
            let z = -0.12 - 0.16 * phi.cos();
            let surface_x = a * (1.0 - (y / b).powi(2) - (z / c).powi(2)).max(0.0).sqrt();
            [side * (surface_x + 0.12 + 0.06 * phi.cos()), y, z]
        }
    }
}

/// Rotation head → world: pitch about x applied after yaw about y.
fn rotation(yaw_deg: f64, pitch_deg: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rx[i][k] * ry[k][j]).sum();
        }
    }
    r
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Smallest `t ∈ (0, 1)` at which `origin + t·(target − origin)` enters the
/// head ellipsoid, or `None`. `origin` must lie outside the ellipsoid.
fn first_entry(origin: [f64; 3], target: [f64; 3]) -> Option<f64> {
    let d = [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]];
    let (mut qa, mut qb, mut qc) = (0.0, 0.0, -1.0);
    for i in 0..3 {
        let r2 = HEAD_RADII[i] * HEAD_RADII[i];
        qa += d[i] * d[i] / r2;
        qb += 2.0 * origin[i] * d[i] / r2;
        qc += origin[i] * origin[i] / r2;
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 || qa == 0.0 {
        return None;
    }
    let t = (-qb - disc.sqrt()) / (2.0 * qa);
    (t > 0.0).then_some(t)
}

/// Whether the segment from `camera` to `point` (head coordinates) passes
/// through the head ellipsoid before reaching the point.
pub fn ray_hits_ellipsoid_before(camera: [f64; 3], point: [f64; 3]) -> bool {
    matches!(first_entry(camera, point), Some(t) if t < 1.0 - 1e-9)
}

/// Camera intrinsics and pose of one scene.
#[derive(Clone, Copy, Debug)]
struct Camera {
    rot: [[f64; 3]; 3],
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    fn position_in_head(&self) -> [f64; 3] {
        mat_t_vec(&self.rot, [0.0, 0.0, CAMERA_DISTANCE])
    }

    fn project(&self, p_head: [f64; 3]) -> ([f64; 2], f64) {
        let w = mat_vec(&self.rot, p_head);
        let depth = CAMERA_DISTANCE - w[2];
        (
            [self.cx + self.focal * w[0] / depth, self.cy - self.focal * w[1] / depth],
            depth,
        )
    }

    fn ray_dir_in_head(&self, u: f64, v: f64) -> [f64; 3] {
        mat_t_vec(&self.rot, [(u - self.cx) / self.focal, -(v - self.cy) / self.focal, -1.0])
    }
}

/// Projects the template at a pose with a fixed camera (focal 1.5×size,
/// centred); returns 2-D points and self-occlusion flags.
pub fn project_template(
    style: Style,
    yaw_deg: f64,
    pitch_deg: f64,
    image_size: usize,
) -> (Vec<[f64; 2]>, Vec<bool>) {
    let cam = Camera {
        rot: rotation(yaw_deg, pitch_deg),
        focal: 1.5 * image_size as f64,
        cx: image_size as f64 / 2.0,
        cy: image_size as f64 / 2.0,
    };
    let eye = cam.position_in_head();
    template_points(style)
        .into_iter()
        .map(|p| (cam.project(p).0, ray_hits_ellipsoid_before(eye, p)))
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OccluderShape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub shape: OccluderShape,
    pub center: [f64; 2],
    /// Half extents `(rx, ry)`.
    pub half_size: [f64; 2],
    pub color: [f64; 3],
    /// Per-pixel noise amplitude; 0 gives a solid fill.
    pub noise: f64,
    pub noise_seed: u64,
}

impl Occluder {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = (p[0] - self.center[0]) / self.half_size[0];
        let dy = (p[1] - self.center[1]) / self.half_size[1];
        match self.shape {
            OccluderShape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            OccluderShape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// A rendered face before external occluders are pasted.
#[derive(Clone, Debug)]
pub struct FaceRender {
    pub image: Image,
    pub points: Vec<[f64; 2]>,
    pub self_occluded: Vec<bool>,
    pub bbox: BBox,
    pub style: Style,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub sample: AnnotatedSample,
    pub occluders: Vec<Occluder>,
    pub self_occluded: Vec<bool>,
    pub externally_occluded: Vec<bool>,
    pub style: Style,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-pixel noise in `[-1, 1]`.
pub(crate) fn hash_noise(seed: u64, i: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(i));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn rand_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    crate::targets::point_segment_distance(p, a, b)
}

struct Palette {
    skin: [f64; 3],
    ear: [f64; 3],
    line: [f64; 3],
    lip: [f64; 3],
    iris: [f64; 3],
    texture: f64,
}

fn palette(style: Style, rng: &mut ChaCha8Rng) -> Palette {
    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], a: f64| {
        c.map(|v| (v + rng.gen_range(-a..=a)).clamp(0.0, 1.0))
    };
    match style {
        Style::Human => {
            let tone: f64 = rng.gen_range(0.35..0.95);
            let skin = [tone, tone * 0.78, tone * 0.62];
            Palette {
                skin,
                ear: skin.map(|v| v * 0.85),
                line: jitter(rng, [0.18, 0.1, 0.06], 0.06),
                lip: jitter(rng, [0.7, 0.25, 0.25], 0.1),
                iris: jitter(rng, [0.25, 0.35, 0.45], 0.2),
                texture: 0.03,
            }
        }
        Style::MammalEared => {
            let fur = jitter(rng, [0.75, 0.5, 0.25], 0.2);
            Palette {
                skin: fur,
                ear: fur.map(|v| v * 0.7),
                line: jitter(rng, [0.08, 0.06, 0.05], 0.04),
                lip: jitter(rng, [0.45, 0.2, 0.2], 0.1),
                iris: jitter(rng, [0.6, 0.55, 0.1], 0.15),
                texture: 0.12,
            }
        }
        Style::Robot => {
            let metal = rng.gen_range(0.45..0.8);
            Palette {
                skin: [metal, metal, metal * 1.05],
                ear: [metal * 0.6, metal * 0.6, metal * 0.7],
                line: jitter(rng, [0.1, 0.8, 0.9], 0.1),
                lip: jitter(rng, [0.2, 0.6, 0.8], 0.1),
                iris: jitter(rng, [0.9, 0.3, 0.1], 0.1),
                texture: 0.02,
            }
        }
    }
}

fn render_background(img: &mut Image, mode: &str, rng: &mut ChaCha8Rng) {
    let mode = if mode == "mixed" {
        ["solid", "noise", "gradient"][rng.gen_range(0..3)]
    } else {
        mode
    };
    let base = rand_color(rng);
    let other = rand_color(rng);
    let seed: u64 = rng.gen();
    let (h, w) = (img.height, img.width);
    for r in 0..h {
        for c in 0..w {
            let px = match mode {
                "solid" => base,
                "noise" => {
                    let n = hash_noise(seed, (r * w + c) as u64);
                    base.map(|v| (v + 0.25 * n).clamp(0.0, 1.0))
                }
                _ => {
                    let t = (r + c) as f64 / (h + w) as f64;
                    [0, 1, 2].map(|k| base[k] * (1.0 - t) + other[k] * t)
                }
            };
            img.set(r, c, px);
        }
    }
}

/// Renders the face (background, head, ears, facial strokes) for one seed.
pub fn render_face(seed: u64, scene: &SceneParams) -> Result<FaceRender> {
    let styles = scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = styles[rng.gen_range(0..styles.len())];
    let yaw = rng.gen_range(scene.yaw_deg[0]..=scene.yaw_deg[1]);
    let pitch = rng.gen_range(scene.pitch_deg[0]..=scene.pitch_deg[1]);
    let size = scene.image_size as f64;
    let focal = size * rng.gen_range(1.35..1.6);
    let lift = if style == Style::MammalEared { 0.1 * size } else { 0.0 };
    let cam = Camera {
        rot: rotation(yaw, pitch),
        focal,
        cx: size / 2.0 + rng.gen_range(-0.05..0.05) * size,
        cy: size / 2.0 + rng.gen_range(-0.05..0.05) * size + lift,
    };
    let pal = palette(style, &mut rng);
    let mut image = Image::new(scene.image_size, scene.image_size);
    render_background(&mut image, &scene.background, &mut rng);
    let tex_seed: u64 = rng.gen();

    let template = template_points(style);
    let eye = cam.position_in_head();
    let projected: Vec<([f64; 2], f64)> = template.iter().map(|&p| cam.project(p)).collect();
    let points: Vec<[f64; 2]> = projected.iter().map(|p| p.0).collect();
    let self_occluded: Vec<bool> = template
        .iter()
        .map(|&p| ray_hits_ellipsoid_before(eye, p))
        .collect();

    // Per-pixel head depth from the ray cast.
    let (h, w) = (image.height, image.width);
    let light = {
        let l = mat_t_vec(&cam.rot, [0.3, 0.5, 1.0]);
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / n)
    };
    let mut head_depth = vec![f64::INFINITY; h * w];
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (c as f64 + 0.5, r as f64 + 0.5);
            let dir = cam.ray_dir_in_head(u, v);
            let far = [eye[0] + dir[0] * 20.0, eye[1] + dir[1] * 20.0, eye[2] + dir[2] * 20.0];
            let Some(t) = first_entry(eye, far) else { continue };
            let hit = [0, 1, 2].map(|k| eye[k] + t * (far[k] - eye[k]));
            head_depth[r * w + c] = t * 20.0;
            let n = [0, 1, 2].map(|k| hit[k] / (HEAD_RADII[k] * HEAD_RADII[k]));
            let nl = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nl;
            let shade = 0.35 + 0.65 * lambert.max(0.0);
            let noise = pal.texture * hash_noise(tex_seed, (r * w + c) as u64);
            let mut px = pal.skin.map(|s| s * shade + noise);
            if style == Style::Robot && (hit[1] * 6.0).rem_euclid(1.0) < 0.06 {
                px = px.map(|v| v * 0.6);
            }
            image.set(r, c, px.map(|v| v.clamp(0.0, 1.0)));
        }
    }

    // Ears: filled contour polygons, depth-tested against the head.
    for side in 0..2 {
        let idx: Vec<usize> = (86 + 7 * side..93 + 7 * side).collect();
        let mut poly: Vec<[f64; 2]> = idx.iter().map(|&i| points[i]).collect();
        if style != Style::MammalEared {
            // close the C-shape against the head side
            poly.push(points[idx[0]]);
        }
        let depth = idx.iter().map(|&i| projected[i].1).sum::<f64>() / idx.len() as f64;
        let (x0, x1) = poly.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p[0]), a.1.max(p[0])));
        let (y0, y1) = poly.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p[1]), a.1.max(p[1])));
        let rows = (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize);
        for r in rows {
            for c in (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize) {
                let p = [c as f64 + 0.5, r as f64 + 0.5];
                if depth < head_depth[r * w + c] && point_in_polygon(p, &poly) {
                    let n = pal.texture * hash_noise(tex_seed ^ 0xE4, (r * w + c) as u64);
                    image.set(r, c, pal.ear.map(|v| (v + n).clamp(0.0, 1.0)));
                }
            }
        }
    }

    // Facial strokes between self-visible consecutive landmarks.
    let thick = 0.0075 * focal;
    let strokes: Vec<(Vec<usize>, [f64; 3], f64)> = {
        let r = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
        let ring = |a: usize, b: usize| {
            let mut v = r(a, b);
            v.push(a);
            v
        };
        let dim = pal.skin.map(|v| v * 0.6);
        vec![
            (r(0, 16), dim, thick * 0.8),
            (r(17, 21), pal.line, thick * 1.4),
            (r(22, 26), pal.line, thick * 1.4),
            (ring(36, 41), pal.line, thick),
            (ring(42, 47), pal.line, thick),
            (r(27, 30), dim, thick),
            (r(31, 35), pal.line, thick),
            (ring(48, 59), pal.lip, thick * 1.6),
            (ring(60, 67), pal.line, thick),
            (ring(70, 73), pal.iris, thick * 1.2),
            (ring(74, 77), pal.iris, thick * 1.2),
            (ring(78, 85), pal.line, thick * 0.8),
            (r(86, 92), pal.line, thick),
            (r(93, 99), pal.line, thick),
        ]
    };
    for (chain, color, radius) in &strokes {
        for seg in chain.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if self_occluded[a] || self_occluded[b] {
                continue;
            }
            draw_segment(&mut image, points[a], points[b], *radius, *color);
        }
    }
    for pupil in [68usize, 69] {
        if !self_occluded[pupil] {
            draw_segment(&mut image, points[pupil], points[pupil], thick * 1.6, [0.02, 0.02, 0.02]);
        }
    }

    let bbox = points_box(&points, 1.25);
    image.quantize();
    Ok(FaceRender {
        image,
        points: points.iter().map(|p| p.map(round6)).collect(),
        self_occluded,
        bbox,
        style,
        yaw_deg: yaw,
        pitch_deg: pitch,
    })
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Square box around all points, side `scale × max extent`.
fn points_box(points: &[[f64; 2]], scale: f64) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let side = round6((x1 - x0).max(y1 - y0) * scale);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    BBox {
        x: round6(cx - side / 2.0),
        y: round6(cy - side / 2.0),
        width: side,
        height: side,
    }
}

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], radius: f64, color: [f64; 3]) {
    let (h, w) = (img.height as isize, img.width as isize);
    let r0 = (a[1].min(b[1]) - radius - 1.0).floor().max(0.0) as isize;
    let r1 = (a[1].max(b[1]) + radius + 1.0).ceil().min(h as f64) as isize;
    let c0 = (a[0].min(b[0]) - radius - 1.0).floor().max(0.0) as isize;
    let c1 = (a[0].max(b[0]) + radius + 1.0).ceil().min(w as f64) as isize;
    for r in r0..r1 {
        for c in c0..c1 {
            let d = dist_to_segment([c as f64 + 0.5, r as f64 + 0.5], a, b);
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                let old = img.get(r as usize, c as usize);
                img.set(
                    r as usize,
                    c as usize,
                    [0, 1, 2].map(|k| old[k] * (1.0 - cover) + color[k] * cover),
                );
            }
        }
    }
}

/// Draws occluder shapes for a face box.
pub fn sample_occluders(rng: &mut ChaCha8Rng, scene: &SceneParams, bbox: &BBox) -> Vec<Occluder> {
    let n = rng.gen_range(scene.occluder_count[0]..=scene.occluder_count[1]);
    (0..n)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                OccluderShape::Rect
            } else {
                OccluderShape::Ellipse
            };
            let frac = rng.gen_range(scene.occluder_area[0]..=scene.occluder_area[1]);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let mut area = frac * bbox.width * bbox.height;
            if shape == OccluderShape::Ellipse {
                area /= std::f64::consts::PI;
            } else {
                area /= 4.0;
            }
            let half_size = [(area * aspect).sqrt(), (area / aspect).sqrt()];
            let center = [
                bbox.x + rng.gen::<f64>() * bbox.width,
                bbox.y + rng.gen::<f64>() * bbox.height,
            ];
            let noise = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.1..0.4) };
            Occluder {
                shape,
                center,
                half_size,
                color: rand_color(rng),
                noise,
                noise_seed: rng.gen(),
            }
        })
        .collect()
}

/// Pastes occluders and assembles the final annotated scene.
pub fn apply_occluders(face: FaceRender, occluders: Vec<Occluder>) -> SynthScene {
    let mut image = face.image;
    let (h, w) = (image.height, image.width);
    for occ in &occluders {
        for r in 0..h {
            for c in 0..w {
                if occ.contains([c as f64 + 0.5, r as f64 + 0.5]) {
                    let n = occ.noise * hash_noise(occ.noise_seed, (r * w + c) as u64);
                    image.set(r, c, occ.color.map(|v| (v + n).clamp(0.0, 1.0)));
                }
            }
        }
    }
    image.quantize();
    let externally_occluded: Vec<bool> = face
        .points
        .iter()
        .map(|&p| occluders.iter().any(|o| o.contains(p)))
        .collect();
    let visibility = face
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let in_frame = p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64;
            u8::from(in_frame && !face.self_occluded[i] && !externally_occluded[i])
        })
        .collect();
    SynthScene {
        sample: AnnotatedSample {
            image,
            bbox: face.bbox,
            points: face.points,
            visibility,
            domain_tag: face.style.domain_tag().to_string(),
        },
        occluders,
        self_occluded: face.self_occluded,
        externally_occluded,
        style: face.style,
        yaw_deg: face.yaw_deg,
        pitch_deg: face.pitch_deg,
    }
}

/// Full scene for one seed: face, occluders and ground truth.
pub fn synthesize_scene(seed: u64, scene: &SceneParams) -> Result<SynthScene> {
    let face = render_face(seed, scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x0CC1_D3E5));
    let occluders = sample_occluders(&mut rng, scene, &face.bbox);
    Ok(apply_occluders(face, occluders))
}

pub fn synthesize_sample(seed: u64, scene: &SceneParams) -> Result<AnnotatedSample> {
    synthesize_scene(seed, scene).map(|s| s.sample)
}
