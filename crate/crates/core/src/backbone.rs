//! Stem, stacked hourglass stages, heatmap heads and the auxiliary point and
//! edge heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ParamStore, Residual, RELU_GAIN};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stacks: usize,
    pub channels: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Crop pixels per heatmap cell; a power of two.
    pub stride: usize,
    /// Residual blocks in the stem.
    pub res_blocks: usize,
    /// Resolutions visited by each hourglass (2 = one pooling level).
    pub scales: usize,
    pub use_point_map: bool,
    pub use_edge_map: bool,
    /// Append normalized (x, y) coordinate channels to the input crop.
    pub coord_channels: bool,
    /// Initial bias of the point and edge heads. Their targets are near
    /// zero almost everywhere; starting at sigmoid(0) = 0.5 drives the first
    /// updates deep into saturation over the face region, where the maps
    /// then stay flat.
    pub aux_bias_init: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            channels: 32,
            crop_h: 64,
            crop_w: 64,
            stride: 4,
            res_blocks: 1,
            scales: 2,
            use_point_map: true,
            use_edge_map: true,
            coord_channels: false,
            aux_bias_init: -2.5,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn map_size(&self) -> (usize, usize) {
        (self.crop_h / self.stride, self.crop_w / self.stride)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stacks == 0 {
            out.push("backbone.stacks must be >= 1".to_string());
        }
        if self.channels < 8 {
            out.push("backbone.channels must be >= 8".to_string());
        }
        if self.stride == 0 || !self.stride.is_power_of_two() {
            out.push("backbone.stride must be a power of two".to_string());
        } else if self.crop_h % self.stride != 0 || self.crop_w % self.stride != 0 {
            out.push("backbone crop size must be divisible by stride".to_string());
        }
        if !self.aux_bias_init.is_finite() {
            out.push("backbone.aux_bias_init must be finite".to_string());
        }
        if self.scales < 2 {
            out.push("backbone.scales must be >= 2".to_string());
        } else if self.stride.is_power_of_two() && self.stride > 0 {
            let f = 1 << (self.scales - 1);
            let (h, w) = (self.crop_h / self.stride, self.crop_w / self.stride);
            if h % f != 0 || w % f != 0 || h < f || w < f {
                out.push(format!(
                    "heatmap size {h}x{w} not divisible by 2^(scales-1) = {f}"
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Hourglass {
    Level {
        up: Residual,
        down: Residual,
        inner: Box<Hourglass>,
        post: Residual,
    },
    Bottom(Residual),
}

impl Hourglass {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, levels: usize) -> Self {
        if levels == 0 {
            return Hourglass::Bottom(Residual::new(store, rng, &format!("{name}.bottom"), c));
        }
        Hourglass::Level {
            up: Residual::new(store, rng, &format!("{name}.up"), c),
            down: Residual::new(store, rng, &format!("{name}.down"), c),
            inner: Box::new(Hourglass::new(store, rng, &format!("{name}.inner"), c, levels - 1)),
            post: Residual::new(store, rng, &format!("{name}.post"), c),
        }
    }

    fn apply(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        match self {
            Hourglass::Bottom(r) => r.apply(store, g, x),
            Hourglass::Level {
                up,
                down,
                inner,
                post,
            } => {
                let skip = up.apply(store, g, x);
                let low = g.avg_pool2(x);
                let low = down.apply(store, g, low);
                let low = inner.apply(store, g, low);
                let low = post.apply(store, g, low);
                let low = g.upsample2(low);
                // Both branches carry an identity path; averaging keeps the
                // activation scale flat across levels and stages.
                let sum = g.add(skip, low);
                g.scale(sum, 0.5)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    hourglass: Hourglass,
    proj_res: Residual,
    proj_conv: Conv,
    head: Conv,
}

/// Parameter layout of the localization network. Parameters live in a
/// [`ParamStore`] owned by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub num_points: usize,
    pub num_edges: usize,
    stem: Vec<Conv>,
    stem_res: Vec<Residual>,
    stages: Vec<Stage>,
    point_head: Option<Conv>,
    edge_head: Option<Conv>,
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub stage_heatmaps: Vec<Var>,
    pub features: Var,
    pub point_pred: Option<Var>,
    pub edge_pred: Option<Var>,
}

/// Forward results as plain tensors, batched `[N, ·, h', w']`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub stage_heatmaps: Vec<Tensor>,
    pub features: Tensor,
    pub point_pred: Option<Tensor>,
    pub edge_pred: Option<Tensor>,
}

impl BackboneOutput {
    pub fn from_vars(g: &Graph, v: &BackboneVars) -> Self {
        Self {
            stage_heatmaps: v.stage_heatmaps.iter().map(|&h| g.value(h).clone()).collect(),
            features: g.value(v.features).clone(),
            point_pred: v.point_pred.map(|p| g.value(p).clone()),
            edge_pred: v.edge_pred.map(|e| g.value(e).clone()),
        }
    }
}

/// `[n, 2, h, w]` planes holding pixel-centre x and y scaled to [-1, 1].
fn coordinate_planes(n: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, 2, h, w]);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let (plane, cell) = ((i / (h * w)) % 2, i % (h * w));
        *v = if plane == 0 {
            (2 * (cell % w) + 1) as f64 / w as f64 - 1.0
        } else {
            (2 * (cell / w) + 1) as f64 / h as f64 - 1.0
        };
    }
    t
}

impl Backbone {
    /// Registers all backbone parameters in `store`, initialized from
    /// `config.seed`.
    pub fn build(
        config: &BackboneConfig,
        num_points: usize,
        num_edges: usize,
        store: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let downs = config.stride.trailing_zeros() as usize;
        let mut stem = Vec::new();
        for i in 0..downs.max(1) {
            let cin = match (i, config.coord_channels) {
                (0, false) => 3,
                (0, true) => 5,
                _ => c,
            };
            let stride = if downs == 0 { 1 } else { 2 };
            stem.push(Conv::new(store, &mut rng, &format!("backbone.stem.{i}"), cin, c, 3, stride, RELU_GAIN));
        }
        let stem_res = (0..config.res_blocks)
            .map(|i| Residual::new(store, &mut rng, &format!("backbone.stem_res.{i}"), c))
            .collect();
        let stages = (0..config.stacks)
            .map(|k| {
                let name = format!("backbone.stage.{k}");
                Stage {
                    hourglass: Hourglass::new(store, &mut rng, &format!("{name}.hg"), c, config.scales - 1),
                    proj_res: Residual::new(store, &mut rng, &format!("{name}.proj_res"), c),
                    proj_conv: Conv::new(store, &mut rng, &format!("{name}.proj"), c, c, 1, 1, 1.0),
                    head: Conv::new(store, &mut rng, &format!("{name}.heatmap"), c, num_points, 1, 1, 1.0),
                }
            })
            .collect();
        let point_head = config
            .use_point_map
            .then(|| Conv::new(store, &mut rng, "backbone.point_head", c, num_points, 1, 1, 1.0));
        let edge_head = config
            .use_edge_map
            .then(|| Conv::new(store, &mut rng, "backbone.edge_head", c, num_edges, 1, 1, 1.0));
        for h in point_head.iter().chain(edge_head.iter()) {
            store.get_mut(h.b).data_mut().fill(config.aux_bias_init);
        }
        Ok(Self {
            config: config.clone(),
            num_points,
            num_edges,
            stem,
            stem_res,
            stages,
            point_head,
            edge_head,
        })
    }

    /// Forward over a batch `x: [N, 3, h, w]`.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<BackboneVars> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.crop_h || s[3] != self.config.crop_w {
            return Err(Error::Shape(format!(
                "crop batch {:?} does not match [N, 3, {}, {}]",
                s, self.config.crop_h, self.config.crop_w
            )));
        }
        let mut f = x;
        if self.config.coord_channels {
            let coords = g.input(coordinate_planes(s[0], s[2], s[3]));
            f = g.concat(&[x, coords]);
        }
        for conv in &self.stem {
            f = conv.apply(store, g, f);
            f = g.relu(f);
        }
        for r in &self.stem_res {
            f = r.apply(store, g, f);
        }
        let mut stage_heatmaps = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let h = st.hourglass.apply(store, g, f);
            let h = st.proj_res.apply(store, g, h);
            let h = st.proj_conv.apply(store, g, h);
            f = h;
            stage_heatmaps.push(st.head.apply(store, g, f));
        }
        let point_pred = self.point_head.map(|h| {
            let z = h.apply(store, g, f);
            g.sigmoid(z)
        });
        let edge_pred = self.edge_head.map(|h| {
            let z = h.apply(store, g, f);
            g.sigmoid(z)
        });
        Ok(BackboneVars {
            stage_heatmaps,
            features: f,
            point_pred,
            edge_pred,
        })
    }

    /// Convenience forward on plain tensors.
    pub fn run(&self, store: &ParamStore, crops: &Tensor) -> Result<BackboneOutput> {
        let mut g = Graph::new();
        let x = g.input(crops.clone());
        let v = self.forward(store, &mut g, x)?;
        Ok(BackboneOutput::from_vars(&g, &v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(stacks: usize, c: usize, size: usize) -> BackboneConfig {
        BackboneConfig {
            stacks,
            channels: c,
            crop_h: size,
            crop_w: size,
            stride: 4,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn output_shapes() {
        let mut store = ParamStore::new();
        let bb = Backbone::build(&cfg(2, 32, 64), 100, 16, &mut store).unwrap();
        let out = bb.run(&store, &Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(out.stage_heatmaps.len(), 2);
        for h in &out.stage_heatmaps {
            assert_eq!(h.shape(), &[1, 100, 16, 16]);
        }
        assert_eq!(out.features.shape(), &[1, 32, 16, 16]);
        assert_eq!(out.point_pred.unwrap().shape(), &[1, 100, 16, 16]);
        assert_eq!(out.edge_pred.unwrap().shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn zero_stacks_rejected() {
        let mut store = ParamStore::new();
        assert!(Backbone::build(&cfg(0, 32, 64), 100, 16, &mut store).is_err());
        let bad = BackboneConfig {
            crop_h: 62,
            ..cfg(1, 8, 64)
        };
        assert!(Backbone::build(&bad, 100, 16, &mut store).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        Backbone::build(&cfg(1, 8, 16), 100, 16, &mut a).unwrap();
        Backbone::build(&cfg(1, 8, 16), 100, 16, &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        Backbone::build(&BackboneConfig { seed: 1, ..cfg(1, 8, 16) }, 100, 16, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_crop_reads_head_bias() {
        // Backbone biases start at zero, so a zero crop stays zero through
        // every ReLU/conv and the sigmoid heads read sigmoid(bias).
        let mut store = ParamStore::new();
        let bb = Backbone::build(&cfg(2, 8, 32), 100, 16, &mut store).unwrap();
        let out = bb.run(&store, &Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        let e = (-2.5f64).exp();
        let expect = e / (1.0 + e);
        assert!(out.point_pred.as_ref().unwrap().data().iter().all(|&v| v == expect));
        assert!(out.edge_pred.as_ref().unwrap().data().iter().all(|&v| v == expect));
        assert!(out.stage_heatmaps.iter().all(|h| h.all_finite()));
        let again = bb.run(&store, &Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(out, again);
        let c = BackboneConfig { aux_bias_init: 0.0, ..cfg(2, 8, 32) };
        let mut store = ParamStore::new();
        let bb = Backbone::build(&c, 100, 16, &mut store).unwrap();
        let zero_bias = bb.run(&store, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(zero_bias.point_pred.unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_crops_identical_outputs() {
        let mut store = ParamStore::new();
        let bb = Backbone::build(&cfg(1, 8, 16), 100, 16, &mut store).unwrap();
        let one: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let two = [one.clone(), one].concat();
        let out = bb.run(&store, &Tensor::from_vec(&[2, 3, 16, 16], two).unwrap()).unwrap();
        let h = &out.stage_heatmaps[0];
        assert_eq!(h.slab(0), h.slab(1));
        let e = out.edge_pred.unwrap();
        assert_eq!(e.slab(0), e.slab(1));
    }

    #[test]
    fn parameter_count_is_pinned() {
        let mut store = ParamStore::new();
        Backbone::build(&cfg(2, 32, 64), 100, 16, &mut store).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let res = 2 * conv(32, 32, 3);
        let stem = conv(3, 32, 3) + conv(32, 32, 3) + res;
        let stage = 4 * res + res + conv(32, 32, 1) + conv(32, 100, 1);
        let heads = conv(32, 100, 1) + conv(32, 16, 1);
        assert_eq!(store.count(), stem + 2 * stage + heads);
    }

    #[test]
    fn auxiliary_heads_are_optional() {
        let mut store = ParamStore::new();
        let c = BackboneConfig {
            use_point_map: false,
            use_edge_map: false,
            ..cfg(1, 8, 16)
        };
        let bb = Backbone::build(&c, 100, 16, &mut store).unwrap();
        let out = bb.run(&store, &Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(out.point_pred.is_none() && out.edge_pred.is_none());
    }
}
