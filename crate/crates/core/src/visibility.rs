//! Visibility head: landmark-aligned features, local and context branches,
//! gated fusion and sigmoid activation.
//!
//! Both branches pool `G` by a spatial sum rather than a mean. `G` carries
//! the attention's unit mass, so the sum is the attention-weighted average
//! of the projected cues; a mean would shrink it by `h'·w'`. The two differ
//! by a constant factor absorbed into the following linear map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming, ParamStore, RELU_GAIN};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `z = z_loc + α ⊙ z_ctx` with learned α.
    Gated,
    /// α fixed to 1 and not trained.
    FixedSum,
    LocalOnly,
    ContextOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityHeadConfig {
    /// Width C_ψ of the projected cues.
    pub proj_channels: usize,
    /// Depth-wise 3×3 layers in the local branch.
    pub local_depth: usize,
    /// Landmark-mixing layers in the context branch.
    pub context_depth: usize,
    pub alpha_init: f64,
    pub mode: FusionMode,
    pub seed: u64,
}

impl Default for VisibilityHeadConfig {
    fn default() -> Self {
        Self {
            proj_channels: 16,
            local_depth: 2,
            context_depth: 1,
            alpha_init: 0.01,
            mode: FusionMode::Gated,
            seed: 1,
        }
    }
}

impl VisibilityHeadConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.proj_channels < 4 {
            out.push("visibility.proj_channels must be >= 4".to_string());
        }
        if !self.alpha_init.is_finite() {
            out.push("visibility.alpha_init must be finite".to_string());
        }
        if self.context_depth == 0 {
            out.push("visibility.context_depth must be >= 1".to_string());
        }
        out
    }
}

/// Parameter slots of the head. Every mode registers the same parameters so
/// checkpoints are interchangeable across ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityHead {
    pub config: VisibilityHeadConfig,
    pub num_points: usize,
    pub in_channels: usize,
    pub psi_w: usize,
    pub psi_b: usize,
    pub local_dw: Vec<(usize, usize)>,
    pub local_out: (usize, usize),
    pub mix: Vec<(usize, usize)>,
    pub context_out: (usize, usize),
    pub alpha: usize,
}

/// Graph handles of a head pass.
#[derive(Clone, Copy, Debug)]
pub struct VisibilityVars {
    pub aligned: Var,
    pub local: Option<Var>,
    pub context: Option<Var>,
    pub fused: Var,
    pub probs: Var,
}

/// Per-sample head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityOutput {
    /// `[P·C_ψ, h', w']`
    pub aligned_features: Tensor,
    pub local_logits: Option<Vec<f64>>,
    pub context_logits: Option<Vec<f64>>,
    pub gate: Vec<f64>,
    pub fused_logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl VisibilityHead {
    /// `in_channels` is the width of the concatenated cue map `[F, P̂, Ê]`.
    pub fn build(
        config: &VisibilityHeadConfig,
        num_points: usize,
        in_channels: usize,
        store: &mut ParamStore,
    ) -> Result<Self> {
        let p = config.problems();
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cp = config.proj_channels;
        let groups = num_points * cp;
        let psi_w = store.add(
            "vis.psi.w",
            kaiming(&mut rng, &[cp, in_channels, 1, 1], in_channels, 1.0),
        );
        let psi_b = store.add("vis.psi.b", Tensor::zeros(&[cp]));
        let local_dw = (0..config.local_depth)
            .map(|i| {
                (
                    store.add(format!("vis.local.{i}.w"), kaiming(&mut rng, &[groups, 3, 3], 9, RELU_GAIN)),
                    store.add(format!("vis.local.{i}.b"), Tensor::zeros(&[groups])),
                )
            })
            .collect();
        let local_out = (
            store.add("vis.local.out.w", kaiming(&mut rng, &[num_points, cp], cp, 1.0)),
            store.add("vis.local.out.b", Tensor::zeros(&[num_points])),
        );
        let mix = (0..config.context_depth)
            .map(|i| {
                (
                    store.add(
                        format!("vis.context.{i}.mix"),
                        kaiming(&mut rng, &[num_points, num_points], num_points, RELU_GAIN),
                    ),
                    store.add(format!("vis.context.{i}.b"), Tensor::zeros(&[num_points])),
                )
            })
            .collect();
        let context_out = (
            store.add("vis.context.out.w", kaiming(&mut rng, &[num_points, cp], cp, 1.0)),
            store.add("vis.context.out.b", Tensor::zeros(&[num_points])),
        );
        let alpha = store.add("vis.alpha", Tensor::full(&[num_points], config.alpha_init));
        Ok(Self {
            config: config.clone(),
            num_points,
            in_channels,
            psi_w,
            psi_b,
            local_dw,
            local_out,
            mix,
            context_out,
            alpha,
        })
    }

    /// Parameters updated by training in the configured mode.
    pub fn trainable(&self) -> Vec<usize> {
        let mut ids = vec![self.psi_w, self.psi_b];
        let uses_local = self.config.mode != FusionMode::ContextOnly;
        let uses_ctx = self.config.mode != FusionMode::LocalOnly;
        if uses_local {
            for &(w, b) in &self.local_dw {
                ids.extend([w, b]);
            }
            ids.extend([self.local_out.0, self.local_out.1]);
        }
        if uses_ctx {
            for &(w, b) in &self.mix {
                ids.extend([w, b]);
            }
            ids.extend([self.context_out.0, self.context_out.1]);
        }
        if self.config.mode == FusionMode::Gated {
            ids.push(self.alpha);
        }
        ids
    }

    /// G = H̃ ⊗ ψ([F, P̂, Ê]) as `[N, P·C_ψ, h', w']`.
    pub fn aligned_features(&self, store: &ParamStore, g: &mut Graph, cues: Var, attention: Var) -> Var {
        let w = store.bind(g, self.psi_w);
        let b = store.bind(g, self.psi_b);
        let psi = g.conv2d(cues, w, Some(b), 1, 0);
        g.outer_mul(attention, psi)
    }

    fn spatial_sum(g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x);
        let hw = (s[2] * s[3]) as f64;
        let m = g.global_avg_pool(x);
        g.scale(m, hw)
    }

    /// Depth-wise layers within each landmark group, pooled, then one logit
    /// per landmark from its own group only.
    pub fn local_logits(&self, store: &ParamStore, g: &mut Graph, aligned: Var) -> Var {
        let mut h = aligned;
        for &(w, b) in &self.local_dw {
            let wv = store.bind(g, w);
            let bv = store.bind(g, b);
            h = g.depthwise(h, wv, Some(bv));
            h = g.relu(h);
        }
        let pooled = Self::spatial_sum(g, h);
        let w = store.bind(g, self.local_out.0);
        let b = store.bind(g, self.local_out.1);
        g.group_linear(pooled, w, b)
    }

    /// Mixes landmark groups with a P×P 1×1 convolution before pooling.
    pub fn context_logits(&self, store: &ParamStore, g: &mut Graph, aligned: Var) -> Var {
        let mut h = aligned;
        for &(w, b) in &self.mix {
            let wv = store.bind(g, w);
            let bv = store.bind(g, b);
            h = g.landmark_mix(h, wv, bv);
            h = g.relu(h);
        }
        let pooled = Self::spatial_sum(g, h);
        let w = store.bind(g, self.context_out.0);
        let b = store.bind(g, self.context_out.1);
        g.group_linear(pooled, w, b)
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, cues: Var, attention: Var) -> Result<VisibilityVars> {
        let cs = g.shape(cues);
        let a = g.shape(attention);
        if cs.len() != 4 || cs[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "visibility cues {cs:?}, expected {} channels",
                self.in_channels
            )));
        }
        if a.len() != 4 || a[1] != self.num_points || a[2] != cs[2] || a[3] != cs[3] || a[0] != cs[0] {
            return Err(Error::Shape(format!("attention {a:?} vs cues {cs:?}")));
        }
        let hw = a[2] * a[3];
        if let Some(s) = g
            .value(attention)
            .data()
            .chunks(hw)
            .map(|m| m.iter().sum::<f64>())
            .find(|s| (s - 1.0).abs() > 1e-4)
        {
            return Err(Error::invalid("attention", format!("channel sums to {s}, not 1")));
        }
        let aligned = self.aligned_features(store, g, cues, attention);
        let (local, context, fused) = match self.config.mode {
            FusionMode::LocalOnly => {
                let l = self.local_logits(store, g, aligned);
                (Some(l), None, l)
            }
            FusionMode::ContextOnly => {
                let c = self.context_logits(store, g, aligned);
                (None, Some(c), c)
            }
            FusionMode::Gated | FusionMode::FixedSum => {
                let l = self.local_logits(store, g, aligned);
                let c = self.context_logits(store, g, aligned);
                let alpha = if self.config.mode == FusionMode::Gated {
                    store.bind(g, self.alpha)
                } else {
                    g.input(Tensor::full(&[self.num_points], 1.0))
                };
                (Some(l), Some(c), g.gate(l, c, alpha))
            }
        };
        let probs = g.sigmoid(fused);
        Ok(VisibilityVars {
            aligned,
            local,
            context,
            fused,
            probs,
        })
    }

    pub fn gate_values(&self, store: &ParamStore) -> Vec<f64> {
        match self.config.mode {
            FusionMode::Gated => store.get(self.alpha).data().to_vec(),
            FusionMode::FixedSum => vec![1.0; self.num_points],
            FusionMode::LocalOnly => vec![0.0; self.num_points],
            FusionMode::ContextOnly => vec![f64::NAN; self.num_points],
        }
    }

    pub fn output(&self, store: &ParamStore, g: &Graph, v: &VisibilityVars, i: usize) -> VisibilityOutput {
        VisibilityOutput {
            aligned_features: {
                let t = g.value(v.aligned);
                Tensor::from_vec(&t.shape()[1..], t.slab(i).to_vec()).unwrap()
            },
            local_logits: v.local.map(|l| g.value(l).slab(i).to_vec()),
            context_logits: v.context.map(|c| g.value(c).slab(i).to_vec()),
            gate: self.gate_values(store),
            fused_logits: g.value(v.fused).slab(i).to_vec(),
            probabilities: g.value(v.probs).slab(i).to_vec(),
        }
    }
}

/// z = z_loc + α ⊙ z_ctx and v̂ = sigmoid(z) on plain vectors.
pub fn fuse_and_activate(z_loc: &[f64], z_ctx: &[f64], alpha: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if z_loc.len() != z_ctx.len() || z_loc.len() != alpha.len() {
        return Err(Error::Shape(format!(
            "fusion lengths {} / {} / {}",
            z_loc.len(),
            z_ctx.len(),
            alpha.len()
        )));
    }
    let p = z_loc.len();
    let mut g = Graph::new();
    let l = g.input(Tensor::from_vec(&[1, p], z_loc.to_vec())?);
    let c = g.input(Tensor::from_vec(&[1, p], z_ctx.to_vec())?);
    let a = g.input(Tensor::from_vec(&[p], alpha.to_vec())?);
    let z = g.gate(l, c, a);
    let v = g.sigmoid(z);
    Ok((g.value(z).data().to_vec(), g.value(v).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: usize = 5;
    const CIN: usize = 6;

    fn head(mode: FusionMode) -> (VisibilityHead, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = VisibilityHeadConfig {
            proj_channels: 4,
            mode,
            ..VisibilityHeadConfig::default()
        };
        let h = VisibilityHead::build(&cfg, P, CIN, &mut store).unwrap();
        (h, store)
    }

    fn wavy(shape: &[usize], f: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 0.5) * f).sin()).collect()).unwrap()
    }

    fn uniform_attention(n: usize, h: usize, w: usize) -> Tensor {
        Tensor::full(&[n, P, h, w], 1.0 / (h * w) as f64)
    }

    #[test]
    fn one_hot_attention_isolates_cell() {
        let (hd, store) = head(FusionMode::Gated);
        let cues = wavy(&[1, CIN, 3, 3], 0.9);
        let mut att = Tensor::zeros(&[1, P, 3, 3]);
        for p in 0..P {
            att.data_mut()[p * 9 + 4] = 1.0;
        }
        let mut g = Graph::new();
        let c = g.input(cues.clone());
        let a = g.input(att);
        let gv = hd.aligned_features(&store, &mut g, c, a);
        let w = store.get(hd.psi_w).data();
        let gt = g.value(gv);
        for p in 0..P {
            for k in 0..4 {
                let map = &gt.data()[(p * 4 + k) * 9..(p * 4 + k + 1) * 9];
                let psi: f64 = (0..CIN).map(|ci| w[k * CIN + ci] * cues.data()[ci * 9 + 4]).sum();
                for (cell, &v) in map.iter().enumerate() {
                    if cell == 4 {
                        assert!((v - psi).abs() < 1e-12);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_cues_zero_features() {
        let (hd, store) = head(FusionMode::Gated);
        let mut g = Graph::new();
        let c = g.input(Tensor::zeros(&[1, CIN, 2, 2]));
        let a = g.input(uniform_attention(1, 2, 2));
        let gv = hd.aligned_features(&store, &mut g, c, a);
        assert!(g.value(gv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_attention_sums_to_mean_projection() {
        let (hd, store) = head(FusionMode::Gated);
        let cues = wavy(&[1, CIN, 2, 2], 0.4);
        let mut g = Graph::new();
        let c = g.input(cues.clone());
        let a = g.input(uniform_attention(1, 2, 2));
        let gv = hd.aligned_features(&store, &mut g, c, a);
        let w = store.get(hd.psi_w).data();
        for k in 0..4 {
            let mean: f64 = (0..4)
                .map(|cell| (0..CIN).map(|ci| w[k * CIN + ci] * cues.data()[ci * 4 + cell]).sum::<f64>())
                .sum::<f64>()
                / 4.0;
            for p in 0..P {
                let s: f64 = g.value(gv).data()[(p * 4 + k) * 4..(p * 4 + k + 1) * 4].iter().sum();
                assert!((s - mean).abs() < 1e-12);
            }
        }
    }

    fn logits(hd: &VisibilityHead, store: &ParamStore, gt: &Tensor, local: bool) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(gt.clone());
        let z = if local {
            hd.local_logits(store, &mut g, x)
        } else {
            hd.context_logits(store, &mut g, x)
        };
        g.value(z).data().to_vec()
    }

    #[test]
    fn local_branch_isolates_groups() {
        let (hd, store) = head(FusionMode::Gated);
        let gt = wavy(&[1, P * 4, 3, 3], 0.21);
        let base = logits(&hd, &store, &gt, true);
        let mut pert = gt.clone();
        for v in &mut pert.data_mut()[2 * 4 * 9..3 * 4 * 9] {
            *v += 0.37;
        }
        let after = logits(&hd, &store, &pert, true);
        for p in 0..P {
            if p != 2 {
                assert_eq!(base[p], after[p], "landmark {p}");
            }
        }
        assert_ne!(base[2], after[2]);
        let zero = logits(&hd, &store, &Tensor::zeros(&[1, P * 4, 3, 3]), true);
        assert_eq!(zero, store.get(hd.local_out.1).data());
    }

    #[test]
    fn tied_local_weights_commute_with_permutation() {
        let (hd, mut store) = head(FusionMode::Gated);
        // Tie every group's depth-wise and output weights to group 0.
        for &(w, _) in &hd.local_dw {
            let t = store.get_mut(w);
            let first: Vec<f64> = t.data()[..4 * 9].to_vec();
            for p in 1..P {
                t.data_mut()[p * 36..(p + 1) * 36].copy_from_slice(&first);
            }
        }
        let t = store.get_mut(hd.local_out.0);
        let first: Vec<f64> = t.data()[..4].to_vec();
        for p in 1..P {
            t.data_mut()[p * 4..(p + 1) * 4].copy_from_slice(&first);
        }
        let gt = wavy(&[1, P * 4, 3, 3], 0.33);
        let perm = [3, 0, 4, 1, 2];
        let mut permuted = gt.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * 36..(dst + 1) * 36].copy_from_slice(&gt.data()[src * 36..(src + 1) * 36]);
        }
        let a = logits(&hd, &store, &gt, true);
        let b = logits(&hd, &store, &permuted, true);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b[dst], a[src]);
        }
    }

    #[test]
    fn identity_mixing_is_local() {
        let (hd, mut store) = head(FusionMode::Gated);
        let (w, _) = hd.mix[0];
        let t = store.get_mut(w);
        t.data_mut().fill(0.0);
        for p in 0..P {
            t.data_mut()[p * P + p] = 1.0;
        }
        let gt = wavy(&[1, P * 4, 3, 3], 0.5);
        let base = logits(&hd, &store, &gt, false);
        let mut pert = gt.clone();
        for v in &mut pert.data_mut()[4 * 36..5 * 36] {
            *v -= 0.8;
        }
        let after = logits(&hd, &store, &pert, false);
        assert_eq!(base[..4], after[..4]);
    }

    #[test]
    fn uniform_mixing_of_identical_groups_gives_equal_logits() {
        let (hd, mut store) = head(FusionMode::Gated);
        store.get_mut(hd.mix[0].0).data_mut().fill(1.0 / P as f64);
        let t = store.get_mut(hd.context_out.0);
        let first: Vec<f64> = t.data()[..4].to_vec();
        for p in 1..P {
            t.data_mut()[p * 4..(p + 1) * 4].copy_from_slice(&first);
        }
        let one = wavy(&[1, 4, 3, 3], 0.7);
        let gt = Tensor::from_vec(&[1, P * 4, 3, 3], one.data().repeat(P)).unwrap();
        let z = logits(&hd, &store, &gt, false);
        assert!(z.iter().all(|&v| v == z[0]));
    }

    #[test]
    fn context_branch_crosses_landmarks() {
        let (hd, store) = head(FusionMode::Gated);
        let gt = wavy(&[1, P * 4, 3, 3], 0.13);
        let base = logits(&hd, &store, &gt, false);
        let mut pert = gt.clone();
        for v in &mut pert.data_mut()[36..72] {
            *v += 1.5;
        }
        let after = logits(&hd, &store, &pert, false);
        let w = store.get(hd.mix[0].0).data();
        for p in 0..P {
            if p != 1 && w[p * P + 1] != 0.0 {
                assert_ne!(base[p], after[p], "landmark {p}");
            }
        }
    }

    #[test]
    fn fusion_arithmetic() {
        let (z, v) = fuse_and_activate(&[1.0, -1.0], &[2.0, 2.0], &[0.5, 0.5]).unwrap();
        assert_eq!(z, vec![2.0, 0.0]);
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((v[0] - sigmoid(2.0)).abs() < 1e-15 && (v[0] - 0.8808).abs() < 1e-4);
        assert_eq!(v[1], 0.5);
        let (z, _) = fuse_and_activate(&[0.3, -0.7], &[5.0, 9.0], &[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.3, -0.7]);
        assert!(fuse_and_activate(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    fn run_head(hd: &VisibilityHead, store: &ParamStore, cues: &Tensor, att: &Tensor) -> VisibilityOutput {
        let mut g = Graph::new();
        let c = g.input(cues.clone());
        let a = g.input(att.clone());
        let v = hd.forward(store, &mut g, c, a).unwrap();
        hd.output(store, &g, &v, 0)
    }

    #[test]
    fn closed_gate_equals_local_only_bitwise() {
        let (gated, mut store) = head(FusionMode::Gated);
        store.get_mut(gated.alpha).data_mut().fill(0.0);
        let local = VisibilityHead {
            config: VisibilityHeadConfig {
                mode: FusionMode::LocalOnly,
                ..gated.config.clone()
            },
            ..gated.clone()
        };
        let cues = wavy(&[1, CIN, 4, 4], 0.61);
        let att = uniform_attention(1, 4, 4);
        let a = run_head(&gated, &store, &cues, &att);
        let b = run_head(&local, &store, &cues, &att);
        assert_eq!(a.fused_logits, b.fused_logits);
        assert_eq!(a.probabilities, b.probabilities);
    }

    #[test]
    fn output_invariants() {
        let (hd, store) = head(FusionMode::Gated);
        let out = run_head(&hd, &store, &wavy(&[1, CIN, 4, 4], 0.3), &uniform_attention(1, 4, 4));
        let (l, c) = (out.local_logits.unwrap(), out.context_logits.unwrap());
        for p in 0..P {
            assert_eq!(out.fused_logits[p], l[p] + out.gate[p] * c[p]);
            assert!(out.probabilities[p] > 0.0 && out.probabilities[p] < 1.0);
        }
        assert!(out.gate.iter().all(|&a| a == 0.01));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (hd, store) = head(FusionMode::Gated);
        let mut g = Graph::new();
        let c = g.input(Tensor::zeros(&[1, CIN + 1, 2, 2]));
        let a = g.input(uniform_attention(1, 2, 2));
        assert!(hd.forward(&store, &mut g, c, a).is_err());
        let mut g = Graph::new();
        let c = g.input(Tensor::zeros(&[1, CIN, 2, 2]));
        let a = g.input(Tensor::full(&[1, P, 2, 2], 0.3));
        assert!(hd.forward(&store, &mut g, c, a).is_err());
    }
}
