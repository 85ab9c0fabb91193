//! Optimization loop: warm start, occlusion masking with pseudo labels,
//! per-epoch JSON logging and resumable checkpoints.

pub mod gradcheck;
mod losses;
mod masking;
mod optim;

pub use losses::{
    aux_map_losses, heatmap_loss, heatmap_loss_var, map_loss_var, total_loss, visibility_loss,
    visibility_loss_var, LossComponents, LossWeights,
};
pub use masking::{masked_view, pseudo_visibility, sample_mask, Fill, MaskParams, MaskSpec};
pub use optim::{cosine_lr, Adam};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{normalize_crop, AnnotatedSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::targets::{build_targets, TargetConfig, TargetMaps};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Localization-only epochs; `None` means a quarter of `epochs`.
    pub warm_start_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Probability that a sample is replaced by a masked view.
    pub mask_prob: f64,
    pub masking: MaskParams,
    /// Whether masked views also contribute to L_hm, L_pt and L_edge.
    pub masked_in_localization: bool,
    /// Heatmap-loss weight of landmarks labeled occluded.
    pub occluded_hm_weight: f64,
    pub targets: TargetConfig,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Decode temperatures tried on the validation split after training;
    /// the best replaces the model's temperature. Empty keeps it.
    pub temperature_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warm_start_epochs: None,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            mask_prob: 0.5,
            masking: MaskParams::default(),
            masked_in_localization: true,
            occluded_hm_weight: 1.0,
            targets: TargetConfig::default(),
            checkpoint_every: 0,
            temperature_grid: vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn warm_start(&self) -> usize {
        self.warm_start_epochs.unwrap_or(self.epochs / 4)
    }

    pub fn problems(&self, stacks: usize) -> Vec<String> {
        let mut out = self.weights.problems(stacks);
        out.extend(self.masking.problems());
        if self.epochs == 0 {
            out.push("train.epochs must be >= 1".to_string());
        }
        if self.warm_start() > self.epochs {
            out.push("train.warm_start_epochs exceeds train.epochs".to_string());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be >= 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push("train.lr must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            out.push("train.mask_prob must lie in [0, 1]".to_string());
        }
        if !(self.occluded_hm_weight >= 0.0 && self.occluded_hm_weight.is_finite()) {
            out.push("train.occluded_hm_weight must be >= 0".to_string());
        }
        if self.temperature_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            out.push("train.temperature_grid values must be positive".to_string());
        }
        out
    }
}

/// A training sample in crop space with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// `[3, h, w]`
    pub crop: Tensor,
    pub targets: TargetMaps,
    pub visibility: Vec<u8>,
}

/// Crops every sample and renders its targets.
pub fn prepare(samples: &[AnnotatedSample], model: &Model, targets: &TargetConfig) -> Result<Vec<PreparedSample>> {
    let (h, w) = model.crop_size();
    let stride = model.stride();
    par::map_slice(samples, |s| {
        s.validate()?;
        let nc = normalize_crop(s, h, w)?;
        let t = build_targets(&model.layout, &nc.points_crop, stride, h / stride, w / stride, targets)?;
        Ok(PreparedSample {
            crop: nc.crop,
            targets: t,
            visibility: s.visibility.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_hm")]
    pub l_hm: f64,
    #[serde(rename = "L_pt")]
    pub l_pt: f64,
    #[serde(rename = "L_edge")]
    pub l_edge: f64,
    #[serde(rename = "L_vis")]
    pub l_vis: f64,
    #[serde(rename = "L_syn")]
    pub l_syn: f64,
    pub total: f64,
    pub lr: f64,
}

/// A batch after masking, ready for the graph.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub crops: Tensor,
    pub heatmaps: Arc<Tensor>,
    pub point_map: Arc<Tensor>,
    pub edge_map: Arc<Tensor>,
    /// Labels for L_vis: `v`, or `min(v, ṽ)` on masked samples.
    pub vis_labels: Arc<Tensor>,
    /// Pseudo labels ṽ (zeros on unmasked samples, which carry weight 0).
    pub pseudo_labels: Arc<Tensor>,
    pub masked: Vec<bool>,
    /// Per-landmark `[N, P, 1, 1]`-style weights flattened to `[N, P]`.
    pub hm_point_weights: Option<Vec<f64>>,
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub hm: Var,
    pub pt: Option<Var>,
    pub edge: Option<Var>,
    pub vis: Option<Var>,
    pub syn: Option<Var>,
    pub total: Var,
}

/// Assembles a batch, replacing samples by masked views where
/// `mask_seeds[i]` is set.
pub fn assemble_batch(
    data: &[PreparedSample],
    indices: &[usize],
    mask_seeds: &[Option<u64>],
    model: &Model,
    cfg: &TrainConfig,
) -> Result<BatchInputs> {
    let (h, w) = model.crop_size();
    let stride = model.stride();
    let p = model.layout.num_points();
    let items: Vec<Result<(Tensor, Vec<f64>, Vec<f64>)>> = par::map_range(indices.len(), |k| {
        let s = &data[indices[k]];
        let v: Vec<f64> = s.visibility.iter().map(|&x| x as f64).collect();
        match mask_seeds[k] {
            None => Ok((s.crop.clone(), v, vec![0.0; p])),
            Some(seed) => {
                let spec = sample_mask(seed, h, w, stride, &cfg.masking)?;
                let crop = masked_view(&s.crop, &spec)?;
                let pseudo = pseudo_visibility(&spec.map_mask, &s.targets.heatmaps, spec.delta)?;
                let pseudo: Vec<f64> = pseudo.iter().map(|&x| x as f64).collect();
                let merged = v.iter().zip(&pseudo).map(|(a, b)| a.min(*b)).collect();
                Ok((crop, merged, pseudo))
            }
        }
    });
    let mut crops = Vec::with_capacity(indices.len());
    let mut vis = Vec::with_capacity(indices.len() * p);
    let mut pseudo = Vec::with_capacity(indices.len() * p);
    for it in items {
        let (c, v, ps) = it?;
        crops.push(c);
        vis.extend(v);
        pseudo.extend(ps);
    }
    let stack = |f: &dyn Fn(&PreparedSample) -> &Tensor| -> Result<Tensor> {
        Tensor::stack(&indices.iter().map(|&i| f(&data[i]).clone()).collect::<Vec<_>>())
    };
    let n = indices.len();
    let hm_point_weights = (cfg.occluded_hm_weight != 1.0).then(|| {
        indices
            .iter()
            .flat_map(|&i| {
                data[i]
                    .visibility
                    .iter()
                    .map(|&v| if v == 1 { 1.0 } else { cfg.occluded_hm_weight })
            })
            .collect()
    });
    Ok(BatchInputs {
        crops: Tensor::stack(&crops)?,
        heatmaps: Arc::new(stack(&|s| &s.targets.heatmaps)?),
        point_map: Arc::new(stack(&|s| &s.targets.point_map)?),
        edge_map: Arc::new(stack(&|s| &s.targets.edge_map)?),
        vis_labels: Arc::new(Tensor::from_vec(&[n, p], vis)?),
        pseudo_labels: Arc::new(Tensor::from_vec(&[n, p], pseudo)?),
        masked: mask_seeds.iter().map(Option::is_some).collect(),
        hm_point_weights,
    })
}

/// Records the forward pass and every loss term for one batch.
pub fn batch_losses(
    g: &mut Graph,
    model: &Model,
    batch: &BatchInputs,
    cfg: &TrainConfig,
    warm: bool,
) -> Result<LossVars> {
    let n = batch.masked.len();
    let x = g.input(batch.crops.clone());
    let mv = model.forward(g, x, !warm)?;
    let inv_n = 1.0 / n as f64;
    let loc_w: Vec<f64> = batch
        .masked
        .iter()
        .map(|&m| if m && !cfg.masked_in_localization { 0.0 } else { inv_n })
        .collect();
    let loc_w = Arc::new(loc_w);
    let stages = cfg.weights.stage_weights(model.config.backbone.stacks);
    let (stage_vars, hm_target) = match &batch.hm_point_weights {
        None => (mv.backbone.stage_heatmaps.clone(), batch.heatmaps.clone()),
        Some(pw) => {
            // Σ_p w_p‖Ĥ_p − H_p‖² = ‖√w ⊙ Ĥ − √w ⊙ H‖².
            let shape = batch.heatmaps.shape().to_vec();
            let hw = shape[2] * shape[3];
            let scale: Vec<f64> = pw.iter().flat_map(|w| std::iter::repeat(w.sqrt()).take(hw)).collect();
            let scale = Tensor::from_vec(&shape, scale)?;
            let target: Vec<f64> = batch.heatmaps.data().iter().zip(scale.data()).map(|(a, b)| a * b).collect();
            let sv = g.input(scale);
            let vars = mv.backbone.stage_heatmaps.iter().map(|&h| g.mul(h, sv)).collect();
            (vars, Arc::new(Tensor::from_vec(&shape, target)?))
        }
    };
    let hm = heatmap_loss_var(g, &stage_vars, hm_target, &stages, loc_w.clone());
    let pt = mv
        .backbone
        .point_pred
        .map(|p| map_loss_var(g, p, batch.point_map.clone(), loc_w.clone()));
    let edge = mv
        .backbone
        .edge_pred
        .map(|e| map_loss_var(g, e, batch.edge_map.clone(), loc_w.clone()));
    let (vis, syn) = match mv.visibility {
        Some(v) => {
            let all = Arc::new(vec![inv_n; n]);
            let masked_w = Arc::new(batch.masked.iter().map(|&m| if m { inv_n } else { 0.0 }).collect());
            (
                Some(visibility_loss_var(g, v.probs, batch.vis_labels.clone(), all)),
                Some(visibility_loss_var(g, v.probs, batch.pseudo_labels.clone(), masked_w)),
            )
        }
        None => (None, None),
    };
    let w = &cfg.weights;
    let mut terms = vec![(hm, 1.0)];
    terms.extend(pt.map(|v| (v, w.point)));
    terms.extend(edge.map(|v| (v, w.edge)));
    terms.extend(vis.map(|v| (v, w.vis)));
    terms.extend(syn.map(|v| (v, w.syn)));
    let total = g.weighted_sum(&terms);
    Ok(LossVars {
        hm,
        pt,
        edge,
        vis,
        syn,
        total,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Training state that survives checkpointing.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: Adam,
    /// Last completed epoch.
    pub epoch: usize,
    pub step: u64,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        let problems = cfg.problems(model.config.backbone.stacks);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let adam = Adam::new(&model.store);
        Ok(Self {
            model,
            cfg,
            adam,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Runs the next epoch.
    pub fn run_epoch(&mut self, data: &[PreparedSample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Empty("train split".into()));
        }
        let epoch = self.epoch + 1;
        let warm = epoch <= self.cfg.warm_start();
        let lr = cosine_lr(self.cfg.lr, epoch, self.cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.cfg.seed, epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut trainable: Vec<usize> = (0..self.model.head.psi_w).collect();
        if !warm {
            trainable.extend(self.model.head.trainable());
        }
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let seeds: Vec<Option<u64>> = idx
                .iter()
                .map(|_| {
                    let masked = rng.gen_bool(self.cfg.mask_prob);
                    let seed: u64 = rng.gen();
                    masked.then_some(seed)
                })
                .collect();
            let batch = assemble_batch(data, idx, &seeds, &self.model, &self.cfg)?;
            let mut g = Graph::new();
            let lv = batch_losses(&mut g, &self.model, &batch, &self.cfg, warm)?;
            let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let comps = LossComponents {
                hm: g.value(lv.hm).item(),
                pt: read(lv.pt),
                edge: read(lv.edge),
                vis: read(lv.vis),
                syn: read(lv.syn),
            };
            let total = total_loss(&comps, &self.cfg.weights, warm).map_err(|e| match e {
                Error::NonFinite(term) => Error::NonFinite(format!("{term} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            let grads = g.backward(lv.total).param_grads(&g, self.model.store.len());
            self.adam.step(&mut self.model.store, &grads, &trainable, lr);
            self.step += 1;
            let k = idx.len() as f64;
            sums.hm += k * comps.hm;
            sums.pt += k * comps.pt;
            sums.edge += k * comps.edge;
            sums.vis += k * comps.vis;
            sums.syn += k * comps.syn;
            total_sum += k * total;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            l_hm: sums.hm / n,
            l_pt: sums.pt / n,
            l_edge: sums.edge / n,
            l_vis: sums.vis / n,
            l_syn: sums.syn / n,
            total: total_sum / n,
            lr,
        };
        self.epoch = epoch;
        self.log.push(entry);
        Ok(entry)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let extra = serde_json::json!({
            "train": serde_json::to_value(&self.cfg)?,
            "epoch": self.epoch,
            "step": self.step,
            "adam_steps": self.adam.steps,
            "log": serde_json::to_value(&self.log)?,
        });
        let mut ck = self.model.to_checkpoint(extra)?;
        for (id, name) in self.model.store.names().iter().enumerate() {
            ck.tensors.push((format!("adam.m.{name}"), self.adam.m[id].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.v[id].clone()));
        }
        Ok(ck)
    }

    /// Restores model, optimizer state and counters.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let model = Model::from_checkpoint(ck, None)?;
        let extra = &ck.meta["extra"];
        let stored: TrainConfig = serde_json::from_value(extra["train"].clone())?;
        let mut t = Trainer::new(model, cfg.unwrap_or(stored))?;
        t.epoch = extra["epoch"].as_u64().unwrap_or(0) as usize;
        t.step = extra["step"].as_u64().unwrap_or(0);
        t.adam.steps = serde_json::from_value(extra["adam_steps"].clone())?;
        t.log = serde_json::from_value(extra["log"].clone())?;
        for (id, name) in t.model.store.names().iter().enumerate() {
            let get = |k: &str| {
                ck.get(&format!("adam.{k}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))
            };
            t.adam.m[id] = get("m")?;
            t.adam.v[id] = get("v")?;
        }
        Ok(t)
    }
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("model.ckpt"),
            log: dir.join("train_log.jsonl"),
        }
    }
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    crate::data::write_atomic(path, text.as_bytes())
}

fn append_log(path: &Path, e: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|err| Error::io(path, err))?;
    writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))
}

/// Runs the remaining epochs of `trainer`, appending log lines and writing
/// checkpoints to `paths` if given.
pub fn train(trainer: &mut Trainer, data: &[PreparedSample], paths: Option<&TrainPaths>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    if let Some(p) = paths {
        if let Some(dir) = p.log.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Lines past the resume point are discarded.
        write_log(&p.log, &trainer.log)?;
    }
    while !trainer.is_done() {
        let e = trainer.run_epoch(data)?;
        if let Some(p) = paths {
            append_log(&p.log, &e)?;
            let every = trainer.cfg.checkpoint_every;
            if trainer.is_done() || (every > 0 && e.epoch % every == 0) {
                trainer.to_checkpoint()?.save(&p.checkpoint)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_sample, SceneParams};
    use crate::layout::LandmarkLayout;
    use crate::model::ModelConfig;

    fn tiny() -> (Model, Vec<PreparedSample>) {
        let mut mc = ModelConfig::default();
        mc.backbone.stacks = 1;
        mc.backbone.channels = 8;
        mc.backbone.crop_h = 16;
        mc.backbone.crop_w = 16;
        mc.visibility.proj_channels = 4;
        let model = Model::new(&mc, &LandmarkLayout::bundled()).unwrap();
        let scene = SceneParams {
            image_size: 40,
            ..SceneParams::default()
        };
        let samples: Vec<_> = (0..6).map(|s| synthesize_sample(s, &scene).unwrap()).collect();
        let data = prepare(&samples, &model, &TargetConfig::default()).unwrap();
        (model, data)
    }

    fn cfg(epochs: usize, warm: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warm_start_epochs: Some(warm),
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warm_start_freezes_head_and_zeroes_terms() {
        let (model, data) = tiny();
        let before = model.store.clone();
        let head = model.head_params();
        let mut t = Trainer::new(model, cfg(2, 1)).unwrap();
        let e1 = t.run_epoch(&data).unwrap();
        assert_eq!(e1.l_vis, 0.0);
        assert_eq!(e1.l_syn, 0.0);
        for &id in &head {
            assert_eq!(t.model.store.get(id), before.get(id), "{}", before.name(id));
        }
        assert_ne!(t.model.store.get(0), before.get(0));
        let e2 = t.run_epoch(&data).unwrap();
        assert!(e2.l_vis > 0.0);
        assert!(head.iter().any(|&id| t.model.store.get(id) != before.get(id)));
    }

    #[test]
    fn resume_reproduces_log() {
        let (model, data) = tiny();
        let mut full = Trainer::new(model.clone(), cfg(3, 1)).unwrap();
        train(&mut full, &data, None).unwrap();
        let mut part = Trainer::new(model, cfg(3, 1)).unwrap();
        part.run_epoch(&data).unwrap();
        let ck = Checkpoint::from_bytes(&part.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck, None).unwrap();
        train(&mut resumed, &data, None).unwrap();
        assert_eq!(resumed.log, full.log);
        assert_eq!(resumed.model.store, full.model.store);
    }

    #[test]
    fn empty_dataset_and_bad_config_rejected() {
        let (model, _) = tiny();
        let mut t = Trainer::new(model.clone(), cfg(1, 0)).unwrap();
        assert!(matches!(t.run_epoch(&[]), Err(Error::Empty(_))));
        assert!(Trainer::new(model, cfg(1, 2)).is_err());
    }

    #[test]
    fn masked_samples_use_merged_labels() {
        let (model, data) = tiny();
        let c = cfg(1, 0);
        let b = assemble_batch(&data, &[0, 1], &[Some(5), None], &model, &c).unwrap();
        let p = model.layout.num_points();
        for k in 0..p {
            let v = data[0].visibility[k] as f64;
            assert_eq!(b.vis_labels.data()[k], v.min(b.pseudo_labels.data()[k]));
            assert_eq!(b.vis_labels.data()[p + k], data[1].visibility[k] as f64);
        }
        assert_eq!(b.masked, vec![true, false]);
    }

    #[test]
    fn occluded_weight_zero_ignores_occluded_heatmaps() {
        let (model, data) = tiny();
        let c = TrainConfig {
            occluded_hm_weight: 0.0,
            ..cfg(1, 0)
        };
        let b = assemble_batch(&data, &[0], &[None], &model, &c).unwrap();
        let mut g = Graph::new();
        let lv = batch_losses(&mut g, &model, &b, &c, true).unwrap();
        let got = g.value(lv.hm).item();
        let out = model.backbone.run(&model.store, &b.crops).unwrap();
        let (p, hw) = (100, b.heatmaps.stride0() / 100);
        let mut want = 0.0;
        for k in 0..p {
            if data[0].visibility[k] == 1 {
                for i in 0..hw {
                    let d = out.stage_heatmaps[0].data()[k * hw + i] - b.heatmaps.data()[k * hw + i];
                    want += d * d;
                }
            }
        }
        assert!((got - want / p as f64).abs() < 1e-9);
    }
}
