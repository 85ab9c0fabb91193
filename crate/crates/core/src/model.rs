//! The full network: backbone, evidence-gated decoding and visibility head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneVars};
use crate::checkpoint::Checkpoint;
use crate::data::{apply_affine, invert_affine, normalize_crop, AnnotatedSample};
use crate::decode::{coords_to_crop, decode_vars, evidence_var, membership_groups, DecodeVars};
use crate::error::{Error, Result};
use crate::layout::LandmarkLayout;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::visibility::{VisibilityHead, VisibilityHeadConfig, VisibilityVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub visibility: VisibilityHeadConfig,
    /// Softmax temperature used when decoding coordinates.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            visibility: VisibilityHeadConfig::default(),
            temperature: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.backbone.problems();
        out.extend(self.visibility.problems());
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push("model.temperature must be positive".to_string());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: LandmarkLayout,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: VisibilityHead,
    groups: Arc<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub decode: DecodeVars,
    pub visibility: Option<VisibilityVars>,
}

/// Predictions for one crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Crop pixels from [`Model::predict`], source pixels from
    /// [`Model::predict_samples`].
    pub points: Vec<[f64; 2]>,
    /// Probability that each landmark is visible.
    pub visibility: Vec<f64>,
}

impl Model {
    pub fn new(config: &ModelConfig, layout: &LandmarkLayout) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (p, ne) = (layout.num_points(), layout.num_edges());
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&config.backbone, p, ne, &mut store)?;
        let bc = &config.backbone;
        let cues = bc.channels + if bc.use_point_map { p } else { 0 } + if bc.use_edge_map { ne } else { 0 };
        let head = VisibilityHead::build(&config.visibility, p, cues, &mut store)?;
        Ok(Self {
            config: config.clone(),
            layout: layout.clone(),
            store,
            backbone,
            head,
            groups: membership_groups(layout),
        })
    }

    pub fn crop_size(&self) -> (usize, usize) {
        (self.config.backbone.crop_h, self.config.backbone.crop_w)
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.stride
    }

    /// Ids of the visibility-head parameters.
    pub fn head_params(&self) -> Vec<usize> {
        let first = self.head.psi_w;
        (first..self.store.len()).collect()
    }

    /// Records a forward pass over `crops: [N, 3, h, w]`.
    pub fn forward(&self, g: &mut Graph, crops: Var, with_visibility: bool) -> Result<ModelVars> {
        let bb = self.backbone.forward(&self.store, g, crops)?;
        let evidence = bb.edge_pred.map(|e| evidence_var(g, e, self.groups.clone()));
        let heatmaps = *bb.stage_heatmaps.last().unwrap();
        let decode = decode_vars(g, heatmaps, bb.point_pred, evidence, self.config.temperature);
        let visibility = if with_visibility {
            let mut parts = vec![bb.features];
            parts.extend(bb.point_pred);
            parts.extend(bb.edge_pred);
            let cues = if parts.len() == 1 { parts[0] } else { g.concat(&parts) };
            Some(self.head.forward(&self.store, g, cues, decode.attention)?)
        } else {
            None
        };
        Ok(ModelVars {
            backbone: bb,
            decode,
            visibility,
        })
    }

    /// Inference over a batch of crops.
    pub fn predict(&self, crops: &Tensor) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let x = g.input(crops.clone());
        let v = self.forward(&mut g, x, true)?;
        let coords = g.value(v.decode.coords);
        let probs = g.value(v.visibility.unwrap().probs);
        let n = crops.shape()[0];
        Ok((0..n)
            .map(|i| Prediction {
                points: coords_to_crop(coords, i, self.stride()),
                visibility: probs.slab(i).to_vec(),
            })
            .collect())
    }

    /// Crops each sample's box, predicts, and maps points back to source
    /// pixels. Work is chunked into batches of `batch`.
    pub fn predict_samples(&self, samples: &[AnnotatedSample], batch: usize) -> Result<Vec<Prediction>> {
        let (h, w) = self.crop_size();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            let crops: Vec<_> = chunk
                .iter()
                .map(|s| normalize_crop(s, h, w))
                .collect::<Result<_>>()?;
            let stacked = Tensor::stack(&crops.iter().map(|c| c.crop.clone()).collect::<Vec<_>>())?;
            for (pred, nc) in self.predict(&stacked)?.into_iter().zip(&crops) {
                let inv = invert_affine(&nc.transform);
                out.push(Prediction {
                    points: pred.points.iter().map(|&p| apply_affine(&inv, p)).collect(),
                    visibility: pred.visibility,
                });
            }
        }
        Ok(out)
    }

    /// Landmark positions in source pixels decoded at each of
    /// `temperatures`, sharing one backbone pass: `out[t][sample]`.
    pub fn locate_samples(
        &self,
        samples: &[AnnotatedSample],
        batch: usize,
        temperatures: &[f64],
    ) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
        if let Some(t) = temperatures.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("temperature", format!("must be positive and finite, got {t}")));
        }
        let (h, w) = self.crop_size();
        let mut out = vec![Vec::with_capacity(samples.len()); temperatures.len()];
        for chunk in samples.chunks(batch.max(1)) {
            let crops: Vec<_> = chunk
                .iter()
                .map(|s| normalize_crop(s, h, w))
                .collect::<Result<_>>()?;
            let stacked = Tensor::stack(&crops.iter().map(|c| c.crop.clone()).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let x = g.input(stacked);
            let bb = self.backbone.forward(&self.store, &mut g, x)?;
            let evidence = bb.edge_pred.map(|e| evidence_var(&mut g, e, self.groups.clone()));
            let heatmaps = *bb.stage_heatmaps.last().unwrap();
            for (t, dst) in temperatures.iter().zip(out.iter_mut()) {
                let d = decode_vars(&mut g, heatmaps, bb.point_pred, evidence, *t);
                for (i, nc) in crops.iter().enumerate() {
                    let inv = invert_affine(&nc.transform);
                    let pts = coords_to_crop(g.value(d.coords), i, self.stride());
                    dst.push(pts.iter().map(|&p| apply_affine(&inv, p)).collect());
                }
            }
        }
        Ok(out)
    }

    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .names()
            .iter()
            .cloned()
            .zip(self.store.tensors().iter().cloned())
            .collect()
    }

    /// Replaces parameters by name from a checkpoint; every parameter must
    /// be present with a matching shape.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for id in 0..self.store.len() {
            let name = self.store.name(id).to_string();
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::json!({
                "model": serde_json::to_value(&self.config)?,
                "layout": serde_json::to_value(self.layout.to_file())?,
                "layout_hash": self.layout.hash(),
                "extra": extra,
            }),
            tensors: self.param_tensors(),
        })
    }

    /// Rebuilds a model from a checkpoint. If `expected_layout` is given its
    /// hash must match the stored one.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected_layout: Option<&LandmarkLayout>) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())?;
        let layout = LandmarkLayout::from_file(serde_json::from_value(ckpt.meta["layout"].clone())?)?;
        let stored_hash = ckpt.meta["layout_hash"].as_str().unwrap_or_default();
        if layout.hash() != stored_hash {
            return Err(Error::Checkpoint("embedded layout does not match its hash".into()));
        }
        if let Some(exp) = expected_layout {
            if exp.hash() != stored_hash {
                return Err(Error::Checkpoint(format!(
                    "layout hash mismatch: checkpoint {stored_hash}, config {}",
                    exp.hash()
                )));
            }
        }
        let mut model = Model::new(&config, &layout)?;
        model.load_params(ckpt)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stacks: 1,
                channels: 8,
                crop_h: 16,
                crop_w: 16,
                stride: 4,
                ..BackboneConfig::default()
            },
            visibility: VisibilityHeadConfig {
                proj_channels: 4,
                ..VisibilityHeadConfig::default()
            },
            temperature: 1.0,
        }
    }

    #[test]
    fn predictions_are_well_formed() {
        let m = Model::new(&micro_config(), &LandmarkLayout::bundled()).unwrap();
        let crops = Tensor::from_vec(
            &[2, 3, 16, 16],
            (0..2 * 3 * 256).map(|i| ((i * 31) % 97) as f64 / 97.0).collect(),
        )
        .unwrap();
        let preds = m.predict(&crops).unwrap();
        assert_eq!(preds.len(), 2);
        for p in &preds {
            assert_eq!(p.points.len(), 100);
            assert!(p.points.iter().flatten().all(|&c| (0.0..=16.0).contains(&c)));
            assert!(p.visibility.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let layout = LandmarkLayout::bundled();
        let m = Model::new(&micro_config(), &layout).unwrap();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint(serde_json::json!({})).unwrap().to_bytes().unwrap()).unwrap();
        let back = Model::from_checkpoint(&ck, Some(&layout)).unwrap();
        let crops = Tensor::full(&[1, 3, 16, 16], 0.25);
        assert_eq!(m.predict(&crops).unwrap(), back.predict(&crops).unwrap());
    }

    #[test]
    fn layout_hash_mismatch_rejected() {
        let layout = LandmarkLayout::bundled();
        let m = Model::new(&micro_config(), &layout).unwrap();
        let ck = m.to_checkpoint(serde_json::json!({})).unwrap();
        let mut file = layout.to_file();
        file.points[0].name = "renamed".into();
        let other = LandmarkLayout::from_file(file).unwrap();
        assert!(Model::from_checkpoint(&ck, Some(&other)).is_err());
    }

    #[test]
    fn head_params_cover_visibility_only() {
        let m = Model::new(&micro_config(), &LandmarkLayout::bundled()).unwrap();
        for id in m.head_params() {
            assert!(m.store.name(id).starts_with("vis."));
        }
        for id in 0..m.head.psi_w {
            assert!(m.store.name(id).starts_with("backbone."));
        }
    }
}
