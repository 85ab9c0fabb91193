//! Run configuration: one JSON document, ablation presets and dotted-path
//! overrides such as `train.epochs=20`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SceneParams;
use crate::error::{Error, Result};
use crate::evalsuite::MetricConfig;
use crate::layout::{load_layout, LandmarkLayout};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::visibility::FusionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Fans out to the backbone, head and training seeds.
    pub seed: u64,
    /// Dataset generation seed; `None` uses `seed`.
    pub data_seed: Option<u64>,
    /// Layout file; `None` uses the bundled 100-point layout.
    pub layout: Option<PathBuf>,
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Samples per split for `generate`: train, val, test.
    pub counts: [usize; 3],
    pub scene: SceneParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: None,
            layout: None,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            counts: [1000, 100, 200],
            scene: SceneParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: MetricConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 9] = [
    "heatmap_only",
    "+point",
    "+point+edge",
    "local_only",
    "ctx_only",
    "fixed_sum",
    "gated",
    "no_occaug",
    "occaug",
];

impl RunConfig {
    /// Parses a config document; keys missing from it take default values
    /// and unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let mut unknown = Vec::new();
        unknown_keys(&serde_json::to_value(RunConfig::default())?, &v, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown.into_iter().map(|k| format!("unknown key {k}")).collect()));
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let bb = &mut self.model.backbone;
        match name {
            "heatmap_only" => (bb.use_point_map, bb.use_edge_map) = (false, false),
            "+point" => (bb.use_point_map, bb.use_edge_map) = (true, false),
            "+point+edge" => (bb.use_point_map, bb.use_edge_map) = (true, true),
            "local_only" => self.model.visibility.mode = FusionMode::LocalOnly,
            "ctx_only" => self.model.visibility.mode = FusionMode::ContextOnly,
            "fixed_sum" => self.model.visibility.mode = FusionMode::FixedSum,
            "gated" => self.model.visibility.mode = FusionMode::Gated,
            "no_occaug" => self.train.mask_prob = 0.0,
            "occaug" => self.train.mask_prob = 0.5,
            other => {
                return Err(Error::invalid(
                    "preset",
                    format!("unknown preset {other:?}; expected one of {}", PRESETS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    /// Sets the value at a dotted path. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut cur = &mut root;
        for key in path.split('.') {
            cur = cur
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::invalid("override", format!("unknown config key {path}")))?;
        }
        *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root)
            .map_err(|e| Error::invalid("override", format!("{path}={raw}: {e}")))?;
        Ok(())
    }

    /// Copies `seed` into the component seeds.
    pub fn resolve_seeds(&mut self) {
        self.model.backbone.seed = self.seed;
        self.model.visibility.seed = self.seed.wrapping_add(1);
        self.train.seed = self.seed.wrapping_add(2);
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn layout(&self) -> Result<LandmarkLayout> {
        match &self.layout {
            Some(p) => load_layout(p),
            None => Ok(LandmarkLayout::bundled()),
        }
    }

    /// Every validation failure across sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.train.problems(self.model.backbone.stacks));
        out.extend(self.eval.problems());
        if let Err(e) = self.scene.validate() {
            out.push(e.to_string());
        }
        out
    }
}

fn unknown_keys(reference: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(r), Some(g)) = (reference.as_object(), given.as_object()) else {
        return;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(rv, v, &path, out),
        }
    }
}

/// Splits `--a.b=v` arguments out of an argument list.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((k, v)) if k.contains('.') => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}
