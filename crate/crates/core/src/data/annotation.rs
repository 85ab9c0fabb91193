//! Annotation files, dataset manifests and parallel dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{synthesize_sample, AnnotatedSample, BBox, Image, SceneParams};
use crate::error::{Error, Result};
use crate::layout::NUM_POINTS;
use crate::par;

/// On-disk annotation record. `image` is relative to the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub points: Vec<[f64; 2]>,
    pub visibility: Vec<i64>,
    pub domain: String,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Writes `<stem>.json` and `<stem>.png` into `dir`.
pub fn write_annotation(sample: &AnnotatedSample, dir: &Path, stem: &str) -> Result<PathBuf> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = format!("{stem}.png");
    sample.image.save_png(&dir.join(&png))?;
    let b = sample.bbox;
    let record = AnnotationFile {
        image: png,
        bbox: [b.x, b.y, b.width, b.height].map(round6),
        points: sample.points.iter().map(|p| p.map(round6)).collect(),
        visibility: sample.visibility.iter().map(|&v| v as i64).collect(),
        domain: sample.domain_tag.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    write_atomic(&path, serde_json::to_string(&record)?.as_bytes())?;
    Ok(path)
}

pub fn read_annotation(path: &Path) -> Result<AnnotatedSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let record: AnnotationFile =
        serde_json::from_value(value).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    if record.points.len() != NUM_POINTS {
        return Err(Error::schema(
            "points",
            format!("expected {NUM_POINTS} points, found {}", record.points.len()),
        ));
    }
    let mut visibility = Vec::with_capacity(NUM_POINTS);
    for &v in &record.visibility {
        if v != 0 && v != 1 {
            return Err(Error::schema("visibility", format!("value {v} is not 0 or 1")));
        }
        visibility.push(v as u8);
    }
    let image_path = path.parent().unwrap_or(Path::new(".")).join(&record.image);
    if !image_path.is_file() {
        return Err(Error::schema(
            "image",
            format!("missing image file {}", image_path.display()),
        ));
    }
    let image = Image::load_png(&image_path)?;
    let [x, y, width, height] = record.bbox;
    let sample = AnnotatedSample {
        image,
        bbox: BBox { x, y, width, height },
        points: record.points,
        visibility,
        domain_tag: record.domain,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes through a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("expected train, val or test, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: SceneParams,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn files(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.file.as_str())
    }
}

/// Generates `counts = (train, val, test)` samples into `dir`. Sample `i`
/// uses seed `base_seed + i`, so any subset can be regenerated alone.
pub fn generate_dataset(
    dir: &Path,
    scene: &SceneParams,
    base_seed: u64,
    counts: (usize, usize, usize),
) -> Result<Manifest> {
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total = counts.0 + counts.1 + counts.2;
    let entries: Vec<Result<ManifestEntry>> = par::map_range(total, |i| {
        let split = if i < counts.0 {
            Split::Train
        } else if i < counts.0 + counts.1 {
            Split::Val
        } else {
            Split::Test
        };
        let seed = base_seed.wrapping_add(i as u64);
        let sample = synthesize_sample(seed, scene)?;
        let stem = format!("{i:06}");
        write_annotation(&sample, dir, &stem)?;
        Ok(ManifestEntry {
            file: format!("{stem}.json"),
            split,
            seed,
        })
    });
    let manifest = Manifest {
        scene: scene.clone(),
        entries: entries.into_iter().collect::<Result<_>>()?,
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Loads every sample of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<AnnotatedSample>> {
    let manifest = Manifest::load(dir)?;
    let files: Vec<&str> = manifest.files(split).collect();
    par::map_slice(&files, |f| read_annotation(&dir.join(f)))
        .into_iter()
        .collect()
}
