//! The command implementations behind the `occface` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_split, write_atomic, AnnotatedSample, BBox, Image, Manifest, Split};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, evaluate_predictions, fit_temperature, oracle_predictions, MetricReport};
use crate::model::{Model, Prediction};
use crate::training::{prepare, train, TrainPaths, Trainer};

fn checked(cfg: &RunConfig) -> Result<()> {
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("{} does not exist", path.display())))
    }
}

/// Writes the resolved config next to a command's outputs.
pub fn log_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{command}_config.json"));
    write_atomic(&path, cfg.to_json()?.as_bytes())?;
    Ok(path)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.scene.validate()?;
    let [tr, va, te] = cfg.counts;
    let manifest = generate_dataset(&cfg.dataset, &cfg.scene, cfg.data_seed(), (tr, va, te))?;
    log_config(cfg, &cfg.dataset, "generate")?;
    Ok(manifest)
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    TrainPaths::in_dir(&cfg.out).checkpoint
}

/// Trains into `cfg.out`; with `resume` an existing checkpoint there is
/// continued. Training always runs at the configured temperature; when
/// `train.temperature_grid` is set and the dataset has a validation split,
/// the saved model then carries the best temperature on that split, and
/// the scores go to `temperature.json`.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Trainer> {
    checked(cfg)?;
    require_dir(&cfg.dataset, "dataset")?;
    let layout = cfg.layout()?;
    let samples = load_split(&cfg.dataset, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    let paths = TrainPaths::in_dir(&cfg.out);
    let mut trainer = if resume && paths.checkpoint.exists() {
        let ck = Checkpoint::load(&paths.checkpoint)?;
        let mut t = Trainer::from_checkpoint(&ck, Some(cfg.train.clone()))?;
        let mut stored = t.model.config.clone();
        stored.temperature = cfg.model.temperature;
        if t.model.layout.hash() != layout.hash() || stored != cfg.model {
            return Err(Error::Checkpoint("checkpoint does not match the configured model".into()));
        }
        t.model.config = stored;
        t
    } else {
        Trainer::new(Model::new(&cfg.model, &layout)?, cfg.train.clone())?
    };
    log_config(cfg, &cfg.out, "train")?;
    let data = prepare(&samples, &trainer.model, &cfg.train.targets)?;
    train(&mut trainer, &data, Some(&paths))?;
    if !cfg.train.temperature_grid.is_empty() {
        let val = load_split(&cfg.dataset, Split::Val)?;
        if !val.is_empty() {
            let fit = fit_temperature(&trainer.model, &val, &cfg.eval, &cfg.train.temperature_grid)?;
            trainer.model.config.temperature = fit.best;
            let json = serde_json::to_string_pretty(&fit)? + "\n";
            write_atomic(&cfg.out.join("temperature.json"), json.as_bytes())?;
            trainer.to_checkpoint()?.save(&paths.checkpoint)?;
        }
    }
    Ok(trainer)
}

pub fn report_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.out.join(format!("report_{}.json", split.name()))
}

/// Evaluates a checkpoint, or the ground truth itself in oracle mode, and
/// writes the report.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, oracle: bool) -> Result<MetricReport> {
    checked(cfg)?;
    require_dir(&cfg.dataset, "dataset")?;
    let layout = cfg.layout()?;
    let samples = load_split(&cfg.dataset, split)?;
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} split", split.name())));
    }
    let report = if oracle {
        evaluate_predictions(&samples, &oracle_predictions(&samples), &cfg.eval)?
    } else {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg));
        let model = Model::from_checkpoint(&Checkpoint::load(&path)?, Some(&layout))?;
        evaluate(&model, &samples, &cfg.eval)?
    };
    log_config(cfg, &cfg.out, "eval")?;
    report.save(&report_path(cfg, split))?;
    Ok(report)
}

/// Predicts landmarks for one image region, in source pixel coordinates.
pub fn cmd_infer(checkpoint: &Path, image: &Path, bbox: BBox) -> Result<Prediction> {
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?, None)?;
    let sample = AnnotatedSample {
        image: Image::load_png(image)?,
        bbox,
        points: Vec::new(),
        visibility: Vec::new(),
        domain_tag: String::new(),
    };
    Ok(model.predict_samples(&[sample], 1)?.remove(0))
}

const COLUMNS: [&str; 8] = ["nme", "nme_vis", "nme_occ", "occ_ap", "f1", "roc_auc", "fr", "ced_auc"];

fn row(r: &MetricReport) -> [Option<f64>; 8] {
    let m = &r.metrics;
    [
        Some(m.nme),
        m.nme_vis,
        m.nme_occ,
        m.occ_ap,
        Some(m.f1),
        m.roc_auc,
        Some(m.fr),
        Some(m.ced_auc),
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.6}"))
}

/// Comparison table plus CED and PR curve CSVs for named reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTables {
    pub markdown: String,
    pub csv: String,
    pub ced_csv: String,
    pub pr_csv: String,
}

pub fn build_report(runs: &[(String, MetricReport)]) -> Result<ReportTables> {
    if runs.is_empty() {
        return Err(Error::Empty("report input list".into()));
    }
    let mut md = format!("| run | {} |\n|---|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
    let mut csv = format!("run,{}\n", COLUMNS.join(","));
    let mut ced = String::from("run,nme,fraction\n");
    let mut pr = String::from("run,threshold,recall,precision\n");
    for (name, r) in runs {
        let cells: Vec<String> = row(r).into_iter().map(cell).collect();
        let _ = writeln!(md, "| {name} | {} |", cells.join(" | "));
        let _ = writeln!(csv, "{name},{}", cells.join(","));
        for (x, y) in r.ced_points() {
            let _ = writeln!(ced, "{name},{x},{y}");
        }
        for [t, rec, prec] in &r.curves.pr {
            let _ = writeln!(pr, "{name},{t},{rec},{prec}");
        }
    }
    Ok(ReportTables {
        markdown: md,
        csv,
        ced_csv: ced,
        pr_csv: pr,
    })
}

/// Loads reports, naming each by its parent directory (or file stem when
/// that is not unique), and writes the tables into `out`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<ReportTables> {
    if inputs.is_empty() {
        return Err(Error::Empty("report input list".into()));
    }
    let mut runs = Vec::new();
    for p in inputs {
        let dir_name = p
            .parent()
            .and_then(|d| d.file_name())
            .map(|s| s.to_string_lossy().into_owned());
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        runs.push((dir_name.unwrap_or(stem.clone()), stem, MetricReport::load(p)?));
    }
    let unique = {
        let mut names: Vec<&String> = runs.iter().map(|r| &r.0).collect();
        names.sort();
        names.dedup();
        names.len() == runs.len()
    };
    let named: Vec<(String, MetricReport)> = runs
        .into_iter()
        .map(|(d, s, r)| (if unique { d } else { format!("{d}/{s}") }, r))
        .collect();
    let t = build_report(&named)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("table.md"), t.markdown.as_bytes())?;
    write_atomic(&out.join("table.csv"), t.csv.as_bytes())?;
    write_atomic(&out.join("ced.csv"), t.ced_csv.as_bytes())?;
    write_atomic(&out.join("pr.csv"), t.pr_csv.as_bytes())?;
    Ok(t)
}
