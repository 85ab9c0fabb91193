use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use occface::checkpoint::Checkpoint;
use occface::data::{load_split, Split};
use occface::model::{Model, Prediction};

const TINY: &str = r#"{
  "counts": [12, 2, 4],
  "scene": {"image_size": 32},
  "model": {
    "backbone": {"stacks": 1, "channels": 8, "crop_h": 16, "crop_w": 16, "stride": 4},
    "visibility": {"proj_channels": 4}
  },
  "train": {"epochs": 2, "batch_size": 4}
}"#;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_occface"))
            .current_dir(&self.root)
            .env_remove("OCCFACE_OUT")
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn manifest_entries(dir: &Path) -> usize {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v["entries"].as_array().unwrap().len()
}

#[test]
fn generate_writes_requested_counts() {
    let env = Env::new();
    env.ok(&["generate", "--dataset", "d", "--counts", "3,1,2"]);
    assert_eq!(manifest_entries(&env.path("d")), 6);
    assert_eq!(load_split(&env.path("d"), Split::Val).unwrap().len(), 1);
    assert!(env.path("d/generate_config.json").is_file());
    assert!(env.fails(&["generate", "--dataset", "e", "--counts", "3,1"]).contains("train,val,test"));
}

#[test]
fn pipeline_is_deterministic() {
    let env = Env::new();
    for run in ["a", "b"] {
        let data = format!("{run}/data");
        let out = format!("{run}/out");
        env.ok(&["generate", "--seed", "5", "--dataset", &data]);
        env.ok(&["train", "--seed", "5", "--dataset", &data, "--out", &out]);
        env.ok(&["eval", "--seed", "5", "--dataset", &data, "--out", &out]);
    }
    let a = fs::read(env.path("a/out/report_test.json")).unwrap();
    let b = fs::read(env.path("b/out/report_test.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(env.path("a/out/model.ckpt")).unwrap(),
        fs::read(env.path("b/out/model.ckpt")).unwrap()
    );
}

#[test]
fn train_logs_every_epoch_and_resumes() {
    let env = Env::new();
    env.ok(&["generate", "--dataset", "d"]);
    let stdout = env.ok(&["train", "--dataset", "d", "--out", "r"]);
    assert!(stdout.contains("trained 2 epochs"), "{stdout}");
    let log = fs::read_to_string(env.path("r/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["L_hm", "L_pt", "L_edge", "L_vis", "L_syn", "total"] {
            assert!(v[key].as_f64().unwrap().is_finite(), "{key} in {line}");
        }
    }
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(env.path("r/temperature.json")).unwrap()).unwrap();
    assert_eq!(fit["grid"].as_array().unwrap().len(), 8);
    let model = Model::from_checkpoint(&Checkpoint::load(&env.path("r/model.ckpt")).unwrap(), None).unwrap();
    assert_eq!(Some(model.config.temperature), fit["best"].as_f64());
    env.ok(&["train", "--dataset", "d", "--out", "r", "--resume", "--train.epochs=3"]);
    let log = fs::read_to_string(env.path("r/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let err = env.fails(&["train", "--dataset", "d", "--out", "r", "--resume", "--model.backbone.channels=16"]);
    assert!(err.contains("does not match"), "{err}");
}

#[test]
fn oracle_eval_is_perfect() {
    let env = Env::new();
    env.ok(&["generate", "--dataset", "d"]);
    let stdout = env.ok(&["eval", "--dataset", "d", "--out", "o", "--oracle", "--split", "val"]);
    assert!(stdout.contains("nme=0.00000"), "{stdout}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("o/report_val.json")).unwrap()).unwrap();
    assert_eq!(v["metrics"]["nme"].as_f64(), Some(0.0));
    assert_eq!(v["metrics"]["fr"].as_f64(), Some(0.0));
}

#[test]
fn empty_train_split_is_an_error() {
    let env = Env::new();
    env.ok(&["generate", "--dataset", "d", "--counts", "0,1,1"]);
    let err = env.fails(&["train", "--dataset", "d", "--out", "r"]);
    assert!(err.contains("train split"), "{err}");
    assert!(!env.path("r/model.ckpt").exists());
}

#[test]
fn infer_matches_batch_prediction() {
    let env = Env::new();
    env.ok(&["generate", "--dataset", "d"]);
    env.ok(&["train", "--dataset", "d", "--out", "r"]);
    let samples = load_split(&env.path("d"), Split::Test).unwrap();
    let model = Model::from_checkpoint(&Checkpoint::load(&env.path("r/model.ckpt")).unwrap(), None).unwrap();
    let batch = model.predict_samples(&samples, 3).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(env.path("d/manifest.json")).unwrap()).unwrap();
    let first_test = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["split"] == "test")
        .unwrap()["file"]
        .as_str()
        .unwrap()
        .replace(".json", ".png");
    let b = samples[0].bbox;
    let bbox = format!("{},{},{},{}", b.x, b.y, b.width, b.height);
    let image = env.path("d").join(first_test);
    env.ok(&[
        "infer",
        "--checkpoint",
        "r/model.ckpt",
        "--image",
        image.to_str().unwrap(),
        "--box",
        &bbox,
        "--output",
        "pred.json",
    ]);
    let p: Prediction = serde_json::from_str(&fs::read_to_string(env.path("pred.json")).unwrap()).unwrap();
    assert_eq!(p.points.len(), 100);
    for (a, e) in p.points.iter().zip(&batch[0].points) {
        assert!((a[0] - e[0]).abs() < 1e-9 && (a[1] - e[1]).abs() < 1e-9, "{a:?} vs {e:?}");
    }
    for (a, e) in p.visibility.iter().zip(&batch[0].visibility) {
        assert!((a - e).abs() < 1e-9);
    }
    assert!(env.fails(&["infer", "--checkpoint", "r/model.ckpt", "--image", "pred.json", "--box", "1,2,3"]).contains("x,y,width,height"));
}

#[test]
fn report_merges_runs() {
    let env = Env::new();
    env.ok(&["generate", "--dataset", "d"]);
    for run in ["x", "y", "z"] {
        env.ok(&["eval", "--dataset", "d", "--out", run, "--oracle"]);
    }
    let stdout = env.ok(&["report", "x/report_test.json", "y/report_test.json", "z/report_test.json", "--output", "rep"]);
    assert!(stdout.contains("| x |"), "{stdout}");
    let csv = fs::read_to_string(env.path("rep/table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("run,nme,"));
    let ced = fs::read_to_string(env.path("rep/ced.csv")).unwrap();
    assert!(ced.lines().skip(1).all(|l| l.starts_with(['x', 'y', 'z'])));
    assert!(env.path("rep/pr.csv").is_file());
    assert!(env.fails(&["report", "--output", "rep2"]).contains("report input list"));
}

#[test]
fn bad_overrides_and_presets_are_rejected() {
    let env = Env::new();
    let err = env.fails(&["generate", "--dataset", "d", "--train.nonsense=3"]);
    assert!(err.contains("train.nonsense"), "{err}");
    let err = env.fails(&["generate", "--dataset", "d", "--preset", "bogus"]);
    assert!(err.contains("unknown preset"), "{err}");
    let err = env.fails(&["train", "--dataset", "missing", "--out", "r"]);
    assert!(err.contains("missing"), "{err}");
    let err = env.fails(&["eval", "--dataset", "d", "--split", "dev", "--oracle"]);
    assert!(err.contains("split"), "{err}");
}
