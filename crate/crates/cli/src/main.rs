use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use occface::config::{extract_overrides, RunConfig};
use occface::data::{write_atomic, BBox, Split};
use occface::pipeline;

/// Occlusion-aware 100-point facial landmark detection.
///
/// Any config value can be overridden with a dotted flag such as
/// `--train.epochs=20` or `--model.visibility.mode=local_only`.
#[derive(Debug, Parser)]
#[command(name = "occface", version)]
struct Cli {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, global = true, env = "OCCFACE_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Ablation preset, applied in order; may be repeated.
    #[arg(long, global = true)]
    preset: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset with train/val/test splits.
    Generate {
        /// Samples per split as train,val,test.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Train a model into the output directory.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a split and write a metric report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict landmarks and visibility for one image region.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Face box as x,y,width,height in pixels.
        #[arg(long = "box", value_delimiter = ',', required = true)]
        bbox: Vec<f64>,
        /// Write the prediction here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Merge metric reports into comparison tables and curve CSVs.
    Report {
        reports: Vec<PathBuf>,
        /// Directory for table.md, table.csv, ced.csv and pr.csv.
        #[arg(long, default_value = "report")]
        output: PathBuf,
    },
}

fn resolve(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for p in &cli.preset {
        cfg.apply_preset(p)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset = d.clone();
    }
    cfg.resolve_seeds();
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".into(), |x| format!("{x:.5}"))
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut cfg = resolve(&cli, &overrides)?;
    match cli.command {
        Command::Generate { counts } => {
            if let Some(c) = counts {
                let [tr, va, te] = c[..] else {
                    bail!("--counts needs train,val,test");
                };
                cfg.counts = [tr, va, te];
            }
            eprintln!("seed={} data_seed={}", cfg.seed, cfg.data_seed());
            let m = pipeline::cmd_generate(&cfg)?;
            println!("wrote {} samples to {}", m.entries.len(), cfg.dataset.display());
        }
        Command::Train { resume } => {
            eprintln!("seed={}", cfg.seed);
            let t = pipeline::cmd_train(&cfg, resume)?;
            let last = t.log.last().context("no epochs were run")?;
            println!(
                "trained {} epochs; final total loss {:.6}; checkpoint {}",
                t.epoch,
                last.total,
                pipeline::checkpoint_path(&cfg).display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            oracle,
        } => {
            eprintln!("seed={}", cfg.seed);
            let split = Split::parse(&split)?;
            let r = pipeline::cmd_eval(&cfg, checkpoint.as_deref(), split, oracle)?;
            let m = &r.metrics;
            println!(
                "nme={:.5} nme_vis={} nme_occ={} occ_ap={} f1={:.5} roc_auc={} fr={:.5} ced_auc={:.5} -> {}",
                m.nme,
                fmt_opt(m.nme_vis),
                fmt_opt(m.nme_occ),
                fmt_opt(m.occ_ap),
                m.f1,
                fmt_opt(m.roc_auc),
                m.fr,
                m.ced_auc,
                pipeline::report_path(&cfg, split).display()
            );
        }
        Command::Infer {
            checkpoint,
            image,
            bbox,
            output,
        } => {
            let [x, y, width, height] = bbox[..] else {
                bail!("--box needs x,y,width,height");
            };
            let pred = pipeline::cmd_infer(&checkpoint, &image, BBox { x, y, width, height })?;
            let json = serde_json::to_string_pretty(&pred)? + "\n";
            match output {
                Some(p) => write_atomic(&p, json.as_bytes())?,
                None => print!("{json}"),
            }
        }
        Command::Report { reports, output } => {
            let t = pipeline::cmd_report(&reports, &output)?;
            print!("{}", t.markdown);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
