use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use swinbird::config::RunConfig;
use swinbird::data::{generate_dataset, Dataset, Split};
use swinbird::gradcheck_suite;
use swinbird::metrics::pr_csv;
use swinbird::pipeline::{
    ablate_window, detections_jsonl, evaluate, load_model, mine_with_model, read_metrics, train, AblationTable,
    TrainOptions, METRICS_FILE,
};
use swinbird::plot::{ablation_svg, loss_csv, loss_curves_svg};
use swinbird::tensor::load_checkpoint;
use swinbird::{Error, Result};

/// Small-bird detector with a shifted-window neck.
#[derive(Parser, Debug)]
#[command(name = "swinbird", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run config (may name a base `preset`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, init and training seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root holding `train/` and `val/`
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic train/val (and clutter-only) datasets
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write N bird-free clutter scenes to `<out>/clutter`
        #[arg(long, default_value_t = 0)]
        clutter: usize,
    },
    /// Train a detector
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        neck_window: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Resume from a training checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Treat --checkpoint as initial weights and start a fresh run
        #[arg(long)]
        fine_tune: bool,
        /// Enable hard-negative batches at this rate (needs mined negatives)
        #[arg(long)]
        hard_negative_rate: Option<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Mine hard negatives on the training split with a trained model
    MineHn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write the updated manifest (defaults to the train split)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory to evaluate (defaults to `<data>/val`)
        #[arg(long)]
        split_dir: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Train one model per neck window size and tabulate AP
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
        windows: Vec<usize>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run the finite-difference gradient suite
    GradCheck {
        /// Write the per-check results as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sampled elements per parameter tensor in the end-to-end check
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
    /// Render loss curves and the ablation chart as SVG/CSV
    Plot {
        /// Training run directory (reads metrics.jsonl)
        #[arg(long)]
        run: Option<PathBuf>,
        /// ablation.csv to chart
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.data.scene.seed = s;
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    if let Some(d) = &c.data {
        cfg.data.root = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path) -> Result<Dataset> {
    if !dir.join(swinbird::data::MANIFEST).exists() {
        return Err(Error::Usage(format!(
            "no dataset at {} (run `swinbird synth` first)",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

fn require_checkpoint(p: &Option<PathBuf>) -> Result<PathBuf> {
    let p = p.clone().ok_or_else(|| Error::Usage("--checkpoint is required".into()))?;
    if !p.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { common, out, clutter } => {
            let cfg = load_config(&common)?;
            let root = out.unwrap_or_else(|| cfg.data.root.clone());
            let scene = &cfg.data.scene;
            let tr = generate_dataset(scene, cfg.data.n_train, Split::Train, &root.join("train"))?;
            let va = generate_dataset(scene, cfg.data.n_val, Split::Val, &root.join("val"))?;
            let mut summary = json!({
                "root": root,
                "train_images": tr.images.len(),
                "train_boxes": tr.annotations.len(),
                "val_images": va.images.len(),
                "val_boxes": va.annotations.len(),
            });
            if clutter > 0 {
                let mut c = scene.clone();
                c.birds_per_image = (0, 0);
                generate_dataset(&c, clutter, Split::Clutter, &root.join("clutter"))?;
                summary["clutter_images"] = json!(clutter);
            }
            println!("{summary}");
        }
        Cmd::Train {
            common,
            neck_window,
            epochs,
            out,
            checkpoint,
            fine_tune,
            hard_negative_rate,
            quiet,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = neck_window {
                cfg.model.neck.window = m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(r) = hard_negative_rate {
                cfg.hard_negative.enabled = true;
                cfg.hard_negative.rate = r;
            }
            cfg.validate()?;
            let data = load_split(&cfg.data.train_dir())?;
            if cfg.hard_negative.enabled && data.manifest.hard_negatives.is_empty() {
                return Err(Error::Usage(
                    "hard-negative training requested but the manifest has no mined negatives (run `swinbird mine-hn`)".into(),
                ));
            }
            let val = load_split(&cfg.data.val_dir()).ok();
            let mut opts = TrainOptions {
                out_dir: out.clone(),
                verbose: !quiet,
                ..Default::default()
            };
            if let Some(p) = &checkpoint {
                let p = require_checkpoint(&Some(p.clone()))?;
                let has_state = load_checkpoint(&p)?.metadata.get("run").is_some();
                if fine_tune || !has_state {
                    opts.init = Some(p);
                } else {
                    opts.resume = Some(p);
                    opts.stop_after = epochs;
                }
            }
            let report = train(&cfg, &data, val.as_ref(), &opts)?;
            let last = report.metrics.last();
            println!(
                "{}",
                json!({
                    "checkpoint": report.checkpoint,
                    "model": report.model_checkpoint,
                    "metrics": out.join(METRICS_FILE),
                    "epochs_run": report.metrics.len(),
                    "final": last,
                })
            );
        }
        Cmd::MineHn { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let ck = require_checkpoint(&checkpoint)?;
            let model = load_model(&ck)?;
            let mut data = load_split(&cfg.data.train_dir())?;
            let mined = mine_with_model(&model, &data, &cfg)?;
            let n_images = swinbird::data::hard_negative_ids(&mined).len();
            data.set_hard_negatives(mined);
            let dir = out.unwrap_or_else(|| cfg.data.train_dir());
            std::fs::create_dir_all(&dir)?;
            data.manifest.save(&dir)?;
            println!(
                "{}",
                json!({ "hard_negatives": data.manifest.hard_negatives.len(), "images": n_images, "manifest": dir.join(swinbird::data::MANIFEST) })
            );
        }
        Cmd::Eval {
            common,
            checkpoint,
            split_dir,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ck = require_checkpoint(&checkpoint)?;
            let model = load_model(&ck)?;
            let data = load_split(&split_dir.unwrap_or_else(|| cfg.data.val_dir()))?;
            let (report, dets) = evaluate(&model, &data, &cfg.eval)?;
            let ids: Vec<usize> = data.samples.iter().map(|s| s.id).collect();
            write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            write(&out.join("pr.csv"), &pr_csv(&report))?;
            write(&out.join("detections.jsonl"), &detections_jsonl(&ids, &dets))?;
            println!(
                "{}",
                json!({ "ap": report.ap, "ap50": report.ap50, "ap75": report.ap75, "ap_s": report.ap_s, "n_images": report.n_images, "n_gt": report.n_gt })
            );
        }
        Cmd::Ablate {
            common,
            epochs,
            windows,
            out,
            quiet,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = load_split(&cfg.data.train_dir())?;
            let val = load_split(&cfg.data.val_dir())?;
            let table = ablate_window(&cfg, &windows, &data, &val, &out, !quiet)?;
            write(&out.join("plots").join("ablation.svg"), &ablation_svg(&table))?;
            print!("{}", table.to_markdown());
        }
        Cmd::GradCheck { out, per_tensor } => {
            let mut results = gradcheck_suite::op_checks();
            results.extend(gradcheck_suite::module_checks());
            results.extend(gradcheck_suite::model_check(per_tensor));
            for r in &results {
                println!(
                    "{} {:<44} max_rel_err {:.3e} (tol {:.0e}, {} elements)",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tol,
                    r.checked
                );
            }
            if let Some(p) = out {
                write(&p, &serde_json::to_string_pretty(&results)?)?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Usage(format!("{failed} gradient checks failed")));
            }
        }
        Cmd::Plot { run, ablation, out } => {
            if run.is_none() && ablation.is_none() {
                return Err(Error::Usage("plot needs --run and/or --ablation".into()));
            }
            let mut written = Vec::new();
            if let Some(r) = run {
                let metrics = read_metrics(&r.join(METRICS_FILE))?;
                write(&out.join("loss.svg"), &loss_curves_svg(&metrics))?;
                write(&out.join("loss.csv"), &loss_csv(&metrics))?;
                written.extend([out.join("loss.svg"), out.join("loss.csv")]);
            }
            if let Some(a) = ablation {
                let text = std::fs::read_to_string(&a)
                    .map_err(|e| Error::Usage(format!("cannot read {}: {e}", a.display())))?;
                let table = AblationTable::from_csv(&text)?;
                write(&out.join("ablation.svg"), &ablation_svg(&table))?;
                written.push(out.join("ablation.svg"));
            }
            println!("{}", json!({ "written": written }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={}", e.kind(), json!(msg));
            ExitCode::from(if matches!(e, Error::Usage(_) | Error::Config(_)) { 2 } else { 1 })
        }
    }
}
