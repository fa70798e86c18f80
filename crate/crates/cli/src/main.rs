//! `faenet`: gradient checks, dataset synthesis, training, evaluation,
//! ablation and single-image detection from one declarative config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faenet::config::RunConfig;
use faenet::data::{load_image, write_dataset};
use faenet::detector::build_detector;
use faenet::eval::{decode_detections, PredictionSet};
use faenet::gradsuite::{run_suite, SuiteOptions};
use faenet::train::{evaluate_model, run_ablation, train, Checkpoint, MetricRecord, TrainOptions};
use faenet::Error;

#[derive(Parser)]
#[command(name = "faenet", version, about = "Single-shot detector with feature aggregation and enhancement blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every op, block, the loss and the mini detector.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Relative-error bound for every check; overrides the config.
        #[arg(long, value_name = "TOL")]
        tolerance: Option<f64>,
        /// Corrupt the analytic gradient of the named check.
        #[arg(long, value_name = "CHECK")]
        inject_fault: Option<String>,
    },
    /// Generate the synthetic dataset into <out>/dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train, writing metrics.jsonl, checkpoint.bin and the final report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Poison the loss at this global iteration.
        #[arg(long, value_name = "ITERATION")]
        inject_fault: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out split, or a precomputed prediction set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint to evaluate
        #[arg(long, value_name = "PATH", conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON prediction set with ground truth per image.
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
    },
    /// Train the four ablation variants and write the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Override the schedule length (milestones scale proportionally).
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Print the detections for one image as JSON lines.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint to run
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// PGM/PPM image of the detector's input size.
        image: PathBuf,
    },
}

/// Process outcome: 1 for a failed check, 2 for configuration or input
/// errors, 3 for runtime failures.
enum Failure {
    Check(String),
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Manifest { .. }
            | Error::FingerprintMismatch { .. }
            | Error::UnknownClass(_)
            | Error::InvalidBox(_)
            | Error::Checkpoint(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(_) => Err(Failure::Config(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn echo_config(cfg: &RunConfig) -> Outcome {
    write_file(&cfg.out_dir.join("config.toml"), &cfg.to_toml())
}

fn cmd_gradcheck(common: &Common, tolerance: Option<f64>, fault: Option<String>) -> Outcome {
    let cfg = load_config(common)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    echo_config(&cfg)?;
    let g = &cfg.gradcheck;
    let opts = SuiteOptions {
        tolerance: tolerance.unwrap_or(g.tolerance),
        end_to_end_tolerance: tolerance.unwrap_or(g.end_to_end_tolerance),
        max_elements: g.max_elements,
        seed: cfg.seed,
        corrupt: fault,
        ..Default::default()
    };
    let entries = run_suite(&opts, |e| {
        let status = if e.passed { "ok  " } else { "FAIL" };
        eprintln!(
            "{status} {:<24} {:<10} max rel err {:.3e} (tol {:.0e}, worst input {})",
            e.name, e.group, e.max_rel_error, e.tolerance, e.worst_input
        );
    })?;
    let json = serde_json::to_string_pretty(&entries).expect("entries serialize");
    write_file(&cfg.out_dir.join("gradcheck.json"), &json)?;
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        println!("gradcheck: all {} checks passed", entries.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradcheck failed: {}", failed.join(", "))))
    }
}

fn cmd_synth(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    if cfg.data.manifest.is_some() {
        return Err(Failure::Config("synth: the config names a manifest; nothing to generate".into()));
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    echo_config(&cfg)?;
    let samples = faenet::data::generate(&cfg.synth)?;
    let path = write_dataset(&cfg.out_dir.join("dataset"), &cfg.synth.class_names(), &samples)?;
    println!("wrote {} images, manifest {}", samples.len(), path.display());
    Ok(())
}

fn progress_printer() -> impl FnMut(&MetricRecord) {
    let (mut sum, mut n) = (0.0, 0usize);
    move |r| match r {
        MetricRecord::Iteration { loss, .. } => {
            sum += loss;
            n += 1;
        }
        MetricRecord::Epoch { epoch, map, .. } => {
            eprintln!("epoch {epoch:>3}  mean loss {:.4}  eval mAP {map:.4}", sum / n.max(1) as f64);
            (sum, n) = (0.0, 0);
        }
    }
}

fn cmd_train(common: &Common, resume: Option<&Path>, fault: Option<usize>) -> Outcome {
    let cfg = load_config(common)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    echo_config(&cfg)?;
    let (_, train_set, eval_set) = cfg.dataset()?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let mut progress = progress_printer();
    let opts = TrainOptions {
        out_dir: Some(cfg.out_dir.clone()),
        resume,
        decode: cfg.eval,
        fault_at_iteration: fault,
        progress: Some(&mut progress),
    };
    let outcome = train(&cfg.detector, &cfg.train, &train_set, &eval_set, opts)?;
    outcome.report.write(&cfg.out_dir)?;
    println!("trained {} epochs; eval mAP {:.4}", outcome.epochs_completed, outcome.report.map);
    Ok(())
}

fn restore(cfg: &RunConfig, path: &Path) -> Result<(faenet::detector::Detector, faenet::nn::ParamStore), Failure> {
    let det_cfg = cfg.train.apply_toggles(&cfg.detector);
    let (det, mut store) = build_detector(&det_cfg, cfg.seed)?;
    Checkpoint::load(path)?.restore(&det_cfg, &mut store, None)?;
    Ok((det, store))
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>, predictions: Option<&Path>) -> Outcome {
    let cfg = load_config(common)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    echo_config(&cfg)?;
    let report = match (checkpoint, predictions) {
        (_, Some(p)) => PredictionSet::load(p)?.evaluate()?,
        (Some(c), None) => {
            let (det, store) = restore(&cfg, c)?;
            let (_, _, eval_set) = cfg.dataset()?;
            evaluate_model(&det, &store, &eval_set, &cfg.eval)?
        }
        (None, None) => return Err(Failure::Config("eval needs --checkpoint or --predictions".into())),
    };
    report.write(&cfg.out_dir)?;
    println!("mAP {:.4}  AP {:.4}  AP50 {:.4}  AP75 {:.4}", report.map, report.ap, report.ap50, report.ap75);
    Ok(())
}

fn cmd_ablate(common: &Common, epochs: Option<usize>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        let t = &mut cfg.train;
        let scale = |m: usize| m * e / t.total_epochs;
        t.milestone_epochs = t.milestone_epochs.iter().map(|&m| scale(m)).filter(|&m| m > 0 && m < e).collect();
        t.milestone_epochs.dedup();
        t.warmup_epochs = scale(t.warmup_epochs).min(t.milestone_epochs.first().map_or(e, |&m| m - 1));
        t.total_epochs = e;
        cfg.validate()?;
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    echo_config(&cfg)?;
    let (_, train_set, eval_set) = cfg.dataset()?;
    let table = run_ablation(&cfg.detector, &cfg.train, &train_set, &eval_set, &cfg.eval, Some(&cfg.out_dir))?;
    write_file(&cfg.out_dir.join("ablation.json"), &table.to_json())?;
    write_file(&cfg.out_dir.join("ablation.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_detect(common: &Common, checkpoint: &Path, image: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let (det, store) = restore(&cfg, checkpoint)?;
    let img = load_image(image)?;
    let d = &cfg.detector;
    let want = [d.in_channels, d.input_size, d.input_size];
    if img.shape() != want {
        return Err(Failure::Config(format!("image shape {:?} does not match the detector input {want:?}", img.shape())));
    }
    let batch = img.reshape(vec![1, d.in_channels, d.input_size, d.input_size])?;
    let preds = det.predict(&store, &batch)?;
    let dets = decode_detections(&preds, det.priors(), &cfg.eval)?;
    let names = cfg.synth.class_names();
    let px = d.input_size as f64;
    let mut out = std::io::stdout().lock();
    for det in &dets[0] {
        let rec = serde_json::json!({
            "class": names.get(det.class_id - 1).map_or("?", |s| s.as_str()),
            "class_id": det.class_id,
            "score": det.score,
            "xmin": det.bbox.xmin * px,
            "ymin": det.bbox.ymin * px,
            "xmax": det.bbox.xmax * px,
            "ymax": det.bbox.ymax * px,
        });
        let _ = writeln!(out, "{}", rec);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck { common, tolerance, inject_fault } => cmd_gradcheck(common, *tolerance, inject_fault.clone()),
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, resume, inject_fault } => cmd_train(common, resume.as_deref(), *inject_fault),
        Command::Eval { common, checkpoint, predictions } => cmd_eval(common, checkpoint.as_deref(), predictions.as_deref()),
        Command::Ablate { common, epochs } => cmd_ablate(common, *epochs),
        Command::Detect { common, checkpoint, image } => cmd_detect(common, checkpoint, image),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
