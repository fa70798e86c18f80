use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{lr_at, Checkpoint, Sgd, TrainConfig};
use crate::data::{augment, stack_images, Sample};
use crate::detector::{build_detector, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::{decode_detections, evaluate, DecodeOptions, EvalReport};
use crate::match_loss::{match_priors, multibox_loss, LossBreakdown, Variances, IOU_THRESHOLD};
use crate::nn::{apply_bn_updates, Forward, Mode, ParamStore};
use crate::rng::{derive_seed, substream};
use crate::tensor::Graph;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const EVAL_BATCH: usize = 16;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Iteration {
        epoch: usize,
        iteration: usize,
        lr: f64,
        loss: f64,
        loc: f64,
        conf: f64,
        num_positives: usize,
    },
    Epoch {
        epoch: usize,
        map: f64,
        map_eleven_point: f64,
        ap: f64,
    },
}

/// Run-time options that do not affect the numbers produced.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `metrics.jsonl` and `checkpoint.bin`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state; its epoch count is the first epoch run.
    pub resume: Option<Checkpoint>,
    pub decode: DecodeOptions,
    /// Test hook: poison the loss at this global iteration.
    pub fault_at_iteration: Option<usize>,
    pub progress: Option<&'a mut dyn FnMut(&MetricRecord)>,
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub records: Vec<MetricRecord>,
    /// Held-out evaluation after the last epoch.
    pub report: EvalReport,
    pub epochs_completed: usize,
}

/// Trains `detector_config` (with the training toggles applied) on
/// `train_set`, evaluating on `eval_set` between epochs. The result is a
/// pure function of the configurations and the data.
pub fn train(
    detector_config: &DetectorConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("train: empty training set".into()));
    }
    let det_cfg = cfg.apply_toggles(detector_config);
    let (detector, mut store) = build_detector(&det_cfg, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut start = 0;
    if let Some(ck) = &opts.resume {
        ck.restore(&det_cfg, &mut store, Some(&mut sgd))?;
        start = ck.epoch;
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = OpenOptions::new()
                .create(true)
                .append(start > 0)
                .write(true)
                .truncate(start == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if start == 0 {
                Checkpoint::capture(&det_cfg, 0, &store, Some(&sgd)).save(&dir.join(CHECKPOINT_FILE))?;
            }
            Some((file, path))
        }
        None => None,
    };

    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut records = Vec::new();
    let mut emit = |rec: MetricRecord, log: &mut Option<(File, PathBuf)>| -> Result<()> {
        if let Some((file, path)) = log {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(p) = opts.progress.as_mut() {
            p(&rec);
        }
        records.push(rec);
        Ok(())
    };

    let mut report = None;
    for epoch in start..cfg.total_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "order", &[epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let iteration = epoch * per_epoch + b;
            let lr = lr_at(epoch as f64 + b as f64 / per_epoch as f64, cfg);
            let batch = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let seed = derive_seed(cfg.seed, "augment", &[epoch as u64, i as u64]);
                        augment(&train_set[i], seed, &cfg.augment_options)
                    } else {
                        Ok(train_set[i].clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let poison = opts.fault_at_iteration == Some(iteration);
            let loss = train_step(&detector, &mut store, &mut sgd, &batch, lr, cfg.neg_pos_ratio, poison)
                .map_err(|e| match e {
                    Error::NonFinite { name } => {
                        Error::Diverged { epoch, iteration, reason: format!("non-finite {name}") }
                    }
                    other => other,
                })?;
            emit(
                MetricRecord::Iteration {
                    epoch,
                    iteration,
                    lr,
                    loss: loss.total(),
                    loc: loss.loc,
                    conf: loss.conf,
                    num_positives: loss.num_positives,
                },
                &mut log,
            )?;
        }
        let last = epoch + 1 == cfg.total_epochs;
        if last || (epoch + 1) % cfg.eval_every == 0 {
            let r = evaluate_model(&detector, &store, eval_set, &opts.decode)?;
            emit(MetricRecord::Epoch { epoch, map: r.map, map_eleven_point: r.map_eleven_point, ap: r.ap }, &mut log)?;
            report = Some(r);
        }
        if let Some(dir) = &opts.out_dir {
            Checkpoint::capture(&det_cfg, epoch + 1, &store, Some(&sgd)).save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    let report = match report {
        Some(r) => r,
        None => evaluate_model(&detector, &store, eval_set, &opts.decode)?,
    };
    Ok(TrainOutcome { detector, store, records, report, epochs_completed: cfg.total_epochs })
}

/// One SGD iteration on `batch`; returns the loss before the update.
/// A non-finite loss or gradient is reported as [`Error::NonFinite`] and
/// leaves the parameters untouched.
pub fn train_step(
    detector: &Detector,
    store: &mut ParamStore,
    sgd: &mut Sgd,
    batch: &[Sample],
    lr: f64,
    neg_pos_ratio: usize,
    poison: bool,
) -> Result<LossBreakdown> {
    let images = stack_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let priors = detector.priors();
    let matches = par_map!(0..batch.len(), |i| {
        match_priors(priors, &batch[i].annotations, IOU_THRESHOLD, Variances::default())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, store, Mode::Train);
    let x = f.graph.constant(images);
    let out = detector.forward(&mut f, x)?;
    let updates = f.take_bn_updates();
    let params = f.bound_params();
    drop(f);
    let loss = multibox_loss(&mut g, &out, &matches, neg_pos_ratio)?;
    let total = loss.breakdown.total();
    if poison || !total.is_finite() {
        return Err(Error::NonFinite { name: "loss".into() });
    }
    let grads = g.backward(loss.loss)?;
    let grads: Vec<_> = params
        .into_iter()
        .filter(|(id, _)| store.kind(*id) == crate::nn::ParamKind::Trainable)
        .map(|(id, v)| (id, grads.get_or_zeros(v)))
        .collect();
    sgd.step(store, &grads, lr)?;
    apply_bn_updates(store, &updates);
    Ok(loss.breakdown)
}

/// Inference-mode evaluation at the images' own pixel scale.
pub fn evaluate_model(detector: &Detector, store: &ParamStore, samples: &[Sample], decode: &DecodeOptions) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let p = detector.predict(store, &images)?;
        preds.extend(decode_detections(&p, detector.priors(), decode)?);
    }
    let gts: Vec<_> = samples.iter().map(|s| s.annotations.clone()).collect();
    let size = samples.first().map_or(detector.config().input_size, |s| s.width()) as f64;
    evaluate(&preds, &gts, detector.config().num_classes, size)
}

/// Repeats training steps on one fixed batch at the base learning rate;
/// returns the loss of every iteration.
pub fn overfit(detector_config: &DetectorConfig, cfg: &TrainConfig, batch: &[Sample], iterations: usize) -> Result<Vec<f64>> {
    let det_cfg = cfg.apply_toggles(detector_config);
    let (detector, mut store) = build_detector(&det_cfg, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    (0..iterations)
        .map(|_| train_step(&detector, &mut store, &mut sgd, batch, cfg.base_lr, cfg.neg_pos_ratio, false).map(|l| l.total()))
        .collect()
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })
        })
        .collect()
}
