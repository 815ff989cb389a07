//! Training loop, evaluation and inference over datasets and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SCALES;
use crate::border::{detect_bvp, BvpSet};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{dataset_dir, derive_seed, stream, Case, Manifest};
use crate::error::{Error, Result};
use crate::io::{read_volume, write_mask};
use crate::metrics::{border_accuracy, dice, evaluate, write_reports, MetricsReport};
use crate::model::{Model, Phase, Prediction, StepLosses};
use crate::phantom::{flip_draw, flip_with};
use crate::tensor::{AdamState, ParamStore};
use crate::volume::{binarize, Mask, Volume};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,ordinary_loss,border_loss,total,val_dice";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: u64,
    pub ordinary: f64,
    pub border: f64,
    pub total: f64,
    /// Mean Dice of the rendered output over validation cases; NaN without any.
    pub val_dice: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.ordinary, self.border, self.total, self.val_dice
        )
    }
}

/// Model, parameters and optimizer state of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Optimizer updates applied.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(
            &mut store,
            cfg.backbone.clone(),
            cfg.glcf.clone(),
            derive_seed(cfg.seed, &[stream::INIT]),
        )?;
        let adam = AdamState::zeros(&store);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.adam = ck.restore_into(&mut t.store)?;
        t.step = ck.step;
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            step: self.step,
            epoch: self.epoch,
            params: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Phase of the next epoch: joint, or coarse-then-refine halves when two-stage.
    pub fn phase(&self) -> Phase {
        if !self.cfg.glcf.two_stage {
            Phase::Joint
        } else if (self.epoch as usize) < self.cfg.optim.epochs.div_ceil(2) {
            Phase::Coarse
        } else {
            Phase::Refine
        }
    }

    /// One update on explicit cases, no augmentation.
    pub fn step_on(&mut self, cases: &[&Case], phase: Phase) -> Result<StepLosses> {
        let volumes: Vec<&Volume<f32>> = cases.iter().map(|c| &c.volume).collect();
        let masks: Vec<&Mask> = cases.iter().map(|c| &c.mask).collect();
        let out = self.model.train_step(
            &mut self.store,
            &mut self.adam,
            &self.cfg.optim.adamw(),
            &self.cfg.loss,
            self.cfg.tau,
            &volumes,
            &masks,
            phase,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// One pass over `train` in a seeded order with seeded flips, then validation.
    pub fn run_epoch(&mut self, train: &[Case], val: &[Case]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::EmptySplit("training split has no cases".into()));
        }
        let seed = self.cfg.seed;
        let e = self.epoch;
        let phase = self.phase();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::ORDER, e])));
        let (mut sum, mut batches) = ([0.0; 3], 0usize);
        for (b, chunk) in order.chunks(self.cfg.optim.batch_size).enumerate() {
            let mut cases = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let c = &train[i];
                let (volume, mask) = if self.cfg.optim.flip {
                    flip_with(&c.volume, &c.mask, flip_draw(derive_seed(seed, &[stream::FLIP, e, i as u64])))?
                } else {
                    (c.volume.clone(), c.mask.clone())
                };
                cases.push(Case {
                    id: c.id.clone(),
                    volume,
                    mask,
                    branches: Vec::new(),
                });
            }
            let refs: Vec<&Case> = cases.iter().collect();
            let out = match self.step_on(&refs, phase) {
                Err(Error::NonFinite { .. }) => None,
                Err(other) => return Err(other),
                Ok(out) => Some(out).filter(|o| o.total.is_finite()),
            };
            let Some(out) = out else {
                return Err(Error::NonFiniteLoss {
                    epoch: e as usize + 1,
                    batch: b,
                    cases: cases.into_iter().map(|c| c.id).collect(),
                });
            };
            sum[0] += out.ordinary;
            sum[1] += out.border;
            sum[2] += out.total;
            batches += 1;
        }
        self.epoch += 1;
        let n = batches as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            ordinary: sum[0] / n,
            border: sum[1] / n,
            total: sum[2] / n,
            val_dice: self.mean_dice(val)?,
        })
    }

    /// Mean Dice of the rendered output; NaN for no cases.
    pub fn mean_dice(&self, cases: &[Case]) -> Result<f64> {
        if cases.is_empty() {
            return Ok(f64::NAN);
        }
        let mut s = 0.0;
        for c in cases {
            s += dice(&self.predict(&c.volume)?.mask, &c.mask)?;
        }
        Ok(s / cases.len() as f64)
    }

    pub fn predict(&self, volume: &Volume<f32>) -> Result<Prediction> {
        self.model.predict(&self.store, volume, self.cfg.tau)
    }
}

/// Trains a fresh model for the configured epochs without touching disk.
pub fn fit(cfg: &RunConfig, train: &[Case], val: &[Case]) -> Result<(Trainer, Vec<EpochLog>)> {
    let mut t = Trainer::new(cfg)?;
    let mut logs = Vec::with_capacity(cfg.optim.epochs);
    while (t.epoch as usize) < cfg.optim.epochs {
        logs.push(t.run_epoch(train, val)?);
    }
    Ok((t, logs))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Accept a checkpoint written under a different config.
    pub force: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Newest `epoch_NNN.ckpt` in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let Ok(rd) = std::fs::read_dir(run_dir) else {
        return Ok(None);
    };
    let mut best = None;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let epoch = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, entry.path()));
            }
        }
    }
    Ok(best)
}

fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.paths.run_dir.as_os_str().is_empty() {
        return Err(Error::Config("paths.run_dir is not set".into()));
    }
    Ok(cfg.paths.run_dir.clone())
}

/// Trains on the dataset's train split, writing a checkpoint and a log row per epoch.
pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = dataset_dir(cfg)?;
    let manifest = Manifest::load(&data)?;
    let train_cases = manifest.load_cases(&data, &manifest.split.train)?;
    if train_cases.is_empty() {
        return Err(Error::EmptySplit(format!("{}: training split has no cases", data.display())));
    }
    let val_cases = manifest.load_cases(&data, &manifest.split.val)?;
    let dir = run_dir(cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;

    let log_path = dir.join(LOG_FILE);
    let mut log_text = format!("{LOG_HEADER}\n");
    let mut trainer = match latest_checkpoint(&dir)?.filter(|_| opts.resume) {
        Some((_, path)) => {
            let ck = Checkpoint::load(&path, &cfg.hash(), opts.force)?;
            let old = std::fs::read_to_string(&log_path).unwrap_or_default();
            for line in old.lines().skip(1) {
                let done = line.split(',').next().and_then(|e| e.parse::<u64>().ok());
                if done.is_some_and(|e| e <= ck.epoch) {
                    log_text.push_str(line);
                    log_text.push('\n');
                }
            }
            if opts.verbose {
                eprintln!("resuming {} at epoch {}", path.display(), ck.epoch);
            }
            Trainer::from_checkpoint(cfg, &ck)?
        }
        None => Trainer::new(cfg)?,
    };
    std::fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;

    let mut summary = TrainSummary {
        run_dir: dir.clone(),
        logs: Vec::new(),
        checkpoints: Vec::new(),
    };
    while (trainer.epoch as usize) < cfg.optim.epochs {
        let log = trainer.run_epoch(&train_cases, &val_cases)?;
        let path = checkpoint_path(&dir, log.epoch);
        trainer.checkpoint().save(&path)?;
        log_text.push_str(&log.csv_row());
        log_text.push('\n');
        std::fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  ordinary {:.4}  border {:.4}  val dice {:.4}",
                log.epoch, log.ordinary, log.border, log.val_dice
            );
        }
        summary.logs.push(log);
        summary.checkpoints.push(path);
    }
    Ok(summary)
}

/// Rebuilds the model and loads a checkpoint into it.
pub fn load_trainer(cfg: &RunConfig, checkpoint: &Path, force: bool) -> Result<Trainer> {
    let ck = Checkpoint::load(checkpoint, &cfg.hash(), force)?;
    Trainer::from_checkpoint(cfg, &ck)
}

/// Per-case outcome with and without border rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEval {
    pub coarse: MetricsReport,
    pub rendered: MetricsReport,
    /// Accuracy at the border points of the coarse mask.
    pub border_accuracy_coarse: Option<f64>,
    pub border_accuracy_rendered: Option<f64>,
}

pub fn evaluate_case(trainer: &Trainer, case: &Case) -> Result<CaseEval> {
    let p = trainer.predict(&case.volume)?;
    Ok(CaseEval {
        coarse: evaluate(&case.id, &p.coarse_mask, &case.mask, &case.branches)?,
        rendered: evaluate(&case.id, &p.mask, &case.mask, &case.branches)?,
        border_accuracy_coarse: border_accuracy(&p.coarse_mask, &case.mask, &p.bvp.points)?,
        border_accuracy_rendered: border_accuracy(&p.mask, &case.mask, &p.bvp.points)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub iou: f64,
    pub precision: f64,
    pub dlr: f64,
    pub dbr: f64,
    pub amr: f64,
    pub dice: f64,
}

impl MeanMetrics {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MeanMetrics {
            iou: mean(|r| r.iou),
            precision: mean(|r| r.precision),
            dlr: mean(|r| r.dlr),
            dbr: mean(|r| r.dbr),
            amr: mean(|r| r.amr),
            dice: mean(|r| r.dice),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub cases: usize,
    pub coarse: MeanMetrics,
    pub rendered: MeanMetrics,
    /// Means over cases with at least one border point.
    pub border_accuracy_coarse: f64,
    pub border_accuracy_rendered: f64,
    pub border_accuracy_delta: f64,
}

pub fn summarize(split: &str, evals: &[CaseEval]) -> EvalSummary {
    let coarse: Vec<MetricsReport> = evals.iter().map(|e| e.coarse.clone()).collect();
    let rendered: Vec<MetricsReport> = evals.iter().map(|e| e.rendered.clone()).collect();
    let pairs: Vec<(f64, f64)> = evals
        .iter()
        .filter_map(|e| Some((e.border_accuracy_coarse?, e.border_accuracy_rendered?)))
        .collect();
    let n = pairs.len().max(1) as f64;
    let bc = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let br = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    EvalSummary {
        split: split.to_string(),
        cases: evals.len(),
        coarse: MeanMetrics::of(&coarse),
        rendered: MeanMetrics::of(&rendered),
        border_accuracy_coarse: bc,
        border_accuracy_rendered: br,
        border_accuracy_delta: br - bc,
    }
}

/// Evaluates a checkpoint on a split; writes `coarse.{csv,json}`,
/// `rendered.{csv,json}` and `summary.json` under `out`.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    out: &Path,
    force: bool,
) -> Result<EvalSummary> {
    let trainer = load_trainer(cfg, checkpoint, force)?;
    let data = dataset_dir(cfg)?;
    let manifest = Manifest::load(&data)?;
    let cases = manifest.load_cases(&data, &manifest.ids(split)?)?;
    let evals = cases
        .iter()
        .map(|c| evaluate_case(&trainer, c))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let coarse: Vec<MetricsReport> = evals.iter().map(|e| e.coarse.clone()).collect();
    let rendered: Vec<MetricsReport> = evals.iter().map(|e| e.rendered.clone()).collect();
    write_reports(out, "coarse", &coarse)?;
    write_reports(out, "rendered", &rendered)?;
    let summary = summarize(split, &evals);
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Runs the full pipeline on one volume file and writes the final mask.
pub fn infer_file(cfg: &RunConfig, checkpoint: &Path, volume: &Path, out: &Path, force: bool) -> Result<Prediction> {
    let trainer = load_trainer(cfg, checkpoint, force)?;
    let v = read_volume(volume)?;
    if v.dims().iter().any(|d| d % 8 != 0) {
        return Err(Error::shape(
            "infer",
            format!("{}: dims {:?} not divisible by 8", volume.display(), v.dims()),
        ));
    }
    let p = trainer.predict(&v)?;
    write_mask(out, &p.mask)?;
    Ok(p)
}

/// Border points of a binary mask and of its max-pooled copies, one set per scale.
pub fn mask_pyramid_bvp(mask: &Mask) -> Result<Vec<BvpSet>> {
    let mut out = Vec::with_capacity(SCALES);
    let mut m = mask.clone();
    for l in 0..SCALES {
        out.push(detect_bvp(&m, l)?);
        if l + 1 < SCALES {
            m = m.max_pool2()?;
        }
    }
    Ok(out)
}

/// Border points of the binarized coarse output at every scale.
pub fn prediction_bvp(p: &Prediction, tau: f32) -> Result<Vec<BvpSet>> {
    p.scale_probs
        .iter()
        .enumerate()
        .map(|(l, probs)| detect_bvp(&binarize(probs.data(), probs.dims(), tau)?, l))
        .collect()
}

/// One `layer x y z` line per border point.
pub fn format_bvp(sets: &[BvpSet]) -> String {
    let mut out = String::new();
    for s in sets {
        for p in &s.points {
            let _ = writeln!(out, "{} {} {} {}", s.layer, p[0], p[1], p[2]);
        }
    }
    out
}
