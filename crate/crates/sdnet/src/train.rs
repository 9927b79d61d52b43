//! Training loop with dev evaluation, plateau halving and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sdnet_core::objectives::LossBreakdown;
use sdnet_core::optim::{train_step, Adam, StepReport};
use sdnet_core::{seed, Model, TrainExample};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Sampler, Schedule};
use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::eval::{self, EvalOptions};
use crate::plot;

const INIT_TAG: u64 = 0x1417;
const BATCH_TAG: u64 = 0xBA7C;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BEST_FILE: &str = "best.bin";
pub const STEP_LOG: &str = "steps.jsonl";
pub const DEV_LOG: &str = "dev.jsonl";

/// Mutable state of one training run.
#[derive(Clone, Debug)]
pub struct Session {
    pub model: Model,
    pub params: Vec<f64>,
    pub optimizer: Adam,
    pub sampler: Sampler,
    pub schedule: Schedule,
    pub step: u64,
    batch_size: usize,
}

impl Session {
    pub fn new(cfg: &RunConfig) -> anyhow::Result<Self> {
        let model = Model::new(cfg.model.clone())?;
        let params = model.init_params(seed::derive(cfg.seed, INIT_TAG));
        let mut optimizer = Adam::new(params.len(), cfg.train.lr);
        optimizer.clip_norm = cfg.train.clip_norm;
        Ok(Self {
            model,
            params,
            optimizer,
            sampler: Sampler::new(seed::rng(cfg.seed, BATCH_TAG)),
            schedule: Schedule::default(),
            step: 0,
            batch_size: cfg.train.batch_size,
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: Checkpoint) -> anyhow::Result<Self> {
        ck.ensure_model(&cfg.model)?;
        let model = Model::new(ck.model)?;
        if ck.params.len() != model.num_params() || ck.optimizer.len() != model.num_params() {
            bail!("checkpoint holds {} parameters, model needs {}", ck.params.len(), model.num_params());
        }
        Ok(Self {
            model,
            params: ck.params,
            optimizer: ck.optimizer,
            sampler: ck.sampler,
            schedule: ck.schedule,
            step: ck.step,
            batch_size: cfg.train.batch_size,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.model.config().clone(),
            self.step,
            self.params.clone(),
            self.optimizer.clone(),
            self.sampler.clone(),
            self.schedule.clone(),
        )
    }

    /// One optimisation step on the next sampled batch. On a non-finite loss
    /// the parameters and optimiser are left as they were.
    pub fn step(&mut self, data: &[TrainExample]) -> anyhow::Result<StepReport> {
        let idx = self.sampler.next_batch(data.len(), self.batch_size);
        let batch: Vec<TrainExample> = idx.iter().map(|&i| data[i].clone()).collect();
        let report = train_step(&self.model, &mut self.params, &mut self.optimizer, &batch)
            .with_context(|| format!("step {}", self.step + 1))?;
        self.step += 1;
        Ok(report)
    }

    /// Records a dev score; halves the learning rate after `patience`
    /// evaluations without improvement. Returns true on improvement.
    pub fn observe_dev(&mut self, score: f64, patience: u32) -> bool {
        let s = &mut self.schedule;
        if s.best_dev.map_or(true, |b| score > b) {
            s.best_dev = Some(score);
            s.bad_evals = 0;
            return true;
        }
        s.bad_evals += 1;
        if s.bad_evals >= patience.max(1) {
            s.bad_evals = 0;
            s.halvings += 1;
            self.optimizer.lr *= 0.5;
            log::info!("dev plateau: learning rate halved to {:e}", self.optimizer.lr);
        }
        false
    }
}

/// One line of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub sisnr_ss: f64,
    pub ce_spk: f64,
    pub ce_dir: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepRecord {
    fn new(step: u64, loss: &LossBreakdown, grad_norm: f64, lr: f64) -> Self {
        Self { step, total: loss.total, sisnr_ss: loss.sisnr_ss, ce_spk: loss.ce_spk, ce_dir: loss.ce_dir, grad_norm, lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub step: u64,
    pub sisnri: Option<f64>,
    pub count_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Steps,
    Targets,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub step: u64,
    pub stop: StopReason,
    pub last_dev: Option<DevRecord>,
    pub run_dir: PathBuf,
}

/// Keeps log lines up to `step`, so a resumed run continues a clean file.
fn truncate_log<T: Serialize + for<'de> Deserialize<'de>>(path: &Path, step: u64, step_of: fn(&T) -> u64) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut keep = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let rec: T = serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
        if step_of(&rec) <= step {
            keep.push(line);
        }
    }
    let mut text = keep.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn append(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Loss and dev curves as SVG files in `run_dir`.
pub fn plot_curves(run_dir: &Path) -> anyhow::Result<()> {
    let steps: Vec<StepRecord> = read_log(&run_dir.join(STEP_LOG))?;
    let pts = |f: fn(&StepRecord) -> f64| steps.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    plot::lines(
        &run_dir.join("loss.svg"),
        "Training loss",
        "step",
        "value",
        &[("total", pts(|r| r.total)), ("-SI-SNR", pts(|r| -r.sisnr_ss)), ("CE speaker", pts(|r| r.ce_spk)), ("CE direction", pts(|r| r.ce_dir))],
    )?;
    let dev: Vec<DevRecord> = read_log(&run_dir.join(DEV_LOG))?;
    plot::lines(
        &run_dir.join("dev.svg"),
        "Dev evaluation",
        "step",
        "value",
        &[
            ("SI-SNRi (dB)", dev.iter().filter_map(|r| Some((r.step as f64, r.sisnri?))).collect()),
            ("count accuracy x10", dev.iter().map(|r| (r.step as f64, 10.0 * r.count_accuracy)).collect()),
        ],
    )?;
    Ok(())
}

/// Trains from scratch, or from `resume`, writing logs and checkpoints into
/// the configured run directory.
pub fn run(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let root = cfg.data.resolved_dir();
    let train: Vec<TrainExample> = dataset::load_split(&root, Split::Train)?.into_iter().map(|l| l.example).collect();
    if train.is_empty() {
        bail!("training manifest {} is empty", dataset::manifest_path(&root, Split::Train).display());
    }
    let dev = if cfg.train.eval_every > 0 { dataset::load_split(&root, Split::Dev)? } else { Vec::new() };
    let dev = match cfg.train.eval_examples {
        0 => &dev[..],
        n => &dev[..n.min(dev.len())],
    };

    let run_dir = cfg.train.run_dir.clone();
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    let step_log = run_dir.join(STEP_LOG);
    let dev_log = run_dir.join(DEV_LOG);

    let mut session = match resume {
        Some(path) => {
            let s = Session::from_checkpoint(cfg, Checkpoint::load(path)?)?;
            log::info!("resuming from {} at step {}", path.display(), s.step);
            s
        }
        None => {
            for p in [&step_log, &dev_log] {
                if p.exists() {
                    std::fs::remove_file(p)?;
                }
            }
            Session::new(cfg)?
        }
    };
    truncate_log::<StepRecord>(&step_log, session.step, |r| r.step)?;
    truncate_log::<DevRecord>(&dev_log, session.step, |r| r.step)?;
    log::info!("{} parameters, {} training mixtures", session.model.num_params(), train.len());

    let opts = EvalOptions { beam_width: cfg.eval.beam_width, sdr_filter_len: None, oracle: false };
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let mut stop = StopReason::Steps;
    let mut last_dev = None;
    while session.step < cfg.train.steps {
        let report = match session.step(&train) {
            Ok(r) => r,
            Err(e) => {
                log::error!("{e:#}; last good checkpoint kept at {}", ck_path.display());
                plot_curves(&run_dir)?;
                return Err(e.context("training aborted"));
            }
        };
        let step = session.step;
        append(&step_log, &StepRecord::new(step, &report.loss, report.grad_norm, session.optimizer.lr))?;
        if step % 50 == 0 {
            log::info!("step {step} loss {:.4} sisnr {:.2} ce {:.3}/{:.3}", report.loss.total, report.loss.sisnr_ss, report.loss.ce_spk, report.loss.ce_dir);
        }

        if cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 && !dev.is_empty() {
            let records = eval::evaluate(&session.model, &session.params, dev.iter().map(|l| (l.entry.id.as_str(), &l.example)), &opts)?;
            let s = eval::summarize(&records);
            let rec = DevRecord { step, sisnri: s.sisnri, count_accuracy: s.count_accuracy, lr: session.optimizer.lr };
            log::info!("dev step {step}: sisnri {:?} count accuracy {:.3}", s.sisnri, s.count_accuracy);
            append(&dev_log, &rec)?;
            if session.observe_dev(s.sisnri.unwrap_or(f64::NEG_INFINITY), cfg.train.patience) {
                session.checkpoint().save(&run_dir.join(BEST_FILE))?;
            }
            let hit_si = cfg.train.target_sisnri.map(|t| s.sisnri.is_some_and(|v| v >= t));
            let hit_count = cfg.train.target_count_accuracy.map(|t| s.count_accuracy >= t);
            let targets_met = match (hit_si, hit_count) {
                (None, None) => false,
                (a, b) => a.unwrap_or(true) && b.unwrap_or(true),
            };
            last_dev = Some(rec);
            if targets_met {
                stop = StopReason::Targets;
            } else if cfg.train.max_halvings > 0 && session.schedule.halvings >= cfg.train.max_halvings {
                stop = StopReason::Plateau;
            }
        }

        let periodic = cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0;
        if periodic || stop != StopReason::Steps || step == cfg.train.steps {
            session.checkpoint().save(&ck_path)?;
        }
        if stop != StopReason::Steps {
            break;
        }
    }
    plot_curves(&run_dir)?;
    Ok(TrainOutcome { step: session.step, stop, last_dev, run_dir })
}
