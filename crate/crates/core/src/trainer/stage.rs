use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::network::{load_checkpoint, save_checkpoint, train_forward, Checkpoint, ModelWeights, Progress};
use crate::optim::AdamState;
use crate::tensor::{Real, Tensor};

use super::config::{TrainConfig, TrainLogEntry};
use super::data::{Prepared, SliceSet};
use super::eval::validation_dice;

/// One early-stopped training run over a fixed slice pool.
pub struct Stage<'a> {
    /// Log tag and checkpoint file stem.
    pub name: String,
    /// Random stream of shuffling and augmentation; runs that share it see
    /// the same data in the same order.
    pub stream: Vec<u64>,
    pub train: &'a SliceSet,
    pub val: &'a [Prepared],
    pub batch: usize,
    pub max_epochs: u64,
    pub patience: u64,
    pub augment: bool,
}

/// Result of a stage: the best-validation weights, never simply the last.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub best: ModelWeights<T>,
    pub best_score: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_run: u64,
    pub log: Vec<TrainLogEntry>,
}

/// Files of a stage under an output directory.
pub struct StageFiles {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log: PathBuf,
}

impl StageFiles {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            best: dir.join(format!("{name}.best.sgad")),
            last: dir.join(format!("{name}.last.sgad")),
            log: dir.join(format!("{name}.log.jsonl")),
        }
    }
}

/// One ADAM step on a batch; returns the loss before the update.
pub fn train_step<T: Real>(
    weights: &mut ModelWeights<T>,
    opt: &mut AdamState<T>,
    x: &Tensor<T>,
    target: Tensor<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tf = train_forward(weights, x)?;
    let loss = tf
        .graph
        .soft_dice_loss(tf.probs, target, cfg.loss, T::lit(cfg.loss_eps))?;
    let value = tf.graph.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    let mut grads = tf.graph.backward(loss)?;
    let mut gs = Vec::with_capacity(tf.vars.len());
    for (name, v) in &tf.vars {
        gs.push(
            grads
                .take(*v)
                .ok_or_else(|| Error::Graph(format!("no gradient reached `{name}`")))?,
        );
    }
    opt.step(weights.params.iter_mut().zip(&gs).map(|((k, p), g)| (k.as_str(), p, g)))?;
    for (k, st) in tf.running {
        weights.running.insert(k, st);
    }
    Ok(value)
}

fn append_log(path: &Path, entry: &TrainLogEntry) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(entry)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Log lines of epochs before `next_epoch`; anything later belongs to an
/// interrupted epoch and is dropped.
fn read_log(path: &Path, next_epoch: u64) -> Result<Vec<TrainLogEntry>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: TrainLogEntry = serde_json::from_str(line)?;
        if entry.epoch < next_epoch {
            out.push(entry);
        }
    }
    Ok(out)
}

fn rewrite_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Stage<'_> {
    /// Train from `init`. With `files`, the best weights, a resumable
    /// last-epoch checkpoint and a JSON-lines log are written; with
    /// `resume` as well, an existing last-epoch checkpoint is continued and
    /// the result is bitwise that of an uninterrupted run.
    pub fn run<T: Real>(
        &self,
        init: ModelWeights<T>,
        cfg: &TrainConfig,
        files: Option<&StageFiles>,
        resume: bool,
    ) -> Result<StageOutcome<T>> {
        cfg.validate()?;
        if self.train.is_empty() {
            return Err(Error::Dataset(format!("stage {} has no training slices", self.name)));
        }
        if self.val.is_empty() {
            return Err(Error::Dataset(format!(
                "stage {} has no validation subjects",
                self.name
            )));
        }
        let provenance = init.provenance;
        let mut weights = init.clone();
        let mut best = init;
        let mut opt = AdamState::new(cfg.adam())?;
        let mut progress = Progress {
            stage: self.name.clone(),
            next_epoch: 1,
            best_score: None,
            best_epoch: None,
            epochs_without_improvement: 0,
        };
        let mut log = Vec::new();

        if let (Some(f), true) = (files, resume) {
            if f.last.exists() {
                let ck: Checkpoint<T> = load_checkpoint(&f.last)?;
                let p = ck
                    .progress
                    .ok_or_else(|| Error::format("checkpoint", "resume checkpoint has no progress record"))?;
                if p.stage != self.name {
                    return Err(Error::format(
                        "checkpoint",
                        format!("resume checkpoint belongs to stage `{}`, not `{}`", p.stage, self.name),
                    ));
                }
                weights = ck.weights;
                opt = ck
                    .optimizer
                    .ok_or_else(|| Error::format("checkpoint", "resume checkpoint has no optimizer state"))?;
                if p.best_epoch.is_some() {
                    best = load_checkpoint::<T>(&f.best)?.weights;
                }
                log = read_log(&f.log, p.next_epoch)?;
                rewrite_log(&f.log, &log)?;
                progress = p;
            }
        } else if let Some(f) = files {
            for p in [&f.best, &f.last, &f.log] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
        }

        let aug = cfg.augmentation;
        while progress.next_epoch <= self.max_epochs && progress.epochs_without_improvement < self.patience {
            let epoch = progress.next_epoch;
            let started = Instant::now();
            let order = self.train.epoch_order(cfg.seed, &self.stream, epoch);
            let (mut loss_sum, mut seen) = (0.0, 0usize);
            for chunk in order.chunks(self.batch) {
                let augment = self.augment.then_some((&aug, cfg.seed, self.stream.as_slice(), epoch));
                let (x, y) = self.train.batch::<T>(chunk, augment)?;
                loss_sum += train_step(&mut weights, &mut opt, &x, y, cfg)? * chunk.len() as f64;
                seen += chunk.len();
            }
            let score = validation_dice(&weights, self.val, cfg.eval_batch)?;
            let improved = progress.best_score.is_none_or(|b| score > b);
            let mut checkpoint = None;
            if improved {
                best = weights.clone();
                progress.best_score = Some(score);
                progress.best_epoch = Some(epoch);
                progress.epochs_without_improvement = 0;
                if let Some(f) = files {
                    save_checkpoint(&f.best, &Checkpoint::weights_only(best.clone()))?;
                    checkpoint = Some(f.best.display().to_string());
                }
            } else {
                progress.epochs_without_improvement += 1;
            }
            progress.next_epoch = epoch + 1;
            let entry = TrainLogEntry {
                stage: self.name.clone(),
                epoch,
                train_loss: loss_sum / seen as f64,
                val_dice: score,
                seconds: started.elapsed().as_secs_f64(),
                checkpoint,
            };
            log::info!(
                "{} epoch {epoch}: loss {:.4}, val dice {score:.4}{}",
                self.name,
                entry.train_loss,
                if improved { " (best)" } else { "" }
            );
            if let Some(f) = files {
                append_log(&f.log, &entry)?;
                let ck = Checkpoint {
                    weights: weights.clone(),
                    optimizer: Some(opt.clone()),
                    progress: Some(progress.clone()),
                };
                save_checkpoint(&f.last, &ck)?;
            }
            log.push(entry);
        }
        best.provenance = provenance;
        Ok(StageOutcome {
            best,
            best_score: progress.best_score,
            best_epoch: progress.best_epoch,
            epochs_run: progress.next_epoch - 1,
            log,
        })
    }
}
