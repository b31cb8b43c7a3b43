use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{build_model, ModelConfig, ModelWeights, Provenance};
use crate::phantom::{Dataset, Split, SubjectSample};
use crate::seed;
use crate::tensor::Real;

use super::config::{TrainConfig, TrainLogEntry};
use super::data::{prepare_all, SliceSet};
use super::stage::{Stage, StageFiles, StageOutcome};

/// Random stream of source training; target stages use
/// `[STREAM_TARGET, fold]`.
pub const STREAM_SOURCE: u64 = 21;
pub const STREAM_TARGET: u64 = 22;
const INIT_SOURCE: u64 = 31;
const INIT_SCRATCH: u64 = 32;

fn check_model(model: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    model.validate()?;
    if model.input_size != cfg.preprocess.target_size {
        return Err(Error::config(format!(
            "model input size {} differs from the preprocessing target size {}",
            model.input_size, cfg.preprocess.target_size
        )));
    }
    Ok(())
}

fn stage_files(out: Option<&Path>, name: &str) -> Result<Option<StageFiles>> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Ok(Some(StageFiles::new(dir, name)))
        }
        None => Ok(None),
    }
}

/// Random initialization used by source training.
pub fn source_init<T: Real>(model: &ModelConfig, cfg: &TrainConfig) -> Result<ModelWeights<T>> {
    build_model(model, seed::derive(cfg.seed, &[INIT_SOURCE]))
}

/// Random initialization used by the scratch baseline.
pub fn scratch_init<T: Real>(model: &ModelConfig, cfg: &TrainConfig) -> Result<ModelWeights<T>> {
    build_model(model, seed::derive(cfg.seed, &[INIT_SCRATCH]))
}

/// Source slice pool: both source sequences of the training subjects.
pub fn source_slices(ds: &Dataset, cfg: &TrainConfig) -> Result<SliceSet> {
    SliceSet::from_subjects(&ds.load_split(Split::SourceTrain)?, &cfg.preprocess)
}

/// Stage one: train on pooled source slices, early-stopped on the mean
/// foreground Dice of the source validation volumes.
pub fn train_source<T: Real>(
    ds: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<StageOutcome<T>> {
    check_model(model, cfg)?;
    let train = source_slices(ds, cfg)?;
    let val = prepare_all(&ds.load_split(Split::SourceVal)?, &cfg.preprocess)?;
    let stage = Stage {
        name: "source".into(),
        stream: vec![STREAM_SOURCE],
        train: &train,
        val: &val,
        batch: cfg.batch_source,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        augment: cfg.augment_source,
    };
    let mut init = source_init(model, cfg)?;
    init.provenance = Provenance::SourceTrained;
    stage.run(init, cfg, stage_files(out, "source")?.as_ref(), resume)
}

/// Training and held-out subject indices of each fold: subject `j` is held
/// out in fold `j % folds`.
pub fn fold_split(subjects: usize, folds: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::config(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if subjects < folds {
        return Err(Error::Dataset(format!(
            "{subjects} fine-tuning subjects cannot fill {folds} folds"
        )));
    }
    Ok((0..folds)
        .map(|k| (0..subjects).partition(|j| j % folds != k))
        .collect())
}

/// Fold with the highest validation Dice; ties go to the lowest index and
/// folds without a score rank last.
pub fn select_fold(scores: &[Option<f64>]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        let better = match (s, scores[best]) {
            (Some(a), Some(b)) => *a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FoldResult<T> {
    pub fold: usize,
    pub held_out: Vec<String>,
    pub outcome: StageOutcome<T>,
}

/// Cross-validated target training.
#[derive(Debug, Clone)]
pub struct TargetOutcome<T> {
    pub folds: Vec<FoldResult<T>>,
    /// Index of the deployable fold.
    pub selected: usize,
}

impl<T: Real> TargetOutcome<T> {
    pub fn deployable(&self) -> &ModelWeights<T> {
        &self.folds[self.selected].outcome.best
    }

    pub fn log(&self) -> Vec<TrainLogEntry> {
        self.folds.iter().flat_map(|f| f.outcome.log.iter().cloned()).collect()
    }
}

/// Target-stage options beyond the shared config.
#[derive(Debug, Clone, Copy)]
pub struct TargetOptions {
    pub augment: bool,
}

fn run_target<T: Real>(
    prefix: &str,
    init: &ModelWeights<T>,
    samples: &[SubjectSample],
    cfg: &TrainConfig,
    opts: TargetOptions,
    out: Option<&Path>,
    resume: bool,
) -> Result<TargetOutcome<T>> {
    let splits = fold_split(samples.len(), cfg.folds)?;
    let mut folds = Vec::with_capacity(splits.len());
    for (k, (train_idx, val_idx)) in splits.into_iter().enumerate() {
        let pick = |idx: &[usize]| -> Vec<SubjectSample> { idx.iter().map(|&i| samples[i].clone()).collect() };
        let train = SliceSet::from_subjects(&pick(&train_idx), &cfg.preprocess)?;
        let held = pick(&val_idx);
        let val = prepare_all(&held, &cfg.preprocess)?;
        let name = format!("{prefix}-fold{k}");
        let stage = Stage {
            name: name.clone(),
            // Shared by fine-tuning and the scratch baseline: only the
            // initialization differs between them.
            stream: vec![STREAM_TARGET, k as u64],
            train: &train,
            val: &val,
            batch: cfg.batch_target,
            max_epochs: cfg.target_max_epochs,
            patience: cfg.target_patience,
            augment: opts.augment,
        };
        let outcome = stage.run(init.clone(), cfg, stage_files(out, &name)?.as_ref(), resume)?;
        folds.push(FoldResult {
            fold: k,
            held_out: held.into_iter().map(|s| s.id).collect(),
            outcome,
        });
    }
    let scores: Vec<Option<f64>> = folds.iter().map(|f| f.outcome.best_score).collect();
    Ok(TargetOutcome {
        selected: select_fold(&scores),
        folds,
    })
}

/// Stage two: every fold starts from all source parameters and running
/// statistics; nothing is frozen.
pub fn finetune_target<T: Real>(
    source: &ModelWeights<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    opts: TargetOptions,
    out: Option<&Path>,
    resume: bool,
) -> Result<TargetOutcome<T>> {
    if source.provenance != Provenance::SourceTrained {
        return Err(Error::Provenance {
            expected: Provenance::SourceTrained.to_string(),
            found: source.provenance.to_string(),
        });
    }
    check_model(&source.config, cfg)?;
    let samples = ds.load_split(Split::TargetFinetune)?;
    let mut init = source.clone();
    init.provenance = Provenance::FineTuned;
    run_target("finetune", &init, &samples, cfg, opts, out, resume)
}

/// The fine-tuning protocol from a fresh random initialization.
pub fn train_scratch_baseline<T: Real>(
    model: &ModelConfig,
    ds: &Dataset,
    cfg: &TrainConfig,
    opts: TargetOptions,
    out: Option<&Path>,
    resume: bool,
) -> Result<TargetOutcome<T>> {
    check_model(model, cfg)?;
    let samples = ds.load_split(Split::TargetFinetune)?;
    let init = scratch_init(model, cfg)?;
    run_target("scratch", &init, &samples, cfg, opts, out, resume)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_folds_hold_each_subject_out_once() {
        let folds = fold_split(4, 4).unwrap();
        for (k, (train, held)) in folds.iter().enumerate() {
            assert_eq!(held, &vec![k]);
            assert_eq!(train.len(), 3);
        }
        let five = fold_split(7, 3).unwrap();
        let mut all: Vec<usize> = five.iter().flat_map(|f| f.1.clone()).collect();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(fold_split(3, 4).is_err());
    }

    #[test]
    fn selection_is_argmax_with_lowest_index_on_ties() {
        assert_eq!(select_fold(&[Some(0.5), Some(0.7), Some(0.7), Some(0.1)]), 1);
        assert_eq!(select_fold(&[None, Some(0.2), None]), 1);
        assert_eq!(select_fold(&[None, None]), 0);
        assert_eq!(select_fold(&[Some(0.9), Some(0.9)]), 0);
    }
}
