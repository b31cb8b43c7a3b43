use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, STRUCTURES};
use crate::network::{save_checkpoint, Checkpoint, ModelConfig, ModelWeights, Provenance};
use crate::phantom::{Dataset, Split, SubjectSample};
use crate::tensor::Real;

use super::config::{Arm, TrainConfig, TrainLogEntry};
use super::eval::{evaluate_predictions, min_component_size, predict_volume};
use super::protocol::{finetune_target, train_scratch_baseline, train_source, TargetOptions, TargetOutcome};

/// Scores of one arm on the target test split.
#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub provenance: Provenance,
    /// Deployable fold of the target stage, if the arm has one.
    pub selected_fold: Option<usize>,
    /// Validation Dice the deployed weights were selected on.
    pub val_dice: Option<f64>,
    pub raw: MetricsReport,
    pub postprocessed: MetricsReport,
    pub seconds: f64,
}

impl ArmResult {
    pub fn report(&self, postprocess: bool) -> &MetricsReport {
        if postprocess {
            &self.postprocessed
        } else {
            &self.raw
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixOutcome {
    pub source_best_epoch: Option<u64>,
    pub source_best_dice: Option<f64>,
    pub source_log: Vec<TrainLogEntry>,
    pub arms: Vec<ArmResult>,
    pub seconds: f64,
}

impl MatrixOutcome {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is run")
    }

    pub fn mean_dice(&self, arm: Arm, postprocess: bool) -> f64 {
        self.arm(arm).report(postprocess).mean_dice()
    }

    /// `source-only < scratch < adapted` on mean foreground test Dice.
    pub fn ordering_holds(&self, postprocess: bool) -> bool {
        let d = |a| self.mean_dice(a, postprocess);
        d(Arm::SourceOnly) < d(Arm::Scratch) && d(Arm::Scratch) < d(Arm::Adapted)
    }
}

const METRICS: [&str; 3] = ["dice", "hd", "asd"];

fn metric(report: &MetricsReport, structure: &str, m: &str) -> Option<f64> {
    let row = report.row(structure)?;
    match m {
        "dice" => row.dice.mean,
        "hd" => row.hd_mm.mean,
        _ => row.asd_mm.mean,
    }
}

fn structures() -> impl Iterator<Item = &'static str> {
    STRUCTURES.iter().map(|s| s.0).chain(["Average"])
}

/// One row per arm; mean Dice, Hausdorff (mm) and ASD (mm) per structure
/// and averaged.
pub fn comparison_csv(arms: &[ArmResult], postprocess: bool) -> String {
    let mut out = String::from("arm");
    for s in structures() {
        for m in METRICS {
            let _ = write!(out, ",{s}_{m}");
        }
    }
    out.push('\n');
    for a in arms {
        out.push_str(a.arm.as_str());
        for s in structures() {
            for m in METRICS {
                let v = metric(a.report(postprocess), s, m)
                    .map(|x| x.to_string())
                    .unwrap_or_default();
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    out
}

/// `arm,postprocess,structure,metric,value` for both post-processing modes.
pub fn long_csv(arms: &[ArmResult]) -> String {
    let mut out = String::from("arm,postprocess,structure,metric,value\n");
    for a in arms {
        for post in [false, true] {
            for s in structures() {
                for m in METRICS {
                    let v = metric(a.report(post), s, m).map(|x| x.to_string()).unwrap_or_default();
                    let _ = writeln!(out, "{},{},{s},{m},{v}", a.arm, if post { "on" } else { "off" });
                }
            }
        }
    }
    out
}

fn score_arm<T: Real>(
    arm: Arm,
    weights: &ModelWeights<T>,
    target: Option<&TargetOutcome<T>>,
    test: &[SubjectSample],
    cfg: &TrainConfig,
    started: Instant,
) -> Result<ArmResult> {
    let raw = test
        .iter()
        .map(|s| predict_volume(weights, &s.image, &cfg.preprocess, cfg.eval_batch))
        .collect::<Result<Vec<_>>>()?;
    let post = evaluate_predictions(raw.clone(), test, Some(min_component_size(weights)))?;
    let raw = evaluate_predictions(raw, test, None)?;
    let result = ArmResult {
        arm,
        provenance: weights.provenance,
        selected_fold: target.map(|t| t.selected),
        val_dice: target.and_then(|t| t.folds[t.selected].outcome.best_score),
        raw: raw.report,
        postprocessed: post.report,
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "arm {arm}: mean dice {:.4} raw, {:.4} post-processed",
        result.raw.mean_dice(),
        result.postprocessed.mean_dice()
    );
    Ok(result)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Source training once, then the four arms on the same dataset, seed and
/// test subjects. With `out`, stage logs and checkpoints, the deployed
/// weights of each arm, `comparison.csv` (post-processed),
/// `comparison_raw.csv`, `comparison_long.csv` and `matrix.json` are written.
pub fn run_experiment_matrix(
    ds: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<MatrixOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let test = ds.load_split(Split::TargetTest)?;
    let sub = |name: &str| out.map(|o| o.join(name));

    let t = Instant::now();
    let source = train_source::<f32>(ds, model, cfg, sub("source").as_deref(), false)?;
    let mut arms = vec![score_arm(Arm::SourceOnly, &source.best, None, &test, cfg, t)?];

    let t = Instant::now();
    let plain = TargetOptions {
        augment: cfg.augment_target,
    };
    let scratch = train_scratch_baseline::<f32>(model, ds, cfg, plain, sub("scratch").as_deref(), false)?;
    arms.push(score_arm(
        Arm::Scratch,
        scratch.deployable(),
        Some(&scratch),
        &test,
        cfg,
        t,
    )?);

    let t = Instant::now();
    let adapted = finetune_target(&source.best, ds, cfg, plain, sub("adapted").as_deref(), false)?;
    arms.push(score_arm(
        Arm::Adapted,
        adapted.deployable(),
        Some(&adapted),
        &test,
        cfg,
        t,
    )?);

    let t = Instant::now();
    let aug = finetune_target(
        &source.best,
        ds,
        cfg,
        TargetOptions { augment: true },
        sub("adapted-aug").as_deref(),
        false,
    )?;
    arms.push(score_arm(Arm::AdaptedAug, aug.deployable(), Some(&aug), &test, cfg, t)?);

    let outcome = MatrixOutcome {
        source_best_epoch: source.best_epoch,
        source_best_dice: source.best_score,
        source_log: source.log,
        arms,
        seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        let wdir = dir.join("weights");
        fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
        let deployed = [
            (Arm::SourceOnly, &source.best),
            (Arm::Scratch, scratch.deployable()),
            (Arm::Adapted, adapted.deployable()),
            (Arm::AdaptedAug, aug.deployable()),
        ];
        for (arm, w) in deployed {
            let file = arm.as_str().replace('+', "-");
            save_checkpoint(&wdir.join(format!("{file}.sgad")), &Checkpoint::weights_only(w.clone()))?;
        }
        write(&dir.join("comparison.csv"), &comparison_csv(&outcome.arms, true))?;
        write(&dir.join("comparison_raw.csv"), &comparison_csv(&outcome.arms, false))?;
        write(&dir.join("comparison_long.csv"), &long_csv(&outcome.arms))?;
        write(&dir.join("matrix.json"), &serde_json::to_string_pretty(&outcome)?)?;
    }
    Ok(outcome)
}
