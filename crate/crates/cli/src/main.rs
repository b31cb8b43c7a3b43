//! `segadapt`: generate the phantom benchmark, train, fine-tune, evaluate,
//! run the four-arm comparison and predict.
//!
//! Machine-readable results go to stdout, progress to stderr. Exit codes:
//! 0 success, 1 a failed `--assert-ordering` check, 2 usage or I/O
//! errors, 3 provenance or compatibility errors.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use segadapt::network::{load_checkpoint, save_checkpoint, Checkpoint, ModelWeights, Provenance};
use segadapt::phantom::{self, load_image, save_mask, Dataset, DatasetConfig, Split};
use segadapt::trainer::{
    self, evaluate_predictions, min_component_size, predict_volume, Arm, TargetOptions, TargetOutcome,
};
use segadapt::Error;

use config::{RunConfig, Scale};

#[derive(Parser)]
#[command(
    name = "segadapt",
    version,
    about = "Cardiac segmentation with supervised domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults to the preset of --scale.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory (overrides `data` in the config).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark and print its manifest hash.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = phantom::CANONICAL_SEED)]
        seed: u64,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
    /// Stage one: train on the source sequences.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted run in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Stage two: cross-validated fine-tuning of a source checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Source-trained checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Augment target batches.
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        resume: bool,
    },
    /// The fine-tuning protocol from random initialization.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or precomputed masks) on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "predictions")]
        weights: Option<PathBuf>,
        /// Directory of `{id}_{domain}.sgvl` masks to score instead of a model.
        #[arg(long, conflicts_with = "weights")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        split: String,
        #[arg(long)]
        no_postprocess: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also write the report and the resolved config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Source training plus the four compared arms; prints the comparison CSV.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Print the table without connected-component filtering.
        #[arg(long)]
        no_postprocess: bool,
        /// Exit 1 unless source-only < scratch < adapted on mean Dice.
        #[arg(long)]
        assert_ordering: bool,
    },
    /// Segment one SGVL image volume.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        no_postprocess: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Checkpoint and configuration do not fit together.
#[derive(Debug)]
struct Incompatible(String);

impl fmt::Display for Incompatible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Incompatible {}

/// `--assert-ordering` failed.
#[derive(Debug)]
struct OrderingViolated(String);

impl fmt::Display for OrderingViolated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for OrderingViolated {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<OrderingViolated>() {
            return 1;
        }
        if cause.is::<Incompatible>() || matches!(cause.downcast_ref::<Error>(), Some(Error::Provenance { .. })) {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, Dataset)> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.scale)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    let Some(dir) = cfg.data.clone() else {
        bail!("no dataset: pass --data or set `data` in the config");
    };
    let ds = Dataset::open(&dir).with_context(|| format!("opening dataset {}", dir.display()))?;
    if ds.manifest.image_size != cfg.model.input_size {
        log::info!(
            "dataset slices are {0}x{0}, model input {1}x{1}: slices are centre cropped or padded",
            ds.manifest.image_size,
            cfg.model.input_size
        );
    }
    Ok((cfg, ds))
}

fn load_weights(path: &Path, cfg: &RunConfig) -> Result<ModelWeights<f32>> {
    let ck = load_checkpoint::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.weights.config.input_size != cfg.train.preprocess.target_size {
        return Err(Incompatible(format!(
            "checkpoint {} expects {}x{} slices, config preprocesses to {}x{}",
            path.display(),
            ck.weights.config.input_size,
            ck.weights.config.input_size,
            cfg.train.preprocess.target_size,
            cfg.train.preprocess.target_size
        ))
        .into());
    }
    Ok(ck.weights)
}

fn save_target(out: &Path, name: &str, t: &TargetOutcome<f32>) -> Result<PathBuf> {
    let path = out.join(format!("{name}.sgad"));
    save_checkpoint(&path, &Checkpoint::weights_only(t.deployable().clone()))?;
    let folds: Vec<_> = t
        .folds
        .iter()
        .map(|f| {
            serde_json::json!({
                "fold": f.fold,
                "held_out": f.held_out,
                "best_epoch": f.outcome.best_epoch,
                "best_dice": f.outcome.best_score,
                "epochs_run": f.outcome.epochs_run,
            })
        })
        .collect();
    let summary = serde_json::json!({ "selected_fold": t.selected, "folds": folds });
    fs::write(
        out.join(format!("{name}.folds.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(path)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { out, seed, scale } => {
            let cfg = match scale {
                Scale::Desk => DatasetConfig::desk(),
                Scale::Paper => DatasetConfig::paper(),
            };
            phantom::make_dataset(&cfg, seed, &out).with_context(|| format!("generating into {}", out.display()))?;
            println!("{}", phantom::manifest_hash(&out)?);
        }
        Command::Train { common, out, resume } => {
            let (cfg, ds) = resolve(&common)?;
            cfg.echo(&out)?;
            let r = trainer::train_source::<f32>(&ds, &cfg.model, &cfg.train, Some(&out), resume)?;
            let best = out.join("source.best.sgad");
            if r.best_epoch.is_none() {
                save_checkpoint(&best, &Checkpoint::weights_only(r.best))?;
            }
            log::info!("best epoch {:?}, validation dice {:?}", r.best_epoch, r.best_score);
            println!("{}", best.display());
        }
        Command::Finetune {
            common,
            out,
            from,
            augment,
            resume,
        } => {
            let (cfg, ds) = resolve(&common)?;
            let source = load_weights(&from, &cfg)?;
            if source.provenance != Provenance::SourceTrained {
                return Err(Error::Provenance {
                    expected: Provenance::SourceTrained.to_string(),
                    found: source.provenance.to_string(),
                })
                .with_context(|| format!("--from {} cannot be fine-tuned", from.display()));
            }
            cfg.echo(&out)?;
            let t = trainer::finetune_target(&source, &ds, &cfg.train, TargetOptions { augment }, Some(&out), resume)?;
            println!("{}", save_target(&out, "finetune", &t)?.display());
        }
        Command::Baseline {
            common,
            out,
            augment,
            resume,
        } => {
            let (cfg, ds) = resolve(&common)?;
            cfg.echo(&out)?;
            let t = trainer::train_scratch_baseline::<f32>(
                &cfg.model,
                &ds,
                &cfg.train,
                TargetOptions { augment },
                Some(&out),
                resume,
            )?;
            println!("{}", save_target(&out, "scratch", &t)?.display());
        }
        Command::Eval {
            common,
            weights,
            predictions,
            split,
            no_postprocess,
            format,
            out,
        } => {
            let (mut cfg, ds) = resolve(&common)?;
            cfg.postprocess = !no_postprocess;
            let split: Split = split.parse()?;
            let samples = ds.load_split(split)?;
            let (raw, min_size) = match (&weights, &predictions) {
                (Some(w), _) => {
                    let w = load_weights(w, &cfg)?;
                    let raw = samples
                        .iter()
                        .map(|s| predict_volume(&w, &s.image, &cfg.train.preprocess, cfg.train.eval_batch))
                        .collect::<segadapt::Result<Vec<_>>>()?;
                    (raw, min_component_size(&w))
                }
                (None, Some(dir)) => {
                    let raw = samples
                        .iter()
                        .map(|s| {
                            let p = dir.join(format!("{}_{}.sgvl", s.id, s.domain));
                            phantom::load_mask(&p, Some(segadapt::volume::NUM_CLASSES))
                                .with_context(|| format!("loading {}", p.display()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let s = cfg.model.input_size;
                    (raw, segadapt::imaging::default_min_size(s, s))
                }
                (None, None) => bail!("pass --weights or --predictions"),
            };
            let eval = evaluate_predictions(raw, &samples, cfg.postprocess.then_some(min_size))?;
            let text = match format {
                Format::Csv => eval.report.to_csv(),
                Format::Json => eval.report.to_json()? + "\n",
            };
            if let Some(dir) = &out {
                cfg.echo(dir)?;
                let name = match format {
                    Format::Csv => "report.csv",
                    Format::Json => "report.json",
                };
                fs::write(dir.join(name), &text)?;
            }
            print!("{text}");
        }
        Command::Matrix {
            common,
            out,
            no_postprocess,
            assert_ordering,
        } => {
            let (mut cfg, ds) = resolve(&common)?;
            cfg.postprocess = !no_postprocess;
            cfg.echo(&out)?;
            let m = trainer::run_experiment_matrix(&ds, &cfg.model, &cfg.train, Some(&out))?;
            print!("{}", trainer::comparison_csv(&m.arms, cfg.postprocess));
            for a in &m.arms {
                log::info!(
                    "{:<12} mean dice {:.4}",
                    a.arm.as_str(),
                    a.report(cfg.postprocess).mean_dice()
                );
            }
            log::info!("matrix finished in {:.0} s", m.seconds);
            if assert_ordering {
                let (s, a) = (
                    m.mean_dice(Arm::Scratch, cfg.postprocess),
                    m.mean_dice(Arm::Adapted, cfg.postprocess),
                );
                if !m.ordering_holds(cfg.postprocess) {
                    return Err(OrderingViolated(format!(
                        "expected source-only < scratch < adapted, got {:.4} / {s:.4} / {a:.4}",
                        m.mean_dice(Arm::SourceOnly, cfg.postprocess)
                    ))
                    .into());
                }
            }
        }
        Command::Predict {
            common,
            weights,
            input,
            output,
            no_postprocess,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), common.scale)?;
            cfg.postprocess = !no_postprocess;
            let w = load_weights(&weights, &cfg)?;
            let id = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("input")
                .to_string();
            let image = load_image(&input, &id, segadapt::volume::Domain::Lge)
                .with_context(|| format!("loading {}", input.display()))?;
            if let Some(dir) = &common.data {
                let ds = Dataset::open(dir)?;
                let expected = ds.manifest.config.spacing;
                if image.spacing.as_array() != expected {
                    return Err(Incompatible(format!(
                        "input spacing {:?} differs from the dataset spacing {expected:?}",
                        image.spacing.as_array()
                    ))
                    .into());
                }
                let size = ds.manifest.image_size;
                let d = image.dims();
                if (d.height, d.width) != (size, size) {
                    return Err(Incompatible(format!(
                        "input slices are {}x{}, the dataset has {size}x{size}",
                        d.height, d.width
                    ))
                    .into());
                }
            }
            let mut mask = predict_volume(&w, &image, &cfg.train.preprocess, cfg.train.eval_batch)?;
            if cfg.postprocess {
                mask = segadapt::imaging::remove_small_components(&mask, min_component_size(&w));
            }
            save_mask(&output, &mask)?;
            log::info!("wrote {} ({} slices)", output.display(), mask.dims().slices);
        }
    }
    Ok(())
}
