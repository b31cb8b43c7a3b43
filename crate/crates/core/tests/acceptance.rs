//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs the full experiment matrix on the canonical dataset
//! once and shares it between the criteria that need trained weights.

mod common;

use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segadapt::autodiff::{Graph, Mode, Var};
use segadapt::gradcheck::{finite_diff_gradcheck, Coordinates};
use segadapt::imaging::remove_small_components;
use segadapt::losses::{one_hot_encode, soft_dice_loss, DiceVariant, OneHotTarget};
use segadapt::metrics::{average_surface_distance, extract_boundary, hausdorff_distance, overlap_scores};
use segadapt::network::{
    build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, model_forward, Checkpoint, ModelConfig,
    ModelWeights, Network, Provenance,
};
use segadapt::optim::AdamState;
use segadapt::phantom::{
    decode_image, decode_mask, encode_image, encode_mask, make_dataset, manifest_hash, Dataset, DatasetConfig, Split,
    CANONICAL_SEED,
};
use segadapt::trainer::{
    finetune_target, predict_volume, run_experiment_matrix, source_init, source_slices, train_source, train_step, Arm,
    MatrixOutcome, TargetOptions, TrainConfig, STREAM_SOURCE,
};
use segadapt::volume::{Dims, LabelMask, Spacing};
use segadapt::Tensor;

const MANIFEST_HASH: &str = "2466f9e34df4593ddc387dc384ddc49d952ea151e96de6ec5becaa27b4808d73";
/// Loss of the first source batch of epoch one, 64-bit.
const FIRST_BATCH_LOSS: f64 = 0.8587545840530584;
/// Logged mean training loss of source epoch one, 32-bit.
const FIRST_EPOCH_LOSS: f64 = 0.7497952952045775;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Canonical {
    ds: Dataset,
    model: ModelConfig,
    cfg: TrainConfig,
    matrix: MatrixOutcome,
    out: tempfile::TempDir,
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let cfg = ModelConfig::desk().with_input_size(16);
    let mut weights = build_model::<f64>(&cfg, 7).unwrap();
    // Move batchnorm shifts off zero so no activation sits on a relu kink.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, t) in weights.params.iter_mut() {
        if name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let x = Tensor::new(
        vec![1, 1, 16, 16],
        (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let mask = common::random_mask(&mut rng, 16);
    let target = one_hot_encode::<f64>(&mask, 4).unwrap().into_tensor();
    let params: Vec<(String, Tensor<f64>)> = weights.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let report = finite_diff_gradcheck(
        &params,
        1e-5,
        1e-4,
        Coordinates::Sample { per_param: 6, seed: 1 },
        |g: &mut Graph<f64>, vars: &[Var]| {
            let pv: IndexMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let input = g.constant(x.clone());
            let probs = Network::new(g, &pv, &weights.running, Mode::Train).forward(input)?;
            g.soft_dice_loss(probs, target.clone(), DiceVariant::FactorTwo, 1.0)
        },
    )
    .unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = report.worst().unwrap();
    verdict(
        report.passed() && report.params.len() == weights.params.len() && secs < 300.0,
        format!(
            "{} parameter tensors, max rel error {:.2e} ({}), {secs:.0} s",
            report.params.len(),
            worst.rel_error,
            worst.name
        ),
    )
}

fn criterion_2() -> Verdict {
    let dims = Dims {
        slices: 1,
        height: 4,
        width: 4,
    };
    let data: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
    let mask = LabelMask::new(dims, data, Spacing::isotropic_2d(1.0)).unwrap();
    let t: OneHotTarget<f64> = one_hot_encode(&mask, 4).unwrap();
    let printed = soft_dice_loss(t.tensor(), &t, DiceVariant::AsPrinted, 0.0).unwrap();
    let two = soft_dice_loss(t.tensor(), &t, DiceVariant::FactorTwo, 0.0).unwrap();
    verdict(
        (printed - 0.5).abs() <= 1e-9 && two.abs() <= 1e-6,
        format!("as printed {printed}, factor two {two:e}"),
    )
}

fn criterion_3() -> Verdict {
    let cfg = ModelConfig::desk().with_input_size(16);
    let w = build_model::<f32>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // 40 slices of 16 x 16 = 10240 pixels.
    let x = Tensor::new(
        vec![40, 1, 16, 16],
        (0..40 * 256).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for mode in [Mode::Train, Mode::Eval] {
        let p = model_forward(&w, &x, mode).unwrap();
        let hw = 256;
        for b in 0..40 {
            for i in 0..hw {
                let s: f64 = (0..4).map(|c| p.data()[(b * 4 + c) * hw + i] as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    verdict(
        worst <= 1e-6,
        format!("10240 pixels per mode, max |sum - 1| = {worst:.2e}"),
    )
}

fn criterion_4() -> Verdict {
    let started = Instant::now();
    let mut rng = common::seeded(4);
    let mut mismatches = 0;
    for _ in 0..100 {
        let a = common::random_mask(&mut rng, 32);
        let b = common::random_mask(&mut rng, 32);
        for class in 1..=3u8 {
            if overlap_scores(&a, &b, class).unwrap() != common::overlap_oracle(&a, &b, class) {
                mismatches += 1;
            }
            let (ba, bb) = (extract_boundary(&a, class), extract_boundary(&b, class));
            if ba.is_empty() || bb.is_empty() {
                continue;
            }
            let hd = hausdorff_distance(&ba, &bb, &a.spacing).unwrap();
            let asd = average_surface_distance(&ba, &bb, &a.spacing).unwrap();
            if hd.to_bits() != common::hausdorff_oracle(&ba, &bb, &a.spacing).to_bits()
                || asd.to_bits() != common::asd_oracle(&ba, &bb, &a.spacing).to_bits()
            {
                mismatches += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 60.0,
        format!("100 pairs, {mismatches} mismatches, {secs:.1} s"),
    )
}

fn criterion_5(c: &Canonical) -> Verdict {
    let d = |a| c.matrix.mean_dice(a, true);
    let (so, sc, ad, aug) = (d(Arm::SourceOnly), d(Arm::Scratch), d(Arm::Adapted), d(Arm::AdaptedAug));
    let minutes = c.matrix.seconds / 60.0;
    verdict(
        so < sc && sc < ad && ad - sc >= 0.03 && so <= 0.60 && minutes <= 45.0,
        format!("source-only {so:.3} < scratch {sc:.3} < adapted {ad:.3} (adapted+aug {aug:.3}), {minutes:.1} min"),
    )
}

fn criterion_6(c: &Canonical) -> Verdict {
    let source = load_source(c);
    let cfg = TrainConfig {
        target_max_epochs: 0,
        ..c.cfg.clone()
    };
    let t = finetune_target(&source, &c.ds, &cfg, TargetOptions { augment: true }, None, false).unwrap();
    let mut all = true;
    for f in &t.folds {
        let mut w = f.outcome.best.clone();
        all &= w.provenance == Provenance::FineTuned;
        w.provenance = source.provenance;
        all &= w.bitwise_eq(&source);
    }
    verdict(
        all,
        format!("{} folds bitwise equal to the source checkpoint", t.folds.len()),
    )
}

fn criterion_7(c: &Canonical) -> Verdict {
    let best = c
        .matrix
        .source_log
        .iter()
        .take(30)
        .map(|e| e.val_dice)
        .fold(f64::NAN, f64::max);
    let epoch = c
        .matrix
        .source_log
        .iter()
        .take(30)
        .position(|e| e.val_dice >= 0.85)
        .map(|i| i + 1);
    verdict(
        best >= 0.85,
        format!("best source-val Dice within 30 epochs {best:.4}, first >= 0.85 at epoch {epoch:?}"),
    )
}

fn criterion_8(c: &Canonical) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&DatasetConfig::desk(), CANONICAL_SEED, dir.path()).unwrap();
    let hash = manifest_hash(dir.path()).unwrap();
    let canonical = manifest_hash(&c.ds.root).unwrap();

    // First 64-bit source batch from the canonical initialization.
    let train = source_slices(&c.ds, &c.cfg).unwrap();
    let order = train.epoch_order(c.cfg.seed, &[STREAM_SOURCE], 1);
    let (x, y) = train.batch::<f64>(&order[..c.cfg.batch_source], None).unwrap();
    let mut w = source_init::<f64>(&c.model, &c.cfg).unwrap();
    let mut opt = AdamState::new(c.cfg.adam()).unwrap();
    let batch_loss = train_step(&mut w, &mut opt, &x, y, &c.cfg).unwrap();

    // One 32-bit source epoch again must match the matrix log bit for bit.
    let one = TrainConfig {
        max_epochs: 1,
        ..c.cfg.clone()
    };
    let rerun = train_source::<f32>(&c.ds, &c.model, &one, None, false).unwrap();
    let (a, b) = (&rerun.log[0], &c.matrix.source_log[0]);
    let epoch_same = a.train_loss.to_bits() == b.train_loss.to_bits() && a.val_dice.to_bits() == b.val_dice.to_bits();

    // Prediction twice on a test subject.
    let source = load_source(c);
    let entry = c.ds.manifest.entries(Split::TargetTest).next().unwrap().clone();
    let s = c.ds.load(&entry).unwrap();
    let p1 = predict_volume(&source, &s.image, &c.cfg.preprocess, c.cfg.eval_batch).unwrap();
    let p2 = predict_volume(&source, &s.image, &c.cfg.preprocess, 5).unwrap();

    let pass = hash == MANIFEST_HASH
        && canonical == MANIFEST_HASH
        && batch_loss.to_bits() == FIRST_BATCH_LOSS.to_bits()
        && b.train_loss.to_bits() == FIRST_EPOCH_LOSS.to_bits()
        && epoch_same
        && p1 == p2;
    verdict(
        pass,
        format!(
            "manifest {hash}, first batch loss {batch_loss:?}, first epoch loss {:?}, epoch rerun identical {epoch_same}, predictions identical {}",
            b.train_loss,
            p1 == p2
        ),
    )
}

fn criterion_9(c: &Canonical) -> Verdict {
    let arm = c.matrix.arm(Arm::Adapted);
    let (raw, post) = (arm.raw.mean_dice(), arm.postprocessed.mean_dice());
    let w = load_weights(c, "adapted");
    let k = segadapt::trainer::min_component_size(&w);
    let fg = |x: &LabelMask| x.data().iter().filter(|&&v| v != 0).count();
    let mut contract = true;
    for s in c.ds.load_split(Split::TargetTest).unwrap() {
        let p = predict_volume(&w, &s.image, &c.cfg.preprocess, c.cfg.eval_batch).unwrap();
        let once = remove_small_components(&p, k);
        contract &= remove_small_components(&once, k) == once && fg(&once) <= fg(&p);
    }
    verdict(
        contract && post >= raw,
        format!("idempotent and shrinking on adapted predictions {contract}; adapted mean Dice raw {raw:.4}, post-processed {post:.4}"),
    )
}

fn criterion_10(c: &Canonical) -> Verdict {
    let mut ok = true;
    let entry = c.ds.manifest.entries(Split::TargetTest).next().unwrap().clone();
    let s = c.ds.load(&entry).unwrap();
    let img = encode_image(&s.image);
    let back = decode_image(&img, &s.id, s.domain).unwrap();
    ok &= back
        .data()
        .iter()
        .zip(s.image.data())
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && back.spacing == s.image.spacing;
    let msk = encode_mask(&s.mask);
    ok &= decode_mask(&msk, Some(4)).unwrap() == s.mask;
    ok &= decode_image(&img[..img.len() - 1], &s.id, s.domain).is_err();
    ok &= decode_mask(&msk[..20], None).is_err();

    let w = load_weights(c, "adapted");
    let has_stats = w.running.values().all(|r| r.initialized);
    let bytes = encode_checkpoint(&Checkpoint::weights_only(w.clone())).unwrap();
    let round = decode_checkpoint::<f32>(&bytes).unwrap().weights;
    ok &= round.bitwise_eq(&w);
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let rejected =
        decode_checkpoint::<f32>(&flipped).is_err() && decode_checkpoint::<f32>(&bytes[..bytes.len() - 7]).is_err();
    verdict(
        ok && has_stats && rejected,
        format!("volumes and checkpoint bitwise {ok}, running statistics present {has_stats}, corruption rejected {rejected}"),
    )
}

fn load_weights(c: &Canonical, arm: &str) -> ModelWeights<f32> {
    load_checkpoint::<f32>(&c.out.path().join(format!("weights/{arm}.sgad")))
        .unwrap()
        .weights
}

fn load_source(c: &Canonical) -> ModelWeights<f32> {
    load_weights(c, "source-only")
}

fn canonical() -> Canonical {
    let out = tempfile::tempdir().unwrap();
    let data = out.path().join("data");
    make_dataset(&DatasetConfig::desk(), CANONICAL_SEED, &data).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let model = ModelConfig::desk();
    let cfg = TrainConfig::desk();
    let matrix = run_experiment_matrix(&ds, &model, &cfg, Some(out.path())).unwrap();
    Canonical {
        ds,
        model,
        cfg,
        matrix,
        out,
    }
}

fn main() {
    // `cargo test -- --list` and name filters from the harness.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args
        .iter()
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return;
    }

    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!(
            "criterion {n:>2} {} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v));
    };
    report(1, "gradient correctness", criterion_1());
    report(2, "loss fidelity", criterion_2());
    report(3, "softmax normalization", criterion_3());
    report(4, "metric oracle equivalence", criterion_4());

    let started = Instant::now();
    let c = canonical();
    eprintln!("canonical matrix done in {:.0} s", started.elapsed().as_secs_f64());
    report(5, "comparison ordering", criterion_5(&c));
    report(6, "transfer identity", criterion_6(&c));
    report(7, "training sanity", criterion_7(&c));
    report(8, "determinism", criterion_8(&c));
    report(9, "post-processing contract", criterion_9(&c));
    report(10, "format round-trips", criterion_10(&c));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
