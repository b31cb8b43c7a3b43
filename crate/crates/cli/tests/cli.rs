use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_segadapt");

/// Narrow network and one-epoch stages so each command runs in seconds.
const TINY: &str = r#"
[model]
base_filters = [4, 8, 8, 16]
bottleneck_filters = 16

[train]
max_epochs = 1
patience = 1
target_max_epochs = 1
target_patience = 1
lr = 0.001
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

struct Fixture {
    root: PathBuf,
    hash: String,
}

impl Fixture {
    fn data(&self) -> String {
        self.root.join("data").display().to_string()
    }

    fn config(&self) -> String {
        self.root.join("tiny.toml").display().to_string()
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

/// Canonical desk dataset, generated once per test binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        fs::write(root.join("tiny.toml"), TINY).unwrap();
        let data = root.join("data").display().to_string();
        let hash = stdout(&ok(run(&["generate", "--out", &data, "--seed", "42"])))
            .trim()
            .to_string();
        Fixture { root, hash }
    })
}

/// Source checkpoint trained once by `segadapt train`.
fn source_checkpoint() -> &'static str {
    static S: OnceLock<String> = OnceLock::new();
    S.get_or_init(|| {
        let f = fixture();
        let out = f.path("source");
        let o = ok(run(&[
            "train",
            "--config",
            &f.config(),
            "--data",
            &f.data(),
            "--out",
            &out,
        ]));
        stdout(&o).trim().to_string()
    })
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generation_is_reproducible() {
    let f = fixture();
    assert_eq!(f.hash.len(), 64);
    let again = f.path("data-again");
    let hash = stdout(&ok(run(&["generate", "--out", &again, "--seed", "42"])));
    assert_eq!(hash.trim(), f.hash);
    let other = f.path("data-other");
    let hash = stdout(&ok(run(&["generate", "--out", &other, "--seed", "43"])));
    assert_ne!(hash.trim(), f.hash);
}

#[test]
fn paper_scale_generates_larger_slices() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(&[
        "generate",
        "--out",
        dir.path().to_str().unwrap(),
        "--scale",
        "paper",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["image_size"], 224);
    let entry = &manifest["subjects"][0];
    let image = segadapt::phantom::load_image(
        &dir.path().join(entry["image_path"].as_str().unwrap()),
        "x",
        segadapt::volume::Domain::Bssfp,
    )
    .unwrap();
    assert_eq!((image.dims().height, image.dims().width), (224, 224));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["generate"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let f = fixture();
    let o = run(&[
        "eval",
        "--data",
        &f.data(),
        "--predictions",
        &f.path("data/masks"),
        "--split",
        "nowhere",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).is_empty());
}

#[test]
fn one_epoch_of_source_training_logs_one_line() {
    let f = fixture();
    let best = source_checkpoint();
    assert!(Path::new(best).exists());
    let log = fs::read_to_string(f.root.join("source/source.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let entry: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(entry["stage"], "source");
    assert_eq!(entry["epoch"], 1);
    assert!(f.root.join("source/run_config.toml").exists());

    // A rerun from the echoed config reproduces the log bit for bit.
    let rerun = f.path("source-rerun");
    let echo = f.root.join("source/run_config.toml").display().to_string();
    ok(run(&["train", "--config", &echo, "--out", &rerun]));
    let again = fs::read_to_string(f.root.join("source-rerun/source.log.jsonl")).unwrap();
    let strip = |s: &str| -> (serde_json::Value, serde_json::Value) {
        let v: serde_json::Value = serde_json::from_str(s.lines().next().unwrap()).unwrap();
        (v["train_loss"].clone(), v["val_dice"].clone())
    };
    assert_eq!(strip(&log), strip(&again));
}

#[test]
fn finetuning_requires_a_source_checkpoint() {
    let f = fixture();
    let out = f.path("baseline");
    let o = ok(run(&[
        "baseline",
        "--config",
        &f.config(),
        "--data",
        &f.data(),
        "--out",
        &out,
    ]));
    let scratch = stdout(&o).trim().to_string();
    assert!(scratch.ends_with("scratch.sgad"));

    let o = run(&[
        "finetune",
        "--config",
        &f.config(),
        "--data",
        &f.data(),
        "--out",
        &f.path("bad"),
        "--from",
        &scratch,
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("source-trained"));

    let out = f.path("finetune");
    let o = ok(run(&[
        "finetune",
        "--config",
        &f.config(),
        "--data",
        &f.data(),
        "--out",
        &out,
        "--from",
        source_checkpoint(),
    ]));
    assert!(stdout(&o).trim().ends_with("finetune.sgad"));
    let folds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("finetune/finetune.folds.json")).unwrap()).unwrap();
    assert_eq!(folds["folds"].as_array().unwrap().len(), 4);
}

#[test]
fn ground_truth_masks_score_perfect_dice() {
    let f = fixture();
    let o = ok(run(&[
        "eval",
        "--data",
        &f.data(),
        "--predictions",
        &f.path("data/masks"),
        "--split",
        "target-test",
    ]));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 5, "header plus four structures");
    let dice = rows[0].iter().position(|c| c == "dice_mean").expect("dice column");
    for row in &rows[1..] {
        assert_eq!(row[dice].parse::<f64>().unwrap(), 1.0, "{row:?}");
    }
}

#[test]
fn no_postprocess_only_changes_that_field_of_the_echo() {
    let f = fixture();
    let ck = source_checkpoint();
    let (on, off) = (f.path("eval-on"), f.path("eval-off"));
    let base = [
        "eval",
        "--config",
        &f.config(),
        "--data",
        &f.data(),
        "--weights",
        ck,
        "--split",
        "source-val",
    ];
    ok(run(&[&base[..], &["--out", &on]].concat()));
    ok(run(&[&base[..], &["--out", &off, "--no-postprocess"]].concat()));
    let read = |d: &str| fs::read_to_string(Path::new(d).join("run_config.toml")).unwrap();
    let (a, b) = (read(&on), read(&off));
    let differing: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(differing, vec![("postprocess = true", "postprocess = false")]);
    assert_eq!(a.lines().count(), b.lines().count());
}

#[test]
fn prediction_matches_evaluation_and_is_deterministic() {
    let f = fixture();
    let ck = source_checkpoint();
    let input = f.root.join("data/images/lge-004_lge.sgvl").display().to_string();
    let (p1, p2) = (f.path("pred1.sgvl"), f.path("pred2.sgvl"));
    for p in [&p1, &p2] {
        ok(run(&[
            "predict",
            "--config",
            &f.config(),
            "--data",
            &f.data(),
            "--weights",
            ck,
            "--input",
            &input,
            "--output",
            p,
        ]));
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let mask = segadapt::phantom::load_mask(Path::new(&p1), None).unwrap();
    assert!(mask.data().iter().all(|&v| v <= 3));

    // Scoring the written mask equals scoring the checkpoint on that subject.
    let ds = segadapt::phantom::Dataset::open(Path::new(&f.data())).unwrap();
    let entry = ds
        .manifest
        .entries(segadapt::phantom::Split::TargetTest)
        .find(|e| e.id == "lge-004")
        .cloned()
        .unwrap();
    let sample = ds.load(&entry).unwrap();
    let from_file = segadapt::trainer::evaluate_predictions(vec![mask], std::slice::from_ref(&sample), None).unwrap();
    let w = segadapt::network::load_checkpoint::<f32>(Path::new(ck))
        .unwrap()
        .weights;
    let pre = segadapt::imaging::PreprocessConfig::default();
    let direct = segadapt::trainer::evaluate_arm(&w, &[sample], &pre, 16, true).unwrap();
    assert_eq!(from_file.report.to_csv(), direct.report.to_csv());
}

#[test]
fn prediction_rejects_mismatched_spacing() {
    let f = fixture();
    let src = f.root.join("data/images/lge-004_lge.sgvl");
    let mut img = segadapt::phantom::load_image(&src, "x", segadapt::volume::Domain::Lge).unwrap();
    img.spacing = segadapt::volume::Spacing::new(2.0, 2.0, 8.0).unwrap();
    let odd = f.path("odd.sgvl");
    segadapt::phantom::save_image(Path::new(&odd), &img).unwrap();
    let o = run(&[
        "predict",
        "--config",
        &f.config(),
        "--data",
        &f.data(),
        "--weights",
        source_checkpoint(),
        "--input",
        &odd,
        "--output",
        &f.path("odd_out.sgvl"),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("[2.0, 2.0, 8.0]") && err.contains("[1.0, 1.0, 8.0]"),
        "{err}"
    );
}

#[test]
fn matrix_reports_every_arm_and_guards_the_ordering() {
    let f = fixture();
    let out = f.path("matrix");
    let o = run(&[
        "matrix",
        "--config",
        &f.config(),
        "--data",
        &f.data(),
        "--out",
        &out,
        "--assert-ordering",
    ]);
    let code = o.status.code();
    let rows = csv_rows(&stdout(&o));
    let arms: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(arms, ["source-only", "scratch", "adapted", "adapted+aug"]);
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));

    let avg = rows[0].iter().position(|c| c == "Average_dice").unwrap();
    let d: Vec<f64> = rows[1..].iter().map(|r| r[avg].parse().unwrap()).collect();
    let holds = d[0] < d[1] && d[1] < d[2];
    assert_eq!(code, Some(if holds { 0 } else { 1 }), "dice {d:?}");

    let long = fs::read_to_string(Path::new(&out).join("comparison_long.csv")).unwrap();
    assert!(long.starts_with("arm,postprocess,structure,metric,value\n"));
    assert_eq!(long.lines().count(), 1 + 4 * 2 * 4 * 3);
    for arm in ["source-only", "scratch", "adapted", "adapted-aug"] {
        assert!(Path::new(&out).join(format!("weights/{arm}.sgad")).exists());
    }
}
