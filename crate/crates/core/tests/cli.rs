use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eri_core::autodiff::Module;
use eri_core::checkpoint;
use eri_core::config::RunConfig;
use eri_core::data::Manifest;
use eri_core::metrics::CATEGORIES;
use eri_core::train::{build_models, sha256_file, REPORT_HEADER};

fn eri(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eri"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn eri")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = eri(dir, args);
    assert!(
        out.status.success(),
        "eri {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_small(dir: &Path, out: &str, n: &str) {
    ok(dir, &["synth", "--out", out, "--n-videos", n, "--frame-dims", "3x8x8", "--seed", "11"]);
}

const SMALL_MODEL: [&str; 8] = [
    "--stage-channels",
    "4,4,8,8",
    "--input-size",
    "3x8x8",
    "--attention-heads",
    "2",
    "--lstm-hidden",
    "6",
];

fn train_small(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--manifest",
        "data/manifest.csv",
        "--checkpoint",
        "run/m.ckpt",
        "--report",
        "run/report.csv",
        "--batch-size",
        "4",
    ];
    args.extend(SMALL_MODEL);
    args.extend(extra);
    ok(dir, &args)
}

fn first_epoch_loss(report: &str) -> f64 {
    let mut lines = report.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some(REPORT_HEADER));
    lines.next().unwrap().split(',').nth(2).unwrap().parse().unwrap()
}

#[test]
fn synth_is_reproducible_and_records_frame_dims() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "a", "6");
    synth_small(dir.path(), "b", "6");
    let a = sha256_file(&dir.path().join("a/manifest.csv")).unwrap();
    let b = sha256_file(&dir.path().join("b/manifest.csv")).unwrap();
    assert_eq!(a, b);
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let meta = fs::read_to_string(dir.path().join("a/dataset.meta")).unwrap();
    assert!(meta.lines().any(|l| l == "frame_dims=3x8x8"));
}

#[test]
fn synth_rejects_a_single_video() {
    let dir = tempfile::tempdir().unwrap();
    let out = eri(dir.path(), &["synth", "--out", "d", "--n-videos", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_videos"));
}

#[test]
fn loss_flag_changes_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "data", "12");
    let mut losses = Vec::new();
    for loss in ["pcc", "ccc"] {
        train_small(dir.path(), &["--loss", loss, "--epochs", "1"]);
        losses.push(first_epoch_loss(&fs::read_to_string(dir.path().join("run/report.csv")).unwrap()));
    }
    assert!((losses[0] - losses[1]).abs() > 1e-6, "{losses:?}");
}

#[test]
fn zero_learning_rate_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "data", "12");
    train_small(dir.path(), &["--lr", "0", "--epochs", "2", "--seed", "3"]);
    let ck = checkpoint::load(&dir.path().join("run/m.ckpt")).unwrap();
    let (extractor, head) = build_models(&ck.config).unwrap();
    assert_eq!(ck.config.seed, 3);
    assert_eq!(ck.extractor.parameter_bytes(), extractor.parameter_bytes());
    assert_eq!(ck.head.parameter_bytes(), head.parameter_bytes());
}

#[test]
fn default_model_fits_the_training_split() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "data"]);
    ok(
        dir.path(),
        &[
            "train", "--manifest", "data/manifest.csv", "--steps", "500", "--epochs", "0",
            "--checkpoint", "run/m.ckpt", "--report", "run/report.csv",
        ],
    );
    ok(
        dir.path(),
        &["eval", "--checkpoint", "run/m.ckpt", "--manifest", "data/manifest.csv", "--split", "train", "--out", "run/eval.csv"],
    );
    let text = fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    let mut rows = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let expected: Vec<&str> = ["split", "n_samples", "mean_pcc"]
        .into_iter()
        .chain(CATEGORIES)
        .chain(["degenerate_categories"])
        .collect();
    assert_eq!(headers.iter().collect::<Vec<_>>(), expected);
    let row = rows.records().next().unwrap().unwrap();
    let mean: f64 = row[2].parse().unwrap();
    assert!(mean >= 0.9, "train mean PCC {mean}");
}

#[test]
fn predictions_equal_to_targets_score_one() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "data", "20");
    let manifest = Manifest::load(&dir.path().join("data/manifest.csv")).unwrap();
    let mut w = csv::Writer::from_path(dir.path().join("preds.csv")).unwrap();
    w.write_record(std::iter::once("video_id").chain(CATEGORIES)).unwrap();
    for r in &manifest.rows {
        let mut rec = vec![r.video_id.clone()];
        rec.extend(r.labels().iter().map(|v| v.to_string()));
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
    let stdout = ok(
        dir.path(),
        &["eval", "--predictions", "preds.csv", "--manifest", "data/manifest.csv", "--split", "val"],
    );
    assert!(stdout.contains("mean PCC 1.0000"), "{stdout}");
}

#[test]
fn gradcheck_scopes() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(dir.path(), &["gradcheck", "--scope", "ops"]);
    let second = ok(dir.path(), &["gradcheck", "--scope", "ops"]);
    assert_eq!(first, second);
    assert!(first.contains(" 0 failed"));

    let mut args = vec!["gradcheck", "--scope", "model", "--freeze-extractor", "true"];
    args.extend(SMALL_MODEL);
    let model = ok(dir.path(), &args);
    assert!(!model.contains("mtl_dan."));
    assert!(model.contains("eri.lstm.layer0.w_i"));
}

#[test]
fn run_config_values_are_echoed_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "data", "8");
    train_small(dir.path(), &["--epochs", "1", "--seed", "9"]);
    let report = fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    let cfg = RunConfig::parse_text(
        &report
            .lines()
            .filter_map(|l| l.strip_prefix("# "))
            .filter(|l| !l.starts_with("manifest_sha256"))
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.stage_channels, [4, 4, 8, 8]);
}
