use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use triresnet_core::eval::read_heatmap_image;
use triresnet_core::wsi::{load_slide, DatasetManifest, SynthSpec};
use triresnet_core::{
    build_triresnet, load_checkpoint, save_checkpoint, Parameterized, StreamConfig, Tensor, TriResNet, MALIGNANT,
};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_triresnet"));
    c.env_remove("TRIRESNET_OUT");
    c
}

fn run(root: &Path, args: &[&str]) -> Output {
    bin().arg("--out-root").arg(root).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout:\n{}\nstderr:\n{}",
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two default-layout slides under `<root>/slides`.
fn two_slides(root: &Path) -> PathBuf {
    for (id, seed) in [("a", "1"), ("b", "2")] {
        ok(run(root, &["synth", "--id", id, "--seed", seed]));
    }
    root.join("slides")
}

fn tiles(root: &Path, slides: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let n = n.to_string();
    let mut args = vec!["tile", "--slides", p(slides), "-n", &n, "--side", "32", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(run(root, &args));
    root.join("tiles.manifest")
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_a_three_level_slide_deterministically() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(run(t.path(), &["synth", "--id", "s", "--seed", "4"]));
    assert!(stdout(&out).contains("448x448, 112x112, 28x28"));
    let dir = t.path().join("slides/s");
    let slide = load_slide(&dir).unwrap();
    assert_eq!(slide.level_count(), 3);
    assert!(slide.has_malignancy());
    assert!(dir.join("synth_spec.json").is_file());

    ok(run(t.path(), &["synth", "--id", "s", "--seed", "4", "--out", p(&t.path().join("again"))]));
    assert_eq!(dir_bytes(&dir), dir_bytes(&t.path().join("again")));
}

#[test]
fn invalid_synth_spec_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(t.path(), &["synth", "--spec", p(&bad)])), 2);

    let spec = SynthSpec {
        width: 8,
        ..SynthSpec::default()
    };
    fs::write(&bad, spec.to_json()).unwrap();
    assert_eq!(code(&run(t.path(), &["synth", "--spec", p(&bad)])), 2);
}

#[test]
fn tile_balances_classes_and_reruns_identically() {
    let t = tempfile::tempdir().unwrap();
    let slides = two_slides(t.path());
    let path = tiles(t.path(), &slides, 100, &[]);
    let m = DatasetManifest::load(&path).unwrap();
    assert_eq!(m.records.len(), 100);
    assert_eq!(m.records.iter().filter(|r| r.label == MALIGNANT).count(), 50);
    assert!(m.records.iter().all(|r| r.side == 32));
    let first = fs::read(&path).unwrap();
    tiles(t.path(), &slides, 100, &[]);
    assert_eq!(first, fs::read(&path).unwrap());
    assert!(t.path().join("tile_config.txt").is_file());

    assert_eq!(code(&run(t.path(), &["tile", "--slides", p(&slides), "-n", "7", "--side", "32"])), 1);
}

#[test]
fn tile_without_malignant_tissue_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        malignant: None,
        ..SynthSpec::default()
    };
    let spec_path = t.path().join("benign.json");
    fs::write(&spec_path, spec.to_json()).unwrap();
    ok(run(t.path(), &["synth", "--spec", p(&spec_path), "--id", "benign"]));
    let out = run(t.path(), &["tile", "--slides", p(&t.path().join("slides")), "-n", "4", "--side", "32"]);
    assert_eq!(code(&out), 3);
}

fn tiny_epochs(e: [usize; 3]) -> Vec<String> {
    let mut v = vec!["--tiny".to_owned()];
    for (i, n) in e.iter().enumerate() {
        v.push("--set".into());
        v.push(format!("epochs_stage{}={n}", i + 1));
    }
    v
}

fn train(root: &Path, manifest: &Path, slides: &Path, extra: &[String]) -> Output {
    let mut args: Vec<String> = ["train", "--manifest", p(manifest), "--slides", p(slides)]
        .map(str::to_owned)
        .to_vec();
    args.extend_from_slice(extra);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(root, &refs)
}

#[test]
fn zero_epoch_training_checkpoints_the_initial_model() {
    let t = tempfile::tempdir().unwrap();
    let slides = two_slides(t.path());
    let manifest = tiles(t.path(), &slides, 40, &["--split", "0.8,0.2"]);
    let mut extra = tiny_epochs([0, 0, 0]);
    extra.extend(["--seed".into(), "11".into()]);
    ok(train(t.path(), &manifest, &slides, &extra));

    let init = build_triresnet::<f32>(&StreamConfig::tiny(), 2, [11, 12, 13], 14).unwrap();
    let dir = t.path().join("train");
    for stage in ["pretrain_stream_0", "pretrain_stream_1", "pretrain_stream_2", "head", "finetune"] {
        let m: TriResNet<f32> = load_checkpoint(&dir.join(format!("{stage}.ckpt"))).unwrap();
        for ((na, a), (nb, b)) in init.state_snapshot().iter().zip(&m.state_snapshot()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{stage}: {na} differs");
        }
    }
    assert_eq!(fs::read_to_string(dir.join("reports.jsonl")).unwrap(), "");
    let echoed = fs::read_to_string(dir.join("train_config.txt")).unwrap();
    assert!(echoed.contains("seed = 11") && echoed.contains("stage_depths = 1,1,1,1"));
}

#[test]
fn training_logs_one_record_per_epoch() {
    let t = tempfile::tempdir().unwrap();
    let slides = two_slides(t.path());
    let manifest = tiles(t.path(), &slides, 40, &["--split", "0.8,0.2"]);
    ok(train(t.path(), &manifest, &slides, &tiny_epochs([1, 0, 1])));
    let log = fs::read_to_string(t.path().join("train/reports.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert_eq!(log.lines().filter(|l| l.contains("finetune")).count(), 1);

    let mut extra = tiny_epochs([1, 1, 0]);
    extra.extend(["--single-stream".into(), "--out".into(), p(&t.path().join("base")).into()]);
    let out = ok(train(t.path(), &manifest, &slides, &extra));
    assert!(stdout(&out).contains("baseline epoch 1"));
    assert!(t.path().join("base/baseline.ckpt").is_file());
    assert_eq!(fs::read_to_string(t.path().join("base/reports.jsonl")).unwrap().lines().count(), 2);
}

/// A tiny network whose output ignores its input and always favors the
/// malignant class.
fn always_malignant(path: &Path) {
    let mut m = build_triresnet::<f32>(&StreamConfig::tiny(), 2, [1, 2, 3], 4).unwrap();
    m.head_fc2.weight.value = Tensor::zeros(m.head_fc2.weight.value.shape().to_vec());
    m.head_fc2.bias.value = Tensor::from_vec(vec![2], vec![0.0, 5.0]).unwrap();
    save_checkpoint(&m, path).unwrap();
}

#[test]
fn eval_reports_metrics_and_rejects_an_empty_split() {
    let t = tempfile::tempdir().unwrap();
    let slides = two_slides(t.path());
    let manifest = tiles(t.path(), &slides, 40, &["--split", "0.5,0.5"]);
    let ckpt = t.path().join("const.ckpt");
    always_malignant(&ckpt);
    let out_dir = t.path().join("eval");
    let args = [
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--slides",
        p(&slides),
        "--split",
        "val",
        "--out",
        p(&out_dir),
    ];
    let text = stdout(&ok(run(t.path(), &args)));
    assert!(text.contains("tp 10 fp 10 tn 0 fn 0"), "{text}");
    let header = text.lines().find(|l| l.contains("accuracy")).unwrap();
    assert!(header.contains("sensitivity") && header.contains("specificity"));
    let row = text.lines().find(|l| l.starts_with("triresnet:const")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(&cols[1..], ["0.5000", "1.0000", "0.0000"]);
    assert!(out_dir.join("metrics.txt").is_file());
    assert!(out_dir.join("eval_config.txt").is_file());

    let mut missing = args;
    missing[8] = "test";
    assert_eq!(code(&run(t.path(), &missing)), 4);
}

#[test]
fn heatmap_defaults_and_oracle_truth() {
    let t = tempfile::tempdir().unwrap();
    let slides = two_slides(t.path());
    let slide = slides.join("a");
    ok(run(t.path(), &["heatmap", "--oracle", "--slide", p(&slide)]));
    let pgm = t.path().join("heatmaps/a.pgm");
    let (rows, cols, values) = read_heatmap_image(&pgm).unwrap();
    assert_eq!((rows, cols), (2, 2));
    // Tissue covers every 224-pixel cell center; the left half is malignant.
    assert_eq!(values, [1.0, 0.0, 1.0, 0.0]);
    assert!(t.path().join("heatmaps/a.json").is_file());

    let ckpt = t.path().join("const.ckpt");
    always_malignant(&ckpt);
    let out = t.path().join("model.pgm");
    ok(run(
        t.path(),
        &["heatmap", "--checkpoint", p(&ckpt), "--slide", p(&slide), "--side", "64", "--stride", "64", "--out", p(&out)],
    ));
    let (rows, cols, values) = read_heatmap_image(&out).unwrap();
    assert_eq!((rows, cols), (7, 7));
    assert!(values.iter().all(|&v| v == 0.0 || v > 0.99));

    let blocker = t.path().join("file");
    fs::write(&blocker, "").unwrap();
    let unwritable = blocker.join("h.pgm");
    assert_ne!(code(&run(t.path(), &["heatmap", "--oracle", "--slide", p(&slide), "--out", p(&unwritable)])), 0);
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(run(t.path(), &["verify", "--quick"]));
    assert!(stdout(&out).lines().all(|l| !l.contains("FAILED")));
    let out = run(t.path(), &["verify", "--quick", "--inject-fault", "relu"]);
    assert_eq!(code(&out), 5);
    assert!(stdout(&out).contains("FAILED"));
}

#[test]
fn flags_beat_the_config_file_and_the_effective_config_is_echoed() {
    let t = tempfile::tempdir().unwrap();
    let slides = two_slides(t.path());
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "# tiles\nseed = 5\ntile_side = 48\nattempts = 500\n").unwrap();
    let out = t.path().join("m/tiles.manifest");
    let base = ["tile", "--slides", p(&slides), "-n", "10", "--config", p(&cfg), "--out", p(&out)];
    ok(run(t.path(), &base));
    let echo = fs::read_to_string(t.path().join("m/tile_config.txt")).unwrap();
    assert!(echo.contains("seed = 5") && echo.contains("tile_side = 48") && echo.contains("attempts = 500"));
    assert!(DatasetManifest::load(&out).unwrap().records.iter().all(|r| r.side == 48));

    let mut args = base.to_vec();
    args.extend(["--set", "seed=6", "--side", "40"]);
    ok(run(t.path(), &args));
    let echo = fs::read_to_string(t.path().join("m/tile_config.txt")).unwrap();
    assert!(echo.contains("seed = 6") && echo.contains("tile_side = 40"));

    args.extend(["--seed", "7"]);
    ok(run(t.path(), &args));
    assert!(fs::read_to_string(t.path().join("m/tile_config.txt")).unwrap().contains("seed = 7"));

    fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(code(&run(t.path(), &base)), 1);
}

#[test]
fn out_root_comes_from_the_environment() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path().join("env-root");
    let out = bin()
        .env("TRIRESNET_OUT", &root)
        .args(["synth", "--id", "e"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("slides/e/synth_spec.json").is_file());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["tile", "-n", "2"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}
