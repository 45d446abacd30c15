use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn focuslite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focuslite"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Data rows of a CSV written by the CLI: comment lines and header stripped.
fn rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    lines.next().expect("header row");
    lines.map(str::to_string).collect()
}

fn synth(dir: &Path, textures: &str, sigmas: &str, size: &str) -> PathBuf {
    let out = dir.join("synth");
    let o = focuslite(&[
        "synth", "--out", p(&out), "--textures", textures, "--sigmas", sigmas, "--size", size,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.csv")
}

fn quick_model(dir: &Path, manifest: &Path, loss: &str) -> PathBuf {
    let out = dir.join(format!("train_{loss}"));
    let o = focuslite(&[
        "train", "--manifest", p(manifest), "--out", p(&out), "--epochs", "2", "--batch-size",
        "4", "--loss", loss,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("model.flnn")
}

#[test]
fn synth_manifest_has_one_row_per_texture_and_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "8", "0,1,2,3", "240");
    assert_eq!(rows(&manifest).len(), 32);
}

#[test]
fn train_writes_loss_tag_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "3", "0,1,2", "240");
    let mse = quick_model(dir.path(), &manifest, "mse");
    let bytes = std::fs::read(&mse).unwrap();
    assert_eq!(&bytes[..4], b"FLNN");
    assert_eq!(bytes[11], 1, "MSE tag");
    let plcc = quick_model(dir.path(), &manifest, "plcc");
    assert_eq!(std::fs::read(&plcc).unwrap()[11], 0);

    let log = plcc.with_file_name("train_log.csv");
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("# focuslite "));
    assert!(text.contains("seed=20200"));
    assert_eq!(rows(&log).len(), 2);
    assert_eq!(rows(&plcc.with_file_name("folds.csv")).len(), 2, "fold + mean");
}

#[test]
fn train_is_deterministic_and_folds_write_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "3", "0,2,4", "240");
    let run = |out: &Path, folds: &str| {
        let o = focuslite(&[
            "train", "--manifest", p(&manifest), "--out", p(out), "--epochs", "2",
            "--batch-size", "4", "--folds", folds, "--threads", "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a, "1");
    run(&b, "1");
    assert_eq!(
        std::fs::read(a.join("model.flnn")).unwrap(),
        std::fs::read(b.join("model.flnn")).unwrap()
    );
    let f = dir.path().join("folds");
    run(&f, "2");
    assert!(f.join("fold_01/model.flnn").exists() && f.join("fold_02/model.flnn").exists());
    let summary = rows(&f.join("folds.csv"));
    assert_eq!(summary.len(), 3);
    assert!(summary[2].starts_with("mean,"));
}

#[test]
fn config_file_sits_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "2", "0,3", "240");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# defaults\nepochs = 3\nbatch_size = 4\n").unwrap();
    let out = dir.path().join("cfg");
    let o = focuslite(&["--config", p(&cfg), "train", "--manifest", p(&manifest), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out.join("train_log.csv")).len(), 3);

    let out2 = dir.path().join("cfg2");
    let o = focuslite(&[
        "--config", p(&cfg), "train", "--manifest", p(&manifest), "--out", p(&out2), "--epochs", "1",
    ]);
    assert!(o.status.success());
    assert_eq!(rows(&out2.join("train_log.csv")).len(), 1);

    std::fs::write(&cfg, "no_such_flag = 1\n").unwrap();
    let o = focuslite(&["--config", p(&cfg), "train", "--manifest", p(&manifest), "--out", p(&out2)]);
    assert!(!o.status.success());
}

#[test]
fn eval_warns_on_kernel_mismatch_and_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "3", "0,1,3,5", "240");
    let model = quick_model(dir.path(), &manifest, "plcc");
    let out = dir.path().join("eval");
    let o = focuslite(&[
        "eval", "--weights", p(&model), "--manifest", p(&manifest), "--out", p(&out), "--kernels", "10",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--kernels 10 ignored"));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for metric in ["srcc", "plcc", "roc_auc", "pr_auc"] {
        assert!(stdout.contains(metric), "{stdout}");
    }
    assert_eq!(rows(&out.join("eval_predictions.csv")).len(), 12);
}

#[test]
fn eval_on_binary_manifest_flags_correlations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "2", "0,4", "240");
    let model = quick_model(dir.path(), &manifest, "plcc");
    // Same images, binary labels (1 = sharp).
    let text = std::fs::read_to_string(&manifest).unwrap();
    let binary: String = text
        .lines()
        .map(|l| {
            if l.starts_with("# kind=") {
                "# kind=BINARY".to_string()
            } else if l.starts_with('t') {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{}", f[0], f[1], if f[2] == "0" { 1 } else { 0 }, f[3])
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let bin_path = manifest.with_file_name("binary.csv");
    std::fs::write(&bin_path, binary).unwrap();
    let out = dir.path().join("eval_bin");
    let o = focuslite(&["eval", "--weights", p(&model), "--manifest", p(&bin_path), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("binary labels"));
    assert!(stdout.contains("n_positive      2"), "{stdout}");
}

#[test]
fn score_rows_crop_counts_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "1", "0,1,2", "240");
    let model = quick_model(dir.path(), &manifest, "mse");
    let images = manifest.parent().unwrap();

    // A 1024×1024 tile: offsets 0,128,…,768 plus 789 per axis.
    let big = dir.path().join("big.png");
    image::RgbImage::from_fn(1024, 1024, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 90]))
        .save(&big)
        .unwrap();
    let per_axis = (0..=1024 - 235).step_by(128).count() + usize::from((1024 - 235) % 128 != 0);
    let out = dir.path().join("score_big");
    let o = focuslite(&["score", "--weights", p(&model), "--out", p(&out), p(&big)]);
    assert!(o.status.success());
    let r = rows(&out.join("scores.csv"));
    assert_eq!(r.len(), 1);
    assert!(r[0].ends_with(&format!(",{}", per_axis * per_axis)), "{}", r[0]);

    let out = dir.path().join("score_dir");
    let o = focuslite(&["score", "--weights", p(&model), "--out", p(&out), p(images)]);
    assert!(o.status.success());
    let r = rows(&out.join("scores.csv"));
    let names: Vec<&str> = r.iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names.len(), 3);
    assert!(names[0].ends_with("t000_s00.png") && names[2].ends_with("t000_s02.png"));

    let again = dir.path().join("score_dir2");
    focuslite(&["score", "--weights", p(&model), "--out", p(&again), p(images)]);
    assert_eq!(rows(&out.join("scores.csv")), rows(&again.join("scores.csv")));

    let out = dir.path().join("score_missing");
    let missing = dir.path().join("nope.png");
    let o = focuslite(&[
        "score", "--weights", p(&model), "--out", p(&out),
        p(&images.join("t000_s00.png")), p(&missing), p(&images.join("t000_s01.png")),
    ]);
    assert!(!o.status.success());
    assert_eq!(rows(&out.join("scores.csv")).len(), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.png"));
}

#[test]
fn heatmap_modes_write_separate_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "3", "0", "491");
    let model = quick_model(dir.path(), &manifest, "mse");
    let scan = manifest.with_file_name("t000_s00.png");
    let out = dir.path().join("maps");
    let o = focuslite(&["heatmap", "--weights", p(&model), "--scan", p(&scan), "--out", p(&out), "--grid-csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = focuslite(&[
        "heatmap", "--weights", p(&model), "--scan", p(&scan), "--out", p(&out), "--mode",
        "absolute", "--lo", "0", "--hi", "12",
    ]);
    assert!(o.status.success());
    let a = image::open(out.join("t000_s00_heatmap_per_scan.png")).unwrap().into_rgb8();
    let b = image::open(out.join("t000_s00_heatmap_absolute.png")).unwrap().into_rgb8();
    assert_eq!(a.dimensions(), (491, 491));
    assert_eq!(a.dimensions(), b.dimensions());
    assert_eq!(rows(&out.join("t000_s00_grid_per_scan.csv")).len(), 9);

    let o = focuslite(&["heatmap", "--weights", p(&model), "--scan", p(&scan), "--out", p(&out), "--alpha", "2"]);
    assert!(!o.status.success());
}

#[test]
fn bench_reports_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = focuslite(&["bench", "--runs", "4", "--out", p(&out), "--host", "ci box"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out.join("bench.csv")).len(), 4);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("forward calls    256"), "{stdout}");
    assert!(stdout.contains("151 parameters"));
    assert!(stdout.contains("ci box"));
    let o = focuslite(&["bench", "--runs", "0", "--out", p(&out)]);
    assert!(!o.status.success());
}

#[test]
fn missing_manifest_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = focuslite(&["train", "--manifest", p(&dir.path().join("none.csv")), "--out", p(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
