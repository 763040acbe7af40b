//! End-to-end exercises of the `wdsc` binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use wdsc_core::data::{load_image, save_image};
use wdsc_core::{PairSource, SyntheticPairs, Tensor};

fn wdsc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wdsc"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawning wdsc");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_fails(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning wdsc");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(path: &Path, max_iters: u64, h: usize, w: usize) {
    let text = format!(
        r#"
[model]
variant = "factorized"
n = 4

[train]
lambda = 800.0
max_iters = {max_iters}
val_every = 50
seed = 3

[data]
kind = "synthetic"
count = 12
height = {h}
width = {w}
holdout = 2
"#
    );
    std::fs::write(path, text).unwrap();
}

fn train_checkpoint(dir: &Path) -> PathBuf {
    let cfg = dir.join("cfg.toml");
    write_config(&cfg, 120, 32, 64);
    let ckpt = dir.join("model.wdck");
    let log = dir.join("log.csv");
    run_ok(wdsc()
        .arg("train")
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--log", log.to_str().unwrap()]));
    // the CSV log has a header plus one row per iteration
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 121);
    assert!(log_text.starts_with("iter,loss,r_x,d_x,r_y,d_y,r_w,lr"));
    ckpt
}

#[test]
fn train_compress_decompress_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path());

    let pairs = SyntheticPairs::new(77, 2, 32, 64);
    let pair = pairs.get(0).unwrap();
    let x_png = dir.path().join("x.png");
    let y_png = dir.path().join("y.png");
    save_image(&pair.right, &x_png).unwrap();
    save_image(&pair.left, &y_png).unwrap();

    let bin = dir.path().join("x.wdsc");
    run_ok(wdsc()
        .arg("compress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--input", x_png.to_str().unwrap()])
        .args(["--out", bin.to_str().unwrap()]));
    // deterministic: a second run produces identical bytes
    let bin2 = dir.path().join("x2.wdsc");
    run_ok(wdsc()
        .arg("compress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--input", x_png.to_str().unwrap()])
        .args(["--out", bin2.to_str().unwrap()]));
    assert_eq!(
        std::fs::read(&bin).unwrap(),
        std::fs::read(&bin2).unwrap()
    );

    let xhat_png = dir.path().join("xhat.png");
    run_ok(wdsc()
        .arg("decompress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--side", y_png.to_str().unwrap()])
        .args(["--input", bin.to_str().unwrap()])
        .args(["--out", xhat_png.to_str().unwrap()]));
    let xhat = load_image(&xhat_png).unwrap();
    assert_eq!(xhat.shape(), &[3, 32, 64]);

    // second decode, byte-identical output file
    let xhat2_png = dir.path().join("xhat2.png");
    run_ok(wdsc()
        .arg("decompress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--side", y_png.to_str().unwrap()])
        .args(["--input", bin.to_str().unwrap()])
        .args(["--out", xhat2_png.to_str().unwrap()]));
    assert_eq!(
        std::fs::read(&xhat_png).unwrap(),
        std::fs::read(&xhat2_png).unwrap()
    );

    // common / private decompositions both decode and differ
    let common_png = dir.path().join("common.png");
    let private_png = dir.path().join("private.png");
    for (mode, path) in [("common", &common_png), ("private", &private_png)] {
        run_ok(wdsc()
            .arg("inspect")
            .args(["--ckpt", ckpt.to_str().unwrap()])
            .args(["--side", y_png.to_str().unwrap()])
            .args(["--input", bin.to_str().unwrap()])
            .args(["--mode", mode])
            .args(["--out", path.to_str().unwrap()]));
    }
    let common = load_image(&common_png).unwrap();
    let private = load_image(&private_png).unwrap();
    assert_ne!(common.data(), private.data());
    assert_ne!(common.data(), xhat.data());
}

#[test]
fn eval_writes_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path());

    // KITTI-shaped folder: raw 375x1242 views, preprocessed by ingestion
    let data_dir = dir.path().join("dataset");
    std::fs::create_dir_all(data_dir.join("left")).unwrap();
    std::fs::create_dir_all(data_dir.join("right")).unwrap();
    let raw = SyntheticPairs::new(5, 3, 375, 1242);
    for i in 0..3 {
        let pair = raw.get(i).unwrap();
        save_image(&pair.left, &data_dir.join(format!("left/{i:03}.png"))).unwrap();
        save_image(&pair.right, &data_dir.join(format!("right/{i:03}.png"))).unwrap();
    }

    let rd = dir.path().join("rd.csv");
    run_ok(wdsc()
        .arg("eval")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--dataset", data_dir.to_str().unwrap()])
        .args(["--out", rd.to_str().unwrap()]));
    let text = std::fs::read_to_string(&rd).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "bpp,psnr,msssim,lambda,alpha,beta,variant");
    assert_eq!(lines.len(), 1 + 3, "one row per dataset pair");
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 7);
        let bpp: f64 = fields[0].parse().unwrap();
        let msssim: f64 = fields[2].parse().unwrap();
        assert!(bpp >= 0.0);
        assert!((0.0..=1.0).contains(&msssim));
        assert_eq!(fields[6], "factorized");
    }
}

#[test]
fn sweep_writes_one_point_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    // msssim needs the smallest scale to fit the 7x7 window: 112px minimum
    write_config(&cfg, 60, 112, 112);
    let curve = dir.path().join("curve.csv");
    let ckpts = dir.path().join("ckpts");
    run_ok(wdsc()
        .arg("sweep")
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--lambdas", "50,800"])
        .args(["--out", curve.to_str().unwrap()])
        .args(["--ckpt-dir", ckpts.to_str().unwrap()]));
    let text = std::fs::read_to_string(&curve).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "header plus one point per lambda");
    assert!(ckpts.join("lambda_50.wdck").exists());
    assert!(ckpts.join("lambda_800.wdck").exists());
    let lambda_of: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambda_of, vec![50.0, 800.0]);
}

#[test]
fn contract_violations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path());

    // dims not divisible by 16
    let bad = Tensor::full(&[3, 40, 52], 0.5);
    let bad_png = dir.path().join("bad.png");
    save_image(&bad, &bad_png).unwrap();
    let out = dir.path().join("bad.wdsc");
    let err = run_fails(wdsc()
        .arg("compress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--input", bad_png.to_str().unwrap()])
        .args(["--out", out.to_str().unwrap()]));
    assert!(err.contains("divisible"), "stderr: {err}");

    // missing checkpoint file
    run_fails(wdsc()
        .arg("compress")
        .args(["--ckpt", dir.path().join("nope.wdck").to_str().unwrap()])
        .args(["--input", bad_png.to_str().unwrap()])
        .args(["--out", out.to_str().unwrap()]));

    // corrupted bitstream
    let pairs = SyntheticPairs::new(1, 1, 32, 64);
    let pair = pairs.get(0).unwrap();
    let x_png = dir.path().join("x.png");
    let y_png = dir.path().join("y.png");
    save_image(&pair.right, &x_png).unwrap();
    save_image(&pair.left, &y_png).unwrap();
    let bin = dir.path().join("x.wdsc");
    run_ok(wdsc()
        .arg("compress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--input", x_png.to_str().unwrap()])
        .args(["--out", bin.to_str().unwrap()]));
    let mut bytes = std::fs::read(&bin).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    std::fs::write(&bin, &bytes).unwrap();
    let err = run_fails(wdsc()
        .arg("decompress")
        .args(["--ckpt", ckpt.to_str().unwrap()])
        .args(["--side", y_png.to_str().unwrap()])
        .args(["--input", bin.to_str().unwrap()])
        .args(["--out", dir.path().join("xhat.png").to_str().unwrap()]));
    assert!(!err.is_empty());
}
