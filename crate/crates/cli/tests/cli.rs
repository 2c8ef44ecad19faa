use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn sot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sot"))
        .args(args)
        .env_remove("SOT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--patch-size",
    "8",
    "--dict-size",
    "16",
    "--samples",
    "400",
    "--outer-iters",
    "4",
    "--seed",
    "11",
];

fn fit_model(dir: &Path) -> PathBuf {
    let model = dir.join("model.bin");
    let (content, reference) = (fixture("blue_128.png"), fixture("red_128.png"));
    let mut args = vec![
        "fit",
        "--content",
        s(&content),
        "--reference",
        s(&reference),
        "--out-model",
        s(&model),
    ];
    args.extend(SMALL);
    let out = sot(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn missing_content_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.bin");
    let out = sot(&["fit", "--reference", s(&fixture("red_128.png")), "--out-model", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--content"));
    assert!(!model.exists());
}

#[test]
fn fit_writes_model_losses_and_atlases() {
    let dir = tempfile::tempdir().unwrap();
    let (model, csv, atlas) = (dir.path().join("m.bin"), dir.path().join("loss.csv"), dir.path().join("atlas"));
    let (content, reference) = (fixture("astronaut_64.png"), fixture("red_128.png"));
    let mut args = vec![
        "fit",
        "--content",
        s(&content),
        "--reference",
        s(&reference),
        "--out-model",
        s(&model),
        "--loss-csv",
        s(&csv),
        "--atlas-dir",
        s(&atlas),
    ];
    args.extend(SMALL);
    let out = sot(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().next().unwrap().starts_with("iter=0 E_sp_x="));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("iter,E_sp_x,E_sp_y,E_ot_a,E_ot_b,E_c"));
    assert!(text.lines().count() >= 2);
    for name in ["dict_x.png", "dict_y.png"] {
        assert!(atlas.join(name).is_file());
    }
    assert!(fs::metadata(&model).unwrap().len() > 0);
}

#[test]
fn forward_and_reverse_differ_and_report_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_model(dir.path());
    let (fwd, rev) = (dir.path().join("fwd.png"), dir.path().join("rev.png"));
    let content = fixture("blue_128.png");
    let a = sot(&["transfer", "--model", s(&model), "--input", s(&content), "--out", s(&fwd)]);
    assert!(a.status.success());
    let text = stdout(&a);
    assert!(text.lines().any(|l| l.starts_with("psnr=")));
    assert!(text.lines().any(|l| l.starts_with("edge_ssim=")));
    let b = sot(&["transfer", "--model", s(&model), "--input", s(&content), "--out", s(&rev), "--direction", "reverse"]);
    assert!(b.status.success());
    assert_ne!(fs::read(&fwd).unwrap(), fs::read(&rev).unwrap());
}

#[test]
fn zero_rho_output_is_the_raw_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_model(dir.path());
    let (raw, refined) = (dir.path().join("raw.png"), dir.path().join("refined.png"));
    let content = fixture("blue_128.png");
    let a = sot(&["transfer", "--model", s(&model), "--input", s(&content), "--out", s(&raw), "--rho", "0"]);
    let b = sot(&["transfer", "--model", s(&model), "--input", s(&content), "--out", s(&refined), "--rho", "5"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(fs::read(&raw).unwrap(), fs::read(&refined).unwrap());
}

#[test]
fn missing_model_and_channel_mismatch_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_png = dir.path().join("out.png");
    let content = fixture("blue_128.png");
    let missing = sot(&["transfer", "--model", s(&dir.path().join("nope.bin")), "--input", s(&content), "--out", s(&out_png)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!out_png.exists());

    let model = fit_model(dir.path());
    let gray = dir.path().join("gray.png");
    sot_core::Image::load_png(&content).unwrap().to_gray().save_png(&gray).unwrap();
    let mismatch = sot(&["transfer", "--model", s(&model), "--input", s(&gray), "--out", s(&out_png)]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(!out_png.exists());
}

#[test]
fn eval_on_identical_files() {
    let img = fixture("astronaut_64.png");
    let out = sot(&["eval", "--a", s(&img), "--b", s(&img)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), "psnr=99\nssim=1\nedge_ssim=1\n");
}

#[test]
fn eval_prints_parseable_values_and_rejects_size_mismatch() {
    let out = sot(&["eval", "--a", s(&fixture("blue_128.png")), "--b", s(&fixture("red_128.png"))]);
    assert!(out.status.success());
    let text = stdout(&out);
    let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
    assert_eq!(keys, ["psnr", "ssim", "edge_ssim"]);
    for line in text.lines() {
        line.split_once('=').unwrap().1.parse::<f64>().unwrap();
    }
    let bad = sot(&["eval", "--a", s(&fixture("blue_128.png")), "--b", s(&fixture("astronaut_64.png"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_is_deterministic_and_config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "patch-size=8\ndict-size=16\nsamples=400\nouter-iters=3\nseed=5\n").unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let out_png = dir.path().join(format!("run{i}.png"));
        let out = sot(&[
            "--config",
            s(&cfg),
            "--threads",
            threads,
            "run",
            "--content",
            s(&fixture("blue_128.png")),
            "--reference",
            s(&fixture("red_128.png")),
            "--out",
            s(&out_png),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("iter=")).count(), 3);
        outputs.push(fs::read(&out_png).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    // An explicit flag wins over the file.
    let out_png = dir.path().join("override.png");
    let out = sot(&[
        "run",
        "--config",
        s(&cfg),
        "--content",
        s(&fixture("blue_128.png")),
        "--reference",
        s(&fixture("red_128.png")),
        "--out",
        s(&out_png),
        "--outer-iters",
        "2",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("iter=")).count(), 2);
}

#[test]
fn bad_thread_settings_and_config_keys_are_usage_errors() {
    let img = fixture("astronaut_64.png");
    let out = Command::new(env!("CARGO_BIN_EXE_sot"))
        .args(["eval", "--a", s(&img), "--b", s(&img)])
        .env("SOT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_sot"))
        .args(["eval", "--a", s(&img), "--b", s(&img)])
        .env("SOT_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(sot(&["--threads", "0", "eval", "--a", s(&img), "--b", s(&img)]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no-such-flag=1\n").unwrap();
    assert_eq!(sot(&["--config", s(&cfg), "eval", "--a", s(&img), "--b", s(&img)]).status.code(), Some(2));
}

#[test]
fn invalid_config_values_fail_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.bin");
    let csv = dir.path().join("loss.csv");
    let out = sot(&[
        "fit",
        "--content",
        s(&fixture("blue_128.png")),
        "--reference",
        s(&fixture("red_128.png")),
        "--out-model",
        s(&model),
        "--loss-csv",
        s(&csv),
        "--patch-size",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!model.exists() && !csv.exists());
}
