use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "data.source=synthetic",
    "data.train_size=60",
    "data.test_size=30",
    "train.epochs=2",
    "train.batch_size=20",
    "hessian.k=3",
    "hessian.probes=4",
    "hessian.max_iters=6",
    "hessian.lanczos_steps=6",
    "hessian.density_probes=1",
];

fn spikelab(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spikelab"));
    cmd.args(args);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str], sets: &[&str]) {
    let out = spikelab(args, sets);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--out", out.to_str().unwrap(), "--seed", "3"], SMALL);
    }
    for f in ["metrics.csv", "summary.json", "init_report.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());
    let metrics = read(&a.join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), "epoch,train_loss,train_acc,test_loss,test_acc");
    assert_eq!(metrics.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&read(&a.join("summary.json"))).unwrap();
    assert!(summary["scheme1_epoch"].is_null() || summary["scheme1_epoch"].is_u64());
    assert!(summary["best_epoch"].is_u64());
}

#[test]
fn seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--out", a.to_str().unwrap(), "--seed", "1"], SMALL);
    ok(&["train", "--out", b.to_str().unwrap(), "--seed", "2"], SMALL);
    assert_ne!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, format!("# small run\n{}\ntrain.epochs = 1\n", SMALL.join("\n"))).unwrap();
    let out = dir.path().join("o");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(read(&out.join("metrics.csv")).lines().count(), 2);
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &["train.epochs=3"]);
    assert_eq!(read(&out.join("metrics.csv")).lines().count(), 4);
}

#[test]
fn compare_and_hessian_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let run = |o: &Path| {
        ok(&["compare", "--out", o.to_str().unwrap(), "--schemes", "xavier,ikun_v2", "--seeds", "0", "--jobs", "2"], SMALL)
    };
    run(&out);
    let csv = read(&out.join("compare.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "scheme,seed,optimizer,scheme1_epoch,best_epoch,best_test_acc,hessian_trace,lambda_max,lambda_min_top50"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("xavier,0,sgd,"));
    assert!(lines[2].starts_with("ikun_v2,0,sgd,"));
    for l in &lines[1..] {
        let fields: Vec<&str> = l.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert!(fields[6].parse::<f64>().is_ok(), "{l}");
    }
    let again = dir.path().join("cmp2");
    run(&again);
    assert_eq!(csv, read(&again.join("compare.csv")));

    let ckpt = out.join("runs/ikun_v2_seed0/best.ckpt");
    let hdir = dir.path().join("h");
    for _ in 0..2 {
        ok(&["hessian", "--checkpoint", ckpt.to_str().unwrap(), "--out", hdir.to_str().unwrap()], SMALL);
    }
    let h: serde_json::Value = serde_json::from_str(&read(&hdir.join("hessian.json"))).unwrap();
    for key in ["trace", "trace_stderr", "top_eigenvalues", "density", "param_count", "n_probes"] {
        assert!(!h[key].is_null(), "missing {key}");
    }
    assert_eq!(h["top_eigenvalues"].as_array().unwrap().len(), 3);
    assert_eq!(h["n_probes"], 4);
    let wsum: f64 = h["density"].as_array().unwrap().iter().map(|p| p["weight"].as_f64().unwrap()).sum();
    assert!((wsum - 1.0).abs() < 1e-9);
}

#[test]
fn hessian_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&["train", "--out", out.to_str().unwrap()], SMALL);
    let mut sets = SMALL.to_vec();
    sets.push("net.conv1_channels=4");
    let res = spikelab(&["hessian", "--out", out.to_str().unwrap()], &sets);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("shape"));
}

#[test]
fn varprop_and_init_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let sets = ["varprop.width=16", "data.source=synthetic", "data.train_size=40"];
    ok(&["varprop", "--out", out.to_str().unwrap(), "--schemes", "kaiming,ikun_v2", "--depth", "3"], &sets);
    let csv = read(&out.join("varprop.csv"));
    assert_eq!(csv.lines().next().unwrap(), "scheme,layer,forward_var,backward_var,ratio_forward,ratio_backward");
    assert_eq!(csv.lines().count(), 7);
    ok(&["varprop", "--out", out.to_str().unwrap(), "--schemes", "kaiming,ikun_v2", "--depth", "3"], &sets);
    assert_eq!(csv, read(&out.join("varprop.csv")));

    ok(&["init-report", "--out", out.to_str().unwrap()], &sets);
    let analytic = read(&out.join("init_report.csv"));
    assert_eq!(analytic.lines().next().unwrap(), "layer,fan_in,fan_out,sigma_w,sigma_x2,mu_h,ef2,v_threshold");
    for l in analytic.lines().skip(1) {
        assert_eq!(l.split(',').nth(4), Some("1"), "{l}");
    }
    let mut cal = sets.to_vec();
    cal.push("init.calibrate=true");
    ok(&["init-report", "--out", out.to_str().unwrap()], &cal);
    let calibrated = read(&out.join("init_report.csv"));
    for l in calibrated.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[5], f[7], "{l}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(code(&spikelab(&["train", "--out", o], &["init.kind=ikunv9"])), 2);
    let res = spikelab(&["train", "--out", o], &["train.lrr=0.1"]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("train.lr"));
    assert_eq!(code(&spikelab(&["train", "--out", o], &["train.epochs=lots"])), 2);
    assert_eq!(code(&spikelab(&["train", "--out", o], &["train.momentum=1.5"])), 2);
    assert_eq!(code(&spikelab(&["frobnicate"], &[])), 2);
    assert_eq!(code(&spikelab(&["train", "--config", "/nonexistent/x.cfg"], &[])), 2);
    assert_eq!(code(&spikelab(&["train", "--out", o], &["data.dir=/nonexistent"])), 1);
    assert_eq!(code(&spikelab(&["hessian", "--checkpoint", "/nonexistent.ckpt", "--out", o], SMALL)), 1);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"SPKLgarbage").unwrap();
    assert_eq!(code(&spikelab(&["hessian", "--checkpoint", bad.to_str().unwrap(), "--out", o], SMALL)), 1);
    let keys = spikelab(&["keys"], &[]);
    assert_eq!(code(&keys), 0);
    assert!(String::from_utf8_lossy(&keys.stdout).contains("init.kind"));
}
