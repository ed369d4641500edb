//! Subcommand bodies.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use spikelab::data::Dataset;
use spikelab::init::{InitKind, InitScheme};
use spikelab::numerics::rng::purpose;
use spikelab::numerics::RngStream;
use spikelab::train::sig9;
use spikelab::varprop::{build_stack, measure_variances, probe_batch, write_csv_rows, CSV_HEADER};

use crate::config::ExperimentConfig;
use crate::run::{
    hessian_run, init_network, init_report_csv, load_data, to_json, train_run, write_file, CliError, CliResult,
    HessianJson, RunSummary,
};

fn scheme_of(cfg: &ExperimentConfig, kind: InitKind) -> InitScheme {
    InitScheme { kind, ..cfg.init.scheme }
}

pub fn train(cfg: &ExperimentConfig) -> CliResult<()> {
    let (train, test) = load_data(cfg)?;
    let summary = train_run(cfg, &cfg.init.scheme, cfg.seed, &train, &test, &cfg.out, cfg.init.scheme.kind.as_str())?;
    eprintln!(
        "done: best test accuracy {} at epoch {}",
        summary.best_test_acc.map(sig9).unwrap_or_else(|| "-".into()),
        summary.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

pub const COMPARE_HEADER: &str =
    "scheme,seed,optimizer,scheme1_epoch,best_epoch,best_test_acc,hessian_trace,lambda_max,lambda_min_top50";

struct CompareRow {
    summary: RunSummary,
    trace: Option<f64>,
    lambda_max: Option<f64>,
    lambda_min: Option<f64>,
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn compare_one(
    cfg: &ExperimentConfig,
    kind: InitKind,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    dir: &Path,
) -> CliResult<CompareRow> {
    let label = format!("{kind} seed {seed}");
    let summary = train_run(cfg, &scheme_of(cfg, kind), seed, train, test, dir, &label)?;
    let ckpt = dir.join("best.ckpt");
    let (mut trace, mut lambda_max, mut lambda_min) = (None, None, None);
    if cfg.hessian.enabled && summary.best_epoch.is_some() {
        eprintln!("[{label}] curvature analysis");
        let report = hessian_run(cfg, &ckpt, seed, test, false)?;
        trace = Some(report.trace_estimate);
        lambda_max = report.top_eigenvalues.iter().copied().reduce(f64::max);
        lambda_min = report.top_eigenvalues.iter().copied().reduce(f64::min);
        write_file(&dir.join("hessian.json"), &to_json(&HessianJson::from(report)))?;
    }
    Ok(CompareRow { summary, trace, lambda_max, lambda_min })
}

/// Every (scheme, seed) pair under the same configuration, `jobs` at a time.
pub fn compare(cfg: &ExperimentConfig) -> CliResult<()> {
    let (train, test) = load_data(cfg)?;
    let runs: Vec<(InitKind, u64)> = cfg
        .compare
        .schemes
        .iter()
        .flat_map(|&k| cfg.compare.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Mutex<Vec<Option<CliResult<CompareRow>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let dir_of = |k: InitKind, s: u64| -> PathBuf { cfg.out.join("runs").join(format!("{k}_seed{s}")) };

    std::thread::scope(|scope| {
        for _ in 0..cfg.compare.jobs.min(runs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(kind, seed)) = runs.get(i) else { break };
                let r = compare_one(cfg, kind, seed, &train, &test, &dir_of(kind, seed));
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });

    let mut csv = format!("{COMPARE_HEADER}\n");
    let mut failures = 0;
    let optimizer = cfg.train.optimizer.name();
    for (&(kind, seed), r) in runs.iter().zip(results.into_inner().expect("no poisoned workers")) {
        match r.expect("every run reports") {
            Ok(row) => csv.push_str(&format!(
                "{kind},{seed},{optimizer},{},{},{},{},{},{}\n",
                opt(row.summary.scheme1_epoch, |e| e.to_string()),
                opt(row.summary.best_epoch, |e| e.to_string()),
                opt(row.summary.best_test_acc, sig9),
                opt(row.trace, sig9),
                opt(row.lambda_max, sig9),
                opt(row.lambda_min, sig9),
            )),
            Err(e) => {
                failures += 1;
                eprintln!("[{kind} seed {seed}] failed: {e}");
                write_file(&dir_of(kind, seed).join("error.txt"), &format!("{e}\n"))?;
                csv.push_str(&format!("{kind},{seed},{optimizer},,,,,,\n"));
            }
        }
    }
    write_file(&cfg.out.join("compare.csv"), &csv)?;
    if failures == runs.len() && !runs.is_empty() {
        return Err(CliError::Runtime("every run failed".into()));
    }
    Ok(())
}

pub fn hessian(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let default = cfg.out.join("best.ckpt");
    let ckpt = checkpoint.unwrap_or(&default);
    if !ckpt.is_file() {
        return Err(CliError::Runtime(format!("checkpoint {} not found", ckpt.display())));
    }
    let (_, test) = load_data(cfg)?;
    let report = hessian_run(cfg, ckpt, cfg.seed, &test, true)?;
    write_file(&cfg.out.join("hessian.json"), &to_json(&HessianJson::from(report)))
}

pub fn varprop(cfg: &ExperimentConfig) -> CliResult<()> {
    let v = &cfg.varprop;
    let mut csv = format!("{CSV_HEADER}\n");
    for &kind in &cfg.compare.schemes {
        let (stack, _) = build_stack(v.depth, v.width, cfg.neuron, cfg.surrogate, &scheme_of(cfg, kind), &RngStream::new(cfg.seed, 0))?;
        let mut rng = RngStream::for_purpose(cfg.seed, purpose::VARPROP, 1);
        let batch = probe_batch(v.batch, v.width, &mut rng)?;
        let report = measure_variances(&stack, &batch, v.time_steps, &mut rng)?;
        write_csv_rows(&mut csv, kind.as_str(), &report);
    }
    write_file(&cfg.out.join("varprop.csv"), &csv)
}

pub fn init_report(cfg: &ExperimentConfig) -> CliResult<()> {
    let train = if cfg.init.calibrate { Some(load_data(cfg)?.0) } else { None };
    let (_, stats) = init_network(cfg, &cfg.init.scheme, cfg.seed, train.as_ref())?;
    write_file(&cfg.out.join("init_report.csv"), &init_report_csv(&stats))
}
