//! Steps shared by the subcommands: data, network construction, one
//! training run and one curvature analysis.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use spikelab::data::{load_fashion_mnist, subset, synthetic_dataset, Dataset};
use spikelab::hessian::{analyze, evaluation_batch, HessianReport, NetworkOracle};
use spikelab::init::{initialize_network, CalibrationStats, InitScheme};
use spikelab::numerics::rng::purpose;
use spikelab::numerics::RngStream;
use spikelab::train::{metrics_csv, run_training_with, scheme1_epoch, scheme2_best, sig9, EpochMetrics};
use spikelab::{Network, NetworkSpec};

use crate::config::{ConfigError, DataSource, ExperimentConfig};

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// Data, numerics or I/O: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<spikelab::Error> for CliError {
    fn from(e: spikelab::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Train and test sets as configured.
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => Ok((
            synthetic_dataset(d.train_size, d.subset_seed)?,
            synthetic_dataset(d.test_size, d.subset_seed.wrapping_add(1))?,
        )),
        DataSource::FashionMnist => {
            if !d.dir.is_dir() {
                return Err(CliError::Runtime(format!(
                    "dataset directory {} not found; run scripts/fetch_fashion_mnist.py or set data.dir",
                    d.dir.display()
                )));
            }
            let (train, test) = load_fashion_mnist(&d.dir)
                .map_err(|e| CliError::Runtime(format!("cannot load dataset from {}: {e}", d.dir.display())))?;
            let train = subset(&train, d.train_size.min(train.len()), d.subset_seed)?;
            let test = subset(&test, d.test_size.min(test.len()), d.subset_seed)?;
            Ok((train, test))
        }
    }
}

pub fn network_spec(cfg: &ExperimentConfig) -> NetworkSpec {
    let mut spec =
        NetworkSpec::conv_with_channels(cfg.net.conv1_channels, cfg.net.conv2_channels, 10, cfg.neuron, cfg.surrogate);
    spec.time_steps = cfg.net.time_steps;
    spec.encoder = cfg.net.encoder;
    spec
}

/// Builds and initializes the configured network. With `calibration_source`
/// the initializer measures a stratified batch drawn from it.
pub fn init_network(
    cfg: &ExperimentConfig,
    scheme: &InitScheme,
    seed: u64,
    calibration_source: Option<&Dataset>,
) -> CliResult<(Network, Vec<CalibrationStats>)> {
    let mut net = Network::new(network_spec(cfg))?;
    let batch = match calibration_source {
        Some(train) => {
            let n = cfg.init.calibration_size.min(train.len());
            Some(subset(train, n, seed ^ (purpose::CALIBRATION << 32))?.images().clone())
        }
        None => None,
    };
    let stats = initialize_network(&mut net, scheme, &cfg.surrogate, batch.as_ref(), &RngStream::new(seed, 0))?;
    Ok((net, stats))
}

pub const INIT_REPORT_HEADER: &str = "layer,fan_in,fan_out,sigma_w,sigma_x2,mu_h,ef2,v_threshold";

pub fn init_report_csv(stats: &[CalibrationStats]) -> String {
    let mut out = format!("{INIT_REPORT_HEADER}\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.layer,
            s.fan_in,
            s.fan_out,
            sig9(s.sigma_w),
            sig9(s.sigma_x2),
            sig9(s.mu_h),
            sig9(s.ef2),
            s.v_threshold.map(sig9).unwrap_or_default()
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub scheme: String,
    pub seed: u64,
    pub optimizer: String,
    pub epochs: usize,
    pub param_count: usize,
    pub scheme1_epoch: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_test_acc: Option<f64>,
}

pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
    pub init_report: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("best.ckpt"),
            summary: dir.join("summary.json"),
            init_report: dir.join("init_report.csv"),
        }
    }
}

/// Initializes and trains one network, writing metrics, the best checkpoint
/// and a summary into `dir`.
pub fn train_run(
    cfg: &ExperimentConfig,
    scheme: &InitScheme,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    dir: &Path,
    label: &str,
) -> CliResult<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let paths = RunPaths::in_dir(dir);
    let calibration = cfg.init.calibrate.then_some(train);
    let (mut net, stats) = init_network(cfg, scheme, seed, calibration)?;
    write_file(&paths.init_report, &init_report_csv(&stats))?;

    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut seen: Vec<EpochMetrics> = Vec::new();
    let metrics = run_training_with(&mut net, train, test, &tc, &mut |net, m, improved| {
        seen.push(*m);
        eprintln!(
            "[{label}] epoch {}: train_acc {:.4} test_acc {:.4} train_loss {:.5}",
            m.epoch, m.train_acc, m.test_acc, m.train_loss
        );
        if improved {
            net.save_checkpoint(&paths.checkpoint)?;
        }
        fs::write(&paths.metrics, metrics_csv(&seen))?;
        Ok(())
    })?;
    write_file(&paths.metrics, &metrics_csv(&metrics))?;

    let best = scheme2_best(&metrics).ok();
    let summary = RunSummary {
        scheme: scheme.kind.to_string(),
        seed,
        optimizer: tc.optimizer.name().to_string(),
        epochs: tc.epochs,
        param_count: net.param_count(),
        scheme1_epoch: scheme1_epoch(&metrics, tc.thresholds.train_acc, tc.thresholds.test_acc),
        best_epoch: best.map(|b| b.0),
        best_test_acc: best.map(|b| b.1),
    };
    write_file(&paths.summary, &to_json(&summary))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityPoint {
    pub node: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HessianJson {
    pub trace: f64,
    pub trace_stderr: f64,
    pub top_eigenvalues: Vec<f64>,
    pub density: Vec<DensityPoint>,
    pub param_count: usize,
    pub n_probes: usize,
}

impl From<HessianReport> for HessianJson {
    fn from(r: HessianReport) -> Self {
        Self {
            trace: r.trace_estimate,
            trace_stderr: r.trace_stderr,
            top_eigenvalues: r.top_eigenvalues,
            density: r
                .density_nodes
                .iter()
                .zip(&r.density_weights)
                .map(|(&node, &weight)| DensityPoint { node, weight })
                .collect(),
            param_count: r.param_count,
            n_probes: r.n_probes,
        }
    }
}

/// Curvature of the configured network at `checkpoint` on the fixed
/// evaluation batch drawn from `test`.
pub fn hessian_run(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    test: &Dataset,
    with_density: bool,
) -> CliResult<HessianReport> {
    let mut net = Network::new(network_spec(cfg))?;
    net.load_checkpoint(checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let batch = evaluation_batch(test, seed)?;
    let mut oracle = NetworkOracle::new(&net, batch, cfg.hessian.mode, seed)?;
    let theta = oracle.theta();
    Ok(analyze(&mut oracle, &theta, &cfg.hessian.settings, with_density, seed)?)
}
