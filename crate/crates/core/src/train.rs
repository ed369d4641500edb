//! Loss, accuracy, optimizers and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{param_err, shape_err, Error, Result};
use crate::network::{Gradients, Mode, Network};
use crate::numerics::rng::purpose;
use crate::numerics::{RngStream, Tensor};

/// Samples per forward call during evaluation.
pub const EVAL_BATCH: usize = 32;

/// Mean squared error against one-hot targets, averaged over all `B·C`
/// elements, and its gradient with respect to the rates.
pub fn mse_loss(rates: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = rates_dims(rates, labels)?;
    let n = (b * c) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (row, &label) in rates.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(param_err(format!("label {label} out of range for {c} classes")));
        }
        for (j, &r) in row.iter().enumerate() {
            let d = r - if j == label { 1.0 } else { 0.0 };
            loss += d * d;
            grad.push(2.0 * d / n);
        }
    }
    Ok((loss / n, Tensor::new(&[b, c], grad)?))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(rates: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = rates_dims(rates, labels)?;
    let correct = rates
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / b as f64)
}

fn rates_dims(rates: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let &[b, c] = rates.shape() else {
        return Err(shape_err(format!("rates must be [B, C], got {:?}", rates.shape())));
    };
    if b != labels.len() {
        return Err(shape_err(format!("{b} rate rows but {} labels", labels.len())));
    }
    Ok((b, c))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self::Sgd { lr: 0.1, momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Self::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    /// `lr = 0` is accepted so that a frozen run can be expressed.
    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(param_err(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        match *self {
            Self::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(param_err(format!("momentum must lie in [0, 1), got {momentum}")))
            }
            Self::Adam { beta1, beta2, eps, .. } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(b > 0.0 && b < 1.0) {
                        return Err(param_err(format!("{name} must lie in (0, 1), got {b}")));
                    }
                }
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(param_err(format!("eps must be > 0, got {eps}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub train_acc: f64,
    pub test_acc: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { train_acc: 0.95, test_acc: 0.91 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(),
            batch_size: 64,
            epochs: 30,
            seed: 0,
            thresholds: Thresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(param_err("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Epochs are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, lr: f64, momentum: f64) -> Result<()> {
    check_lengths(params, grads)?;
    if state.velocity.is_empty() {
        state.velocity = vec![0.0; params.len()];
    }
    check_lengths(params, &state.velocity)?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected Adam; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    check_lengths(params, grads)?;
    if t == 0 {
        return Err(param_err("adam step count starts at 1"));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    check_lengths(params, &state.m)?;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(format!("parameter length {} does not match {}", a.len(), b.len())));
    }
    Ok(())
}

/// Per-tensor optimizer state for a whole network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    sgd: Vec<SgdState>,
    adam: Vec<AdamState>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, sgd: Vec::new(), adam: Vec::new(), steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        self.steps += 1;
        let t = self.steps;
        let config = self.config;
        let (sgd, adam) = (&mut self.sgd, &mut self.adam);
        let mut failure = None;
        net.update_params(grads, |slot, p, g| {
            let r = match config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    if sgd.len() <= slot {
                        sgd.resize_with(slot + 1, SgdState::default);
                    }
                    sgd_step(p, g, &mut sgd[slot], lr, momentum)
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    if adam.len() <= slot {
                        adam.resize_with(slot + 1, AdamState::default);
                    }
                    adam_step(p, g, &mut adam[slot], lr, beta1, beta2, eps, t)
                }
            };
            if let Err(e) = r {
                failure.get_or_insert(e);
            }
        })?;
        failure.map_or(Ok(()), Err)
    }
}

/// Loss and accuracy of the spiking network over a whole dataset.
pub fn evaluate(net: &Network, data: &Dataset, rng: &mut RngStream) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(param_err("cannot evaluate on an empty dataset"));
    }
    let (mut loss, mut correct) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.select(chunk)?;
        let rates = net.predict(batch.images(), rng)?;
        let (l, _) = mse_loss(&rates, batch.labels())?;
        loss += l * chunk.len() as f64;
        correct += accuracy(&rates, batch.labels())? * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct / n))
}

/// Samples per forward/backward call inside a minibatch; keeps activations cache-resident.
pub const GRAD_CHUNK: usize = 16;

/// One BPTT minibatch: loss and gradients of the spiking network.
///
/// The batch is processed in chunks of [`GRAD_CHUNK`] samples whose
/// contributions are summed in order, so the result equals one full-batch pass
/// up to floating-point reassociation.
pub fn batch_gradients(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    rng: &mut RngStream,
) -> Result<(f64, Gradients)> {
    batch_gradients_mode(net, images, labels, Mode::Spiking, rng)
}

pub fn batch_gradients_mode(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(f64, Gradients)> {
    let b = labels.len();
    if images.shape()[0] != b || b == 0 {
        return Err(shape_err(format!("{} images but {b} labels", images.shape()[0])));
    }
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let rows: Vec<usize> = (0..b).collect();
    for chunk in rows.chunks(GRAD_CHUNK) {
        let sub = if chunk.len() == b { images.clone() } else { images.select_rows(chunk)? };
        let sub_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (rates, tape) = net.forward(&sub, mode, rng)?;
        let (l, mut d_rates) = mse_loss(&rates, &sub_labels)?;
        // rescale from the chunk mean to the full-batch mean
        let w = chunk.len() as f64 / b as f64;
        d_rates.data_mut().iter_mut().for_each(|g| *g *= w);
        loss += l * w;
        total.accumulate(&net.backward(&tape, &d_rates)?, 1.0)?;
    }
    Ok((loss, total))
}

/// Trains for `config.epochs` epochs. `on_epoch(net, metrics, improved)` is
/// called after every evaluation; `improved` is set when test accuracy
/// strictly beats every earlier epoch.
pub fn run_training_with(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&Network, &EpochMetrics, bool) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(param_err("training and test sets must be nonempty"));
    }
    let mut opt = Optimizer::new(config.optimizer)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best = f64::NEG_INFINITY;
    for epoch in 1..=config.epochs {
        let mut enc = RngStream::for_purpose(config.seed, purpose::ENCODER, epoch as u64);
        for idx in batches(train.len(), config.batch_size, config.seed, epoch as u64)? {
            let batch = train.select(&idx)?;
            let (loss, grads) = batch_gradients(net, batch.images(), batch.labels(), &mut enc)?;
            if !loss.is_finite() {
                return Err(Error::Parameter(format!("loss diverged in epoch {epoch}")));
            }
            opt.step(net, &grads)?;
        }
        let mut eval_rng = RngStream::for_purpose(config.seed, purpose::ENCODER, (1 << 31) | epoch as u64);
        let (train_loss, train_acc) = evaluate(net, train, &mut eval_rng)?;
        let (test_loss, test_acc) = evaluate(net, test, &mut eval_rng)?;
        let m = EpochMetrics { epoch, train_loss, train_acc, test_loss, test_acc };
        let improved = test_acc > best;
        if improved {
            best = test_acc;
        }
        on_epoch(net, &m, improved)?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// As [`run_training_with`], writing a checkpoint to `checkpoint` whenever
/// test accuracy strictly improves.
pub fn run_training(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    run_training_with(net, train, test, config, &mut |net, _, improved| match (improved, checkpoint) {
        (true, Some(path)) => net.save_checkpoint(path),
        _ => Ok(()),
    })
}

/// First epoch where train and test accuracy both strictly exceed their thresholds.
pub fn scheme1_epoch(metrics: &[EpochMetrics], train_thr: f64, test_thr: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.train_acc > train_thr && m.test_acc > test_thr)
        .map(|m| m.epoch)
}

/// First epoch at which test accuracy exceeds `thr`.
pub fn first_epoch_reaching(metrics: &[EpochMetrics], thr: f64) -> Option<usize> {
    metrics.iter().find(|m| m.test_acc > thr).map(|m| m.epoch)
}

/// Epoch of peak test accuracy, earliest on ties.
pub fn scheme2_best(metrics: &[EpochMetrics]) -> Result<(usize, f64)> {
    let first = metrics.first().ok_or_else(|| param_err("no epochs recorded"))?;
    let best = metrics.iter().fold(first, |b, m| if m.test_acc > b.test_acc { m } else { b });
    Ok((best.epoch, best.test_acc))
}

/// Formats a real with 9 significant digits.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{v:.8e}");
    let x: f64 = s.parse().expect("round trip of formatted float");
    let magnitude = x.abs().log10().floor() as i32;
    if (-5..15).contains(&magnitude) {
        let decimals = (8 - magnitude).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        s
    }
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch,
            sig9(m.train_loss),
            sig9(m.train_acc),
            sig9(m.test_loss),
            sig9(m.test_acc)
        );
    }
    out
}
