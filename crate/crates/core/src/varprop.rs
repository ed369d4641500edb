//! Layerwise signal and gradient variance in deep random spiking stacks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::init::{initialize_network, CalibrationStats, InitScheme};
use crate::network::{LayerSpec, Mode, Network, NetworkSpec};
use crate::neuron::{NeuronSpec, SurrogateSpec};
use crate::numerics::rng::purpose;
use crate::numerics::{sample_gaussian, RngStream, Tensor};
use crate::train::sig9;

pub const DEFAULT_STEPS: usize = 8;
pub const MIN_BATCH: usize = 256;
pub const CALIBRATION_BATCH: usize = 256;

/// `depth` repetitions of Dense(width → width) → Spike, initialized with
/// `scheme`. IKUN kinds are calibrated on a standard-normal batch.
pub fn build_stack(
    depth: usize,
    width: usize,
    neuron: NeuronSpec,
    surrogate: SurrogateSpec,
    scheme: &InitScheme,
    rng: &RngStream,
) -> Result<(Network, Vec<CalibrationStats>)> {
    if depth < 2 || width < 2 {
        return Err(param_err(format!("stack needs depth >= 2 and width >= 2, got {depth} and {width}")));
    }
    let spec = NetworkSpec::dense_stack(depth, width, neuron, surrogate, DEFAULT_STEPS);
    let mut net = Network::new(spec)?;
    let calibration = if scheme.kind.is_ikun() {
        let mut crng = rng.fork(purpose::VARPROP);
        Some(sample_gaussian(&mut crng, &[CALIBRATION_BATCH, width], 0.0, 1.0)?)
    } else {
        None
    };
    let stats = initialize_network(&mut net, scheme, &surrogate, calibration.as_ref(), rng)?;
    Ok((net, stats))
}

/// Standard-normal probe batch `[b, width]` for [`measure_variances`].
pub fn probe_batch(b: usize, width: usize, rng: &mut RngStream) -> Result<Tensor> {
    sample_gaussian(rng, &[b, width], 0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVariance {
    /// 1-based depth of the Dense → Spike block.
    pub layer: usize,
    /// Variance of the spike layer's pre-activation h, pooled over batch, units and time.
    pub forward_var: f64,
    /// Variance of dL/d(input) of the block's dense layer, pooled likewise.
    pub backward_var: f64,
    /// `forward_var / forward_var` of block 1.
    pub ratio_forward: f64,
    /// `backward_var / backward_var` of the deepest block, where the gradient enters.
    pub ratio_backward: f64,
    /// Variance of the emitted spikes, for context.
    pub spike_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub layers: Vec<LayerVariance>,
}

fn pooled_variance<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    let (mut n, mut s, mut ss) = (0usize, 0.0, 0.0);
    for t in tensors {
        for &v in t.data() {
            n += 1;
            s += v;
            ss += v * v;
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mean = s / n as f64;
    (ss / n as f64 - mean * mean).max(0.0)
}

/// Ratio that reads 0 when the reference is 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Spiking forward pass over `time_steps` constant frames of `batch`, then
/// BPTT from a unit-variance Gaussian gradient injected at the output rates.
pub fn measure_variances(stack: &Network, batch: &Tensor, time_steps: usize, rng: &mut RngStream) -> Result<VarianceReport> {
    let b = batch.shape()[0];
    if b < MIN_BATCH {
        return Err(param_err(format!("variance measurement needs a batch of at least {MIN_BATCH}, got {b}")));
    }
    let mut net = stack.clone();
    net.set_time_steps(time_steps)?;
    let frames = vec![batch.clone(); time_steps];
    let (rates, tape) = net.forward_frames(&frames, Mode::Spiking)?;
    let upstream = sample_gaussian(rng, rates.shape(), 0.0, 1.0)?;

    let layers = &net.spec().layers;
    let dense: Vec<usize> = net.parametric_layers();
    let spike_of = |l: usize| -> Option<usize> {
        layers[l + 1..]
            .iter()
            .position(|ly| matches!(ly, LayerSpec::Spike { .. }))
            .map(|off| l + 1 + off)
    };
    let mut grad_moments = vec![(0usize, 0.0f64, 0.0f64); layers.len()];
    net.backward_inspect(&tape, &upstream, &mut |layer, _, g| {
        let m = &mut grad_moments[layer];
        for &v in g.data() {
            m.0 += 1;
            m.1 += v;
            m.2 += v * v;
        }
    })?;
    let grad_var = |layer: usize| {
        let (n, s, ss) = grad_moments[layer];
        if n == 0 {
            return 0.0;
        }
        let mean = s / n as f64;
        (ss / n as f64 - mean * mean).max(0.0)
    };

    let mut out = Vec::with_capacity(dense.len());
    for (i, &l) in dense.iter().enumerate() {
        let (forward_var, spike_var) = match spike_of(l) {
            Some(s) => (pooled_variance(tape.pre_activations(s)), pooled_variance(tape.spikes(s))),
            None => (0.0, 0.0),
        };
        out.push(LayerVariance {
            layer: i + 1,
            forward_var,
            backward_var: grad_var(l),
            ratio_forward: 0.0,
            ratio_backward: 0.0,
            spike_var,
        });
    }
    let f0 = out.first().map_or(0.0, |r| r.forward_var);
    let bl = out.last().map_or(0.0, |r| r.backward_var);
    for r in &mut out {
        r.ratio_forward = ratio(r.forward_var, f0);
        r.ratio_backward = ratio(r.backward_var, bl);
    }
    Ok(VarianceReport { layers: out })
}

pub const CSV_HEADER: &str = "scheme,layer,forward_var,backward_var,ratio_forward,ratio_backward";

/// Appends one CSV row per layer, without the header.
pub fn write_csv_rows(out: &mut String, scheme: &str, report: &VarianceReport) {
    for r in &report.layers {
        let _ = writeln!(
            out,
            "{scheme},{},{},{},{},{}",
            r.layer,
            sig9(r.forward_var),
            sig9(r.backward_var),
            sig9(r.ratio_forward),
            sig9(r.ratio_backward)
        );
    }
}
