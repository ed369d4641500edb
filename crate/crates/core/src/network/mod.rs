//! Layer graph, parameters and the time-unrolled spiking network.

mod checkpoint;
mod graph;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};
pub use graph::{encode_input, Gradients, Mode, Tape};

use crate::error::{param_err, shape_err, Error, Result};
use crate::neuron::{NeuronSpec, SurrogateSpec};
use crate::numerics::{conv_out_len, PoolKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        kind: PoolKind,
        size: usize,
    },
    Dense {
        n_in: usize,
        n_out: usize,
    },
    Spike {
        neuron: NeuronSpec,
        surrogate: SurrogateSpec,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Spike { .. } => "spike",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Weight and bias shapes of a parametric layer.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv { c_in, c_out, kernel, .. } => Some((vec![c_out, c_in, kernel, kernel], vec![c_out])),
            LayerSpec::Dense { n_in, n_out } => Some((vec![n_out, n_in], vec![n_out])),
            _ => None,
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || {
            shape_err(format!(
                "{} layer {:?} cannot consume per-sample input of shape {input:?}",
                self.name(),
                self
            ))
        };
        match *self {
            LayerSpec::Conv { c_in, c_out, kernel, stride, pad } => {
                if input.len() != 3 || input[0] != c_in {
                    return Err(mismatch());
                }
                let oh = conv_out_len(input[1], kernel, stride, pad).ok_or_else(mismatch)?;
                let ow = conv_out_len(input[2], kernel, stride, pad).ok_or_else(mismatch)?;
                Ok(vec![c_out, oh, ow])
            }
            LayerSpec::Pool { size, .. } => {
                if input.len() != 3 || size == 0 || input[1] % size != 0 || input[2] % size != 0 {
                    return Err(mismatch());
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Dense { n_in, n_out } => {
                if input.len() != 1 || input[0] != n_in {
                    return Err(mismatch());
                }
                Ok(vec![n_out])
            }
            LayerSpec::Spike { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// Every frame equals the input.
    #[default]
    ConstantCurrent,
    /// Each frame entry is an independent Bernoulli draw with the pixel as probability.
    PoissonRate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// Output spike count divided by the number of time steps.
    #[default]
    FiringRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub time_steps: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Shape of one input sample, without the batch axis.
    pub input_shape: Vec<usize>,
}

impl NetworkSpec {
    /// Two-stage convolutional SNN for 28×28 single-channel images:
    /// conv(1→c1) → spike → maxpool2 → conv(c1→c2) → spike → maxpool2 →
    /// flatten → dense(c2·7·7 → classes) → spike.
    pub fn conv_default(neuron: NeuronSpec, surrogate: SurrogateSpec) -> Self {
        Self::conv_with_channels(8, 16, 10, neuron, surrogate)
    }

    pub fn conv_with_channels(c1: usize, c2: usize, classes: usize, neuron: NeuronSpec, surrogate: SurrogateSpec) -> Self {
        let spike = LayerSpec::Spike { neuron, surrogate };
        let pool = LayerSpec::Pool { kind: PoolKind::Max, size: 2 };
        Self {
            layers: vec![
                LayerSpec::Conv { c_in: 1, c_out: c1, kernel: 3, stride: 1, pad: 1 },
                spike,
                pool,
                LayerSpec::Conv { c_in: c1, c_out: c2, kernel: 3, stride: 1, pad: 1 },
                spike,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Dense { n_in: c2 * 7 * 7, n_out: classes },
                spike,
            ],
            time_steps: 4,
            encoder: Encoder::ConstantCurrent,
            decoder: Decoder::FiringRate,
            input_shape: vec![1, 28, 28],
        }
    }

    /// Fully connected stack: (dense(width→width) → spike) × depth.
    pub fn dense_stack(depth: usize, width: usize, neuron: NeuronSpec, surrogate: SurrogateSpec, time_steps: usize) -> Self {
        let mut layers = Vec::with_capacity(2 * depth);
        for _ in 0..depth {
            layers.push(LayerSpec::Dense { n_in: width, n_out: width });
            layers.push(LayerSpec::Spike { neuron, surrogate });
        }
        Self {
            layers,
            time_steps,
            encoder: Encoder::ConstantCurrent,
            decoder: Decoder::FiringRate,
            input_shape: vec![width],
        }
    }

    /// Per-sample shapes: entry 0 is the input, entry `i + 1` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.time_steps == 0 {
            return Err(param_err("time_steps must be >= 1"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(shape_err(format!("invalid input shape {:?}", self.input_shape)));
        }
        if !self.layers.iter().any(|l| matches!(l, LayerSpec::Spike { .. })) {
            return Err(param_err("a network needs at least one spike layer"));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Spike { neuron, surrogate } = layer {
                neuron.validate()?;
                surrogate.validate()?;
            }
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| shape_err(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        if shapes.last().unwrap().len() != 1 {
            return Err(shape_err(format!(
                "final layer must produce a class vector, got per-sample shape {:?}",
                shapes.last().unwrap()
            )));
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap()[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// An instantiated network. Every mutation bumps `version`, which lets
/// [`Network::backward`] reject tapes recorded against older parameters.
#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams>>,
    id: u64,
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl Network {
    /// Network with all parameters zero.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let params = spec
            .layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(w, b)| LayerParams { weight: Tensor::zeros(&w), bias: Tensor::zeros(&b) })
            })
            .collect();
        Ok(Self { spec, shapes, params, id: fresh_id(), version: 0 })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams> {
        self.params.get(layer).and_then(|p| p.as_ref())
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.version += 1;
        self.params.get_mut(layer).and_then(|p| p.as_mut())
    }

    pub fn parametric_layers(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].is_some()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Weights then bias of every parametric layer, in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape_err(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        self.version += 1;
        let mut off = 0;
        for p in self.params.iter_mut().flatten() {
            for t in [&mut p.weight, &mut p.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Applies `f(params, grads)` to every parameter tensor pair, in flat order.
    pub fn update_params(&mut self, grads: &Gradients, mut f: impl FnMut(usize, &mut [f64], &[f64])) -> Result<()> {
        if grads.layers.len() != self.params.len() {
            return Err(shape_err("gradient layout does not match network"));
        }
        self.version += 1;
        let mut slot = 0;
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            match (p, g) {
                (Some(p), Some(g)) => {
                    if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                        return Err(shape_err(format!(
                            "gradient shapes {:?}/{:?} do not match parameters {:?}/{:?}",
                            g.weight.shape(),
                            g.bias.shape(),
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                    f(slot, p.weight.data_mut(), g.weight.data());
                    f(slot + 1, p.bias.data_mut(), g.bias.data());
                    slot += 2;
                }
                (None, None) => {}
                _ => return Err(shape_err("gradient layout does not match network")),
            }
        }
        Ok(())
    }

    pub fn spike_layers(&self) -> Vec<usize> {
        (0..self.spec.layers.len())
            .filter(|&i| matches!(self.spec.layers[i], LayerSpec::Spike { .. }))
            .collect()
    }

    pub fn threshold(&self, layer: usize) -> Option<f64> {
        match self.spec.layers.get(layer) {
            Some(LayerSpec::Spike { neuron, .. }) => Some(neuron.v_threshold),
            _ => None,
        }
    }

    pub fn set_threshold(&mut self, layer: usize, v_threshold: f64) -> Result<()> {
        if v_threshold.is_nan() {
            return Err(param_err("threshold must not be NaN"));
        }
        match self.spec.layers.get_mut(layer) {
            Some(LayerSpec::Spike { neuron, .. }) => {
                neuron.v_threshold = v_threshold;
                self.version += 1;
                Ok(())
            }
            _ => Err(Error::Usage(format!("layer {layer} is not a spike layer"))),
        }
    }

    /// Sets the surrogate of every spike layer.
    pub fn set_surrogate(&mut self, surrogate: SurrogateSpec) {
        for layer in &mut self.spec.layers {
            if let LayerSpec::Spike { surrogate: s, .. } = layer {
                *s = surrogate;
            }
        }
        self.version += 1;
    }

    pub fn set_time_steps(&mut self, time_steps: usize) -> Result<()> {
        if time_steps == 0 {
            return Err(param_err("time_steps must be >= 1"));
        }
        self.spec.time_steps = time_steps;
        self.version += 1;
        Ok(())
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }
}
