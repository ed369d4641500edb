//! Time-unrolled forward pass and backpropagation through time.

use super::{Encoder, LayerParams, LayerSpec, Network};
use crate::error::{param_err, shape_err, Error, Result};
use crate::neuron::{NeuronSpec, SurrogateSpec};
use crate::numerics::{
    conv2d, conv2d_backward, dense, dense_backward, pool2d_backward, pool2d_forward, PoolTrace, RngStream, Tensor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Heaviside spikes forward, surrogate derivative backward, reset detached.
    #[default]
    Spiking,
    /// Spike layers emit `surrogate_value(h - v_threshold)` and the reset is
    /// kept in the graph, so backward is the exact gradient of a smooth map.
    Relaxed,
}

/// Expands a batch into `time_steps` input frames.
pub fn encode_input(images: &Tensor, time_steps: usize, encoder: Encoder, rng: &mut RngStream) -> Result<Vec<Tensor>> {
    if time_steps == 0 {
        return Err(param_err("time_steps must be >= 1"));
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(param_err(format!("encoder inputs must lie in [0, 1], found {v}")));
    }
    Ok(match encoder {
        Encoder::ConstantCurrent => vec![images.clone(); time_steps],
        Encoder::PoissonRate => (0..time_steps)
            .map(|_| images.map(|p| if rng.bernoulli(p) { 1.0 } else { 0.0 }))
            .collect(),
    })
}

#[derive(Clone, Debug)]
enum Record {
    Conv { input: Tensor },
    Dense { input: Tensor },
    Pool(PoolTrace),
    Flatten { input_shape: Vec<usize> },
    Spike { h: Tensor, s: Tensor },
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct Tape {
    stamp: (u64, u64),
    mode: Mode,
    batch: usize,
    /// Every frame carried the same input, so layer 0 saw one input throughout.
    shared_input: bool,
    steps: Vec<Vec<Record>>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }

    /// Membrane pre-activation `h` of spike layer `layer` at every step.
    pub fn pre_activations(&self, layer: usize) -> Vec<&Tensor> {
        self.steps
            .iter()
            .filter_map(|step| match step.get(layer) {
                Some(Record::Spike { h, .. }) => Some(h),
                _ => None,
            })
            .collect()
    }

    /// Spike outputs of spike layer `layer` at every step.
    pub fn spikes(&self, layer: usize) -> Vec<&Tensor> {
        self.steps
            .iter()
            .filter_map(|step| match step.get(layer) {
                Some(Record::Spike { s, .. }) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Inputs seen by parametric layer `layer` at every step.
    pub fn layer_inputs(&self, layer: usize) -> Vec<&Tensor> {
        self.steps
            .iter()
            .filter_map(|step| match step.get(layer) {
                Some(Record::Conv { input }) | Some(Record::Dense { input }) => Some(input),
                _ => None,
            })
            .collect()
    }
}

/// Parameter gradients laid out like [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .params()
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.layers.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err("gradient layouts differ"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in [(&mut a.weight, &b.weight), (&mut a.bias, &b.bias)] {
                        if x.shape() != y.shape() {
                            return Err(shape_err("gradient layouts differ"));
                        }
                        for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                            *u += scale * v;
                        }
                    }
                }
                (None, None) => {}
                _ => return Err(shape_err("gradient layouts differ")),
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct SpikeStep<'a> {
    neuron: &'a NeuronSpec,
    surrogate: &'a SurrogateSpec,
    mode: Mode,
}

impl SpikeStep<'_> {
    /// Advances the membrane in place; returns `(h, s)`.
    fn forward(&self, v: &mut [f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (leak, scale, vth) = (self.neuron.leak(), self.neuron.input_scale(), self.neuron.v_threshold);
        let h: Vec<f64> = v.iter().zip(input).map(|(&vm, &x)| leak * vm + scale * x).collect();
        let s: Vec<f64> = match self.mode {
            Mode::Spiking => h.iter().map(|&hv| if hv >= vth { 1.0 } else { 0.0 }).collect(),
            Mode::Relaxed => h.iter().map(|&hv| self.surrogate.value(hv - vth)).collect(),
        };
        for ((vm, &hv), &sv) in v.iter_mut().zip(&h).zip(&s) {
            *vm = self.neuron.reset_value(hv, sv);
        }
        (h, s)
    }

    /// Turns `grad` (dL/ds) into dL/d(input) in place and updates the
    /// membrane carry `dv` (dL/dv[t] on entry, dL/dv[t-1] on exit).
    fn backward(&self, h: &[f64], s: &[f64], grad: &mut [f64], dv: &mut [f64]) {
        let (leak, scale, vth) = (self.neuron.leak(), self.neuron.input_scale(), self.neuron.v_threshold);
        let relaxed = self.mode == Mode::Relaxed;
        for i in 0..grad.len() {
            let sg = self.surrogate.grad(h[i] - vth);
            let (dv_dh, dv_ds) = self.neuron.reset_partials(h[i], s[i]);
            let mut dh = grad[i] * sg + dv[i] * dv_dh;
            if relaxed {
                dh += dv[i] * dv_ds * sg;
            }
            dv[i] = leak * dh;
            grad[i] = scale * dh;
        }
    }
}

fn batched(shape: &[usize], batch: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

impl Network {
    /// Encodes `images` with the configured encoder and runs [`Self::forward_frames`].
    pub fn forward(&self, images: &Tensor, mode: Mode, rng: &mut RngStream) -> Result<(Tensor, Tape)> {
        let frames = encode_input(images, self.spec.time_steps, self.spec.encoder, rng)?;
        self.forward_frames(&frames, mode)
    }

    /// Spiking forward pass without a tape.
    pub fn predict(&self, images: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        let frames = encode_input(images, self.spec.time_steps, self.spec.encoder, rng)?;
        self.run(&frames, Mode::Spiking, false).map(|(r, _)| r)
    }

    /// Runs pre-encoded frames (one per time step) through the network and
    /// returns firing rates `[B, classes]` plus the tape.
    pub fn forward_frames(&self, frames: &[Tensor], mode: Mode) -> Result<(Tensor, Tape)> {
        let (rates, tape) = self.run(frames, mode, true)?;
        Ok((rates, tape.expect("tape requested")))
    }

    fn run(&self, frames: &[Tensor], mode: Mode, record: bool) -> Result<(Tensor, Option<Tape>)> {
        let t_steps = self.spec.time_steps;
        if frames.len() != t_steps {
            return Err(shape_err(format!("expected {t_steps} frames, got {}", frames.len())));
        }
        let batch = frames[0].shape()[0];
        let expected = batched(&self.spec.input_shape, batch);
        for f in frames {
            if f.shape() != expected.as_slice() {
                return Err(shape_err(format!(
                    "input frame {:?} does not match network input {:?}",
                    f.shape(),
                    expected
                )));
            }
        }
        let layers = &self.spec.layers;
        let mut membranes: Vec<Option<Vec<f64>>> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                matches!(l, LayerSpec::Spike { .. }).then(|| vec![0.0; batch * self.shapes[i + 1].iter().product::<usize>()])
            })
            .collect();
        let out_shape = batched(self.shapes.last().unwrap(), batch);
        let mut acc = vec![0.0; out_shape.iter().product()];
        let mut steps = Vec::with_capacity(if record { t_steps } else { 0 });
        let shared_input = frames.iter().all(|f| f.data() == frames[0].data());
        let mut first_out: Option<Tensor> = None;

        for frame in frames {
            let mut x = frame.clone();
            let mut recs = Vec::with_capacity(if record { layers.len() } else { 0 });
            for (i, layer) in layers.iter().enumerate() {
                if i == 0 && shared_input && layer.is_parametric() {
                    if let Some(y) = &first_out {
                        let rec = match layer {
                            LayerSpec::Conv { .. } => Record::Conv { input: x },
                            _ => Record::Dense { input: x },
                        };
                        if record {
                            recs.push(rec);
                        }
                        x = y.clone();
                        continue;
                    }
                }
                let (next, rec) = match layer {
                    LayerSpec::Conv { stride, pad, .. } => {
                        let p = self.params[i].as_ref().unwrap();
                        let y = conv2d(&x, &p.weight, &p.bias, *stride, *pad)?;
                        (y, record.then(|| Record::Conv { input: x }))
                    }
                    LayerSpec::Dense { .. } => {
                        let p = self.params[i].as_ref().unwrap();
                        let y = dense(&x, &p.weight, &p.bias)?;
                        (y, record.then(|| Record::Dense { input: x }))
                    }
                    LayerSpec::Pool { kind, size } => {
                        let (y, trace) = pool2d_forward(&x, *kind, *size)?;
                        (y, record.then_some(Record::Pool(trace)))
                    }
                    LayerSpec::Flatten => {
                        let input_shape = x.shape().to_vec();
                        let y = x.reshape(&batched(&self.shapes[i + 1], batch))?;
                        (y, record.then_some(Record::Flatten { input_shape }))
                    }
                    LayerSpec::Spike { neuron, surrogate } => {
                        let step = SpikeStep { neuron, surrogate, mode };
                        let v = membranes[i].as_mut().unwrap();
                        let (h, s) = step.forward(v, x.data());
                        let shape = x.shape().to_vec();
                        let rec = record.then(|| Record::Spike {
                            h: Tensor::from_parts(shape.clone(), h),
                            s: Tensor::from_parts(shape.clone(), s.clone()),
                        });
                        (Tensor::from_parts(shape, s), rec)
                    }
                };
                if let Some(r) = rec {
                    recs.push(r);
                }
                if i == 0 && shared_input && layer.is_parametric() {
                    first_out = Some(next.clone());
                }
                x = next;
            }
            for (a, v) in acc.iter_mut().zip(x.data()) {
                *a += v;
            }
            if record {
                steps.push(recs);
            }
        }
        let inv_t = 1.0 / t_steps as f64;
        acc.iter_mut().for_each(|a| *a *= inv_t);
        let rates = Tensor::from_parts(out_shape, acc);
        let tape = record.then(|| Tape { stamp: self.stamp(), mode, batch, shared_input, steps });
        Ok((rates, tape))
    }

    /// Backpropagation through time from `d_rates = dL/d(rates)`.
    pub fn backward(&self, tape: &Tape, d_rates: &Tensor) -> Result<Gradients> {
        self.backward_inspect(tape, d_rates, &mut |_, _, _| {})
    }

    /// As [`Self::backward`], additionally calling `inspect(layer, t, dL/dinput)`
    /// for every parametric layer at every time step.
    pub fn backward_inspect(
        &self,
        tape: &Tape,
        d_rates: &Tensor,
        inspect: &mut dyn FnMut(usize, usize, &Tensor),
    ) -> Result<Gradients> {
        self.backward_impl(tape, d_rates, Some(inspect))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        d_rates: &Tensor,
        mut inspect: Option<&mut dyn FnMut(usize, usize, &Tensor)>,
    ) -> Result<Gradients> {
        if tape.stamp != self.stamp() {
            return Err(Error::Usage(
                "tape was recorded against a different network or older parameters".into(),
            ));
        }
        if tape.steps.len() != self.spec.time_steps {
            return Err(Error::Usage("tape length does not match the network's time steps".into()));
        }
        let out_shape = batched(self.shapes.last().unwrap(), tape.batch);
        if d_rates.shape() != out_shape.as_slice() {
            return Err(shape_err(format!(
                "rate gradient {:?} does not match output {:?}",
                d_rates.shape(),
                out_shape
            )));
        }
        let layers = &self.spec.layers;
        let first_param = layers.iter().position(|l| l.is_parametric());
        let mut grads = Gradients::zeros_like(self);
        let Some(first_param) = first_param else {
            return Ok(grads);
        };
        let inspecting = inspect.is_some();
        let mut carries: Vec<Option<Vec<f64>>> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                matches!(l, LayerSpec::Spike { .. })
                    .then(|| vec![0.0; tape.batch * self.shapes[i + 1].iter().product::<usize>()])
            })
            .collect();
        let inv_t = 1.0 / self.spec.time_steps as f64;
        let d_out = d_rates.map(|g| g * inv_t);

        // With a shared input and no input gradient wanted, layer 0's weight
        // gradient is linear in its upstream gradient: sum over time first.
        let defer_first = first_param == 0 && tape.shared_input && !inspecting;
        let mut deferred: Option<Tensor> = None;

        for t in (0..tape.steps.len()).rev() {
            let recs = &tape.steps[t];
            let mut g = d_out.clone();
            for i in (first_param..layers.len()).rev() {
                let need_input = i > first_param || inspecting;
                if i == 0 && defer_first {
                    match deferred.as_mut() {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v),
                        None => deferred = Some(g),
                    }
                    break;
                }
                g = match (&layers[i], &recs[i]) {
                    (LayerSpec::Conv { stride, pad, .. }, Record::Conv { input }) => {
                        let p = self.params[i].as_ref().unwrap();
                        let cg = conv2d_backward(input, &p.weight, &g, *stride, *pad, need_input)?;
                        add_into(grads.layers[i].as_mut().unwrap(), &cg.kernel, &cg.bias);
                        match cg.input {
                            Some(gx) => {
                                if let Some(f) = inspect.as_mut() {
                                    f(i, t, &gx);
                                }
                                gx
                            }
                            None => break,
                        }
                    }
                    (LayerSpec::Dense { .. }, Record::Dense { input }) => {
                        let p = self.params[i].as_ref().unwrap();
                        let dg = dense_backward(input, &p.weight, &g, need_input)?;
                        add_into(grads.layers[i].as_mut().unwrap(), &dg.weight, &dg.bias);
                        match dg.input {
                            Some(gx) => {
                                if let Some(f) = inspect.as_mut() {
                                    f(i, t, &gx);
                                }
                                gx
                            }
                            None => break,
                        }
                    }
                    (LayerSpec::Pool { .. }, Record::Pool(trace)) => pool2d_backward(trace, &g)?,
                    (LayerSpec::Flatten, Record::Flatten { input_shape }) => g.reshape(input_shape)?,
                    (LayerSpec::Spike { neuron, surrogate }, Record::Spike { h, s }) => {
                        let step = SpikeStep { neuron, surrogate, mode: tape.mode };
                        let dv = carries[i].as_mut().unwrap();
                        step.backward(h.data(), s.data(), g.data_mut(), dv);
                        g
                    }
                    _ => return Err(Error::Usage(format!("tape record for layer {i} does not match the network"))),
                };
            }
        }
        if let Some(g) = deferred {
            let p = self.params[0].as_ref().unwrap();
            match (&layers[0], &tape.steps[0][0]) {
                (LayerSpec::Conv { stride, pad, .. }, Record::Conv { input }) => {
                    let cg = conv2d_backward(input, &p.weight, &g, *stride, *pad, false)?;
                    add_into(grads.layers[0].as_mut().unwrap(), &cg.kernel, &cg.bias);
                }
                (LayerSpec::Dense { .. }, Record::Dense { input }) => {
                    let dg = dense_backward(input, &p.weight, &g, false)?;
                    add_into(grads.layers[0].as_mut().unwrap(), &dg.weight, &dg.bias);
                }
                _ => return Err(Error::Usage("tape record for layer 0 does not match the network".into())),
            }
        }
        Ok(grads)
    }
}

fn add_into(dst: &mut LayerParams, dw: &Tensor, db: &Tensor) {
    for (a, b) in dst.weight.data_mut().iter_mut().zip(dw.data()) {
        *a += b;
    }
    for (a, b) in dst.bias.data_mut().iter_mut().zip(db.data()) {
        *a += b;
    }
}
