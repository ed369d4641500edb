//! Integrate-and-fire membrane dynamics and the surrogate-gradient family.
//!
//! One discrete step of a spiking layer is
//!
//! ```text
//! h[t] = leak · v[t-1] + input_scale · I[t]
//! s[t] = 1[h[t] >= v_threshold]
//! v[t] = reset(h[t], s[t])
//! ```
//!
//! with `leak = 1` for IF and `1 - 1/tau` for LIF. During backpropagation the
//! Heaviside derivative is replaced by the surrogate derivative evaluated at
//! `h - v_threshold`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronModel {
    If,
    Lif,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    /// Membrane set to `v_reset` after a spike.
    Hard,
    /// Threshold subtracted from the membrane after a spike.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronSpec {
    pub model: NeuronModel,
    /// Membrane time constant, LIF only.
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub reset: ResetMode,
    pub dt: f64,
    pub capacitance: f64,
}

impl Default for NeuronSpec {
    fn default() -> Self {
        Self {
            model: NeuronModel::Lif,
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            reset: ResetMode::Hard,
            dt: 1.0,
            capacitance: 1.0,
        }
    }
}

impl NeuronSpec {
    pub fn integrate_and_fire() -> Self {
        Self { model: NeuronModel::If, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == NeuronModel::Lif && !(self.tau > 1.0 && self.tau.is_finite()) {
            return Err(param_err(format!("LIF tau must be a finite value > 1, got {}", self.tau)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(param_err(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.capacitance > 0.0 && self.capacitance.is_finite()) {
            return Err(param_err(format!("capacitance must be > 0, got {}", self.capacitance)));
        }
        // an infinite threshold is allowed: it silences the layer
        if self.v_threshold.is_nan() || !self.v_reset.is_finite() {
            return Err(param_err("v_threshold must not be NaN and v_reset must be finite"));
        }
        Ok(())
    }

    /// Multiplier on the previous membrane potential.
    pub fn leak(&self) -> f64 {
        match self.model {
            NeuronModel::If => 1.0,
            NeuronModel::Lif => 1.0 - 1.0 / self.tau,
        }
    }

    /// Multiplier on the input current.
    pub fn input_scale(&self) -> f64 {
        match self.model {
            NeuronModel::If => self.dt / self.capacitance,
            NeuronModel::Lif => 1.0 / self.capacitance,
        }
    }

    #[inline]
    pub fn integrate(&self, v_prev: f64, input: f64) -> f64 {
        self.leak() * v_prev + self.input_scale() * input
    }

    /// Post-spike membrane for a (possibly fractional) spike value `s`.
    /// Binary `s` gives the usual hard/soft reset; fractional `s` is the
    /// smooth interpolation used by the relaxed forward mode.
    #[inline]
    pub fn reset_value(&self, h: f64, s: f64) -> f64 {
        match self.reset {
            ResetMode::Hard => s * self.v_reset + (1.0 - s) * h,
            ResetMode::Soft => h - s * self.v_threshold,
        }
    }

    /// Partial derivatives `(∂v/∂h, ∂v/∂s)` of [`Self::reset_value`].
    #[inline]
    pub fn reset_partials(&self, h: f64, s: f64) -> (f64, f64) {
        match self.reset {
            ResetMode::Hard => (1.0 - s, self.v_reset - h),
            ResetMode::Soft => (1.0, -self.v_threshold),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Sigmoid,
    Atan,
    Triangular,
    /// `f(x) = x`, `f'(x) = 1`. Only meaningful in tests.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Sharpness for sigmoid/atan, half-width for triangular.
    pub alpha: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { kind: SurrogateKind::Sigmoid, alpha: 4.0 }
    }
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind, alpha: f64) -> Self {
        Self { kind, alpha }
    }

    pub fn sigmoid(alpha: f64) -> Self {
        Self::new(SurrogateKind::Sigmoid, alpha)
    }

    pub fn constant() -> Self {
        Self::new(SurrogateKind::Constant, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(param_err(format!("surrogate alpha must be finite and > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        surrogate_value(self, x)
    }

    #[inline]
    pub fn grad(&self, x: f64) -> f64 {
        surrogate_grad(self, x)
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn surrogate_value(s: &SurrogateSpec, x: f64) -> f64 {
    let a = s.alpha;
    match s.kind {
        SurrogateKind::Sigmoid => logistic(a * x),
        SurrogateKind::Atan => (PI * a * x / 2.0).atan() / PI + 0.5,
        SurrogateKind::Triangular => ((x + a) / (2.0 * a)).clamp(0.0, 1.0),
        SurrogateKind::Constant => x,
    }
}

pub fn surrogate_grad(s: &SurrogateSpec, x: f64) -> f64 {
    let a = s.alpha;
    match s.kind {
        SurrogateKind::Sigmoid => {
            let sg = logistic(-a * x.abs());
            a * sg * (1.0 - sg)
        }
        SurrogateKind::Atan => {
            let z = PI * a * x / 2.0;
            (a / 2.0) / (1.0 + z * z)
        }
        SurrogateKind::Triangular => {
            if x.abs() <= a {
                1.0 / (2.0 * a)
            } else {
                0.0
            }
        }
        SurrogateKind::Constant => 1.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronStep {
    pub spike: Tensor,
    pub v_new: Tensor,
    pub h_pre: Tensor,
}

pub fn step_neuron(spec: &NeuronSpec, v_prev: &Tensor, input_current: &Tensor) -> Result<NeuronStep> {
    if v_prev.shape() != input_current.shape() {
        return Err(shape_err(format!(
            "membrane {:?} and input current {:?} differ in shape",
            v_prev.shape(),
            input_current.shape()
        )));
    }
    let n = v_prev.len();
    let (mut spike, mut v_new, mut h_pre) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&v, &i) in v_prev.data().iter().zip(input_current.data()) {
        let h = spec.integrate(v, i);
        let s = if h >= spec.v_threshold { 1.0 } else { 0.0 };
        spike.push(s);
        v_new.push(spec.reset_value(h, s));
        h_pre.push(h);
    }
    let shape = v_prev.shape().to_vec();
    Ok(NeuronStep {
        spike: Tensor::from_parts(shape.clone(), spike),
        v_new: Tensor::from_parts(shape.clone(), v_new),
        h_pre: Tensor::from_parts(shape, h_pre),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn surrogate_symmetry_points() {
        assert_eq!(surrogate_value(&SurrogateSpec::sigmoid(1.0), 0.0), 0.5);
        for a in [0.3, 1.0, 7.0] {
            assert_eq!(surrogate_value(&SurrogateSpec::new(SurrogateKind::Atan, a), 0.0), 0.5);
        }
        assert!((surrogate_value(&SurrogateSpec::sigmoid(4.0), 10.0) - 1.0).abs() < 1e-9);
        assert_eq!(surrogate_grad(&SurrogateSpec::sigmoid(1.0), 0.0), 0.25);
        assert_eq!(surrogate_grad(&SurrogateSpec::constant(), -3.7), 1.0);
    }

    #[test]
    fn triangular_closed_interval() {
        let s = SurrogateSpec::new(SurrogateKind::Triangular, 0.5);
        assert_eq!(s.grad(0.5), 1.0);
        assert_eq!(s.grad(-0.5), 1.0);
        assert_eq!(s.grad(0.5000001), 0.0);
        assert_eq!(s.value(-1.0), 0.0);
        assert_eq!(s.value(1.0), 1.0);
        assert_eq!(s.value(0.0), 0.5);
    }

    #[test]
    fn sigmoid_grad_matches_finite_difference() {
        use crate::numerics::RngStream;
        let s = SurrogateSpec::sigmoid(4.0);
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let x = 3.0 * (2.0 * rng.uniform() - 1.0);
            let eps = 1e-5;
            let fd = (s.value(x + eps) - s.value(x - eps)) / (2.0 * eps);
            let g = s.grad(x);
            assert!((fd - g).abs() <= 1e-8 * g.abs().max(1e-12) + 1e-11, "x={x} fd={fd} g={g}");
        }
    }

    #[test]
    fn derivatives_integrate_to_one() {
        for s in [
            SurrogateSpec::sigmoid(4.0),
            SurrogateSpec::new(SurrogateKind::Atan, 2.0),
            SurrogateSpec::new(SurrogateKind::Triangular, 0.7),
        ] {
            // trapezoid over a wide window, atan tails decay like 1/x²
            let (lo, hi, n) = (-2000.0, 2000.0, 4_000_000);
            let dx = (hi - lo) / n as f64;
            let integral: f64 = (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                    w * s.grad(lo + i as f64 * dx)
                })
                .sum::<f64>()
                * dx;
            assert!((integral - 1.0).abs() < 1e-3, "{s:?}: {integral}");
        }
    }

    #[test]
    fn lif_step_example() {
        let spec = NeuronSpec { tau: 2.0, v_threshold: 10.0, ..NeuronSpec::default() };
        let out = step_neuron(&spec, &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(out.h_pre.data(), &[1.5]);
        assert_eq!(out.spike.data(), &[0.0]);
        assert_eq!(out.v_new.data(), &[1.5]);
    }

    #[test]
    fn if_step_hard_and_soft_reset() {
        let spec = NeuronSpec::integrate_and_fire();
        let out = step_neuron(&spec, &scalar(0.5), &scalar(0.7)).unwrap();
        assert!((out.h_pre.data()[0] - 1.2).abs() < 1e-15);
        assert_eq!(out.spike.data(), &[1.0]);
        assert_eq!(out.v_new.data(), &[0.0]);

        let soft = NeuronSpec { reset: ResetMode::Soft, ..spec };
        let out = step_neuron(&soft, &scalar(0.5), &scalar(0.7)).unwrap();
        assert_eq!(out.spike.data(), &[1.0]);
        assert!((out.v_new.data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let spec = NeuronSpec::default();
        assert!(step_neuron(&spec, &Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn lif_decays_geometrically() {
        let spec = NeuronSpec { tau: 3.0, v_threshold: 1e9, ..NeuronSpec::default() };
        let v0 = 0.8;
        let mut v = scalar(v0);
        for t in 1..=20 {
            v = step_neuron(&spec, &v, &scalar(0.0)).unwrap().v_new;
            let expected = (1.0 - 1.0 / 3.0f64).powi(t) * v0;
            assert!((v.data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_sigmoid_approaches_step() {
        for alpha in [16.0, 32.0, 100.0] {
            let s = SurrogateSpec::sigmoid(alpha);
            for x in [-5.0, -1.0, 1.0, 2.5] {
                let step = if x > 0.0 { 1.0 } else { 0.0 };
                assert!((s.value(x) - step).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn validate_rejects_bad_specs() {
        assert!(NeuronSpec { tau: 1.0, ..NeuronSpec::default() }.validate().is_err());
        assert!(NeuronSpec { tau: 1.0, ..NeuronSpec::integrate_and_fire() }.validate().is_ok());
        assert!(NeuronSpec { capacitance: 0.0, ..NeuronSpec::default() }.validate().is_err());
        assert!(SurrogateSpec::sigmoid(0.0).validate().is_err());
    }

    fn any_surrogate() -> impl Strategy<Value = SurrogateSpec> {
        (
            prop_oneof![
                Just(SurrogateKind::Sigmoid),
                Just(SurrogateKind::Atan),
                Just(SurrogateKind::Triangular),
                Just(SurrogateKind::Constant)
            ],
            0.05f64..20.0,
        )
            .prop_map(|(k, a)| SurrogateSpec::new(k, a))
    }

    fn any_neuron() -> impl Strategy<Value = NeuronSpec> {
        (any::<bool>(), 1.1f64..10.0, -2.0f64..2.0, -1.0f64..1.0).prop_map(|(lif, tau, vth, vr)| NeuronSpec {
            model: if lif { NeuronModel::Lif } else { NeuronModel::If },
            tau,
            v_threshold: vth,
            v_reset: vr,
            reset: ResetMode::Hard,
            dt: 1.0,
            capacitance: 1.0,
        })
    }

    proptest! {
        #[test]
        fn surrogate_grad_nonnegative_and_even(s in any_surrogate(), x in -50.0f64..50.0) {
            let g = s.grad(x);
            prop_assert!(g >= 0.0);
            prop_assert_eq!(g, s.grad(-x));
        }

        #[test]
        fn surrogate_value_monotone(s in any_surrogate(), x in -50.0f64..50.0, dx in 0.0f64..5.0) {
            prop_assert!(s.value(x + dx) >= s.value(x));
            if s.kind != SurrogateKind::Constant {
                prop_assert!((0.0..=1.0).contains(&s.value(x)));
            }
        }

        #[test]
        fn spikes_binary_and_hard_reset_bounded(
            spec in any_neuron(),
            v in proptest::collection::vec(-3.0f64..3.0, 1..32),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::numerics::RngStream::new(seed, 0);
            let input: Vec<f64> = v.iter().map(|_| 4.0 * rng.uniform() - 2.0).collect();
            let vp = Tensor::from_vec(v);
            let out = step_neuron(&spec, &vp, &Tensor::from_vec(input)).unwrap();
            let hmin = out.h_pre.data().iter().cloned().fold(f64::INFINITY, f64::min);
            for ((&s, &vn), &h) in out.spike.data().iter().zip(out.v_new.data()).zip(out.h_pre.data()) {
                prop_assert!(s == 0.0 || s == 1.0);
                if s == 1.0 {
                    prop_assert_eq!(vn, spec.v_reset);
                } else {
                    prop_assert_eq!(vn, h);
                    prop_assert!(vn >= hmin && vn < spec.v_threshold);
                }
            }
        }
    }
}
