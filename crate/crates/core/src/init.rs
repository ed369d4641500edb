//! Weight initialization: classical variance-scaling schemes and the
//! surrogate-aware IKUN conditions
//!
//! ```text
//! v1: σ_W² = α / (fan_in · σ_X² · E[f'(H)²])
//! v2: σ_W² = α / ((fan_in + fan_out) · σ_X² · E[f'(H)²])
//! ```
//!
//! plus the optional data-driven calibration that measures σ_X² and the
//! pre-activation statistics layer by layer and moves each spike threshold
//! to the measured pre-activation mean.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::network::{Encoder, LayerSpec, Mode, Network};
use crate::neuron::SurrogateSpec;
use crate::numerics::rng::purpose;
use crate::numerics::{sample_gaussian, RngStream, Tensor};

pub const DEFAULT_EF2_SAMPLES: usize = 200_000;
pub const CALIBRATION_PASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Lecun,
    Xavier,
    Kaiming,
    Normal,
    IkunV1,
    IkunV2,
}

impl InitKind {
    pub const ALL: [InitKind; 6] = [
        InitKind::Lecun,
        InitKind::Xavier,
        InitKind::Kaiming,
        InitKind::Normal,
        InitKind::IkunV1,
        InitKind::IkunV2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InitKind::Lecun => "lecun",
            InitKind::Xavier => "xavier",
            InitKind::Kaiming => "kaiming",
            InitKind::Normal => "normal",
            InitKind::IkunV1 => "ikun_v1",
            InitKind::IkunV2 => "ikun_v2",
        }
    }

    pub fn is_ikun(&self) -> bool {
        matches!(self, InitKind::IkunV1 | InitKind::IkunV2)
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| param_err(format!("unknown init kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    /// IKUN gain.
    pub alpha: f64,
    /// Standard deviation of the `normal` kind.
    pub fixed_std: f64,
}

impl InitScheme {
    pub fn new(kind: InitKind) -> Self {
        Self { kind, alpha: 2.0, fixed_std: 0.05 }
    }

    pub fn normal(std: f64) -> Self {
        Self { fixed_std: std, ..Self::new(InitKind::Normal) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(param_err(format!("init alpha must be finite and > 0, got {}", self.alpha)));
        }
        if !(self.fixed_std >= 0.0 && self.fixed_std.is_finite()) {
            return Err(param_err(format!("fixed_std must be finite and >= 0, got {}", self.fixed_std)));
        }
        Ok(())
    }
}

/// Per-layer record of what initialization measured and used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// Index of the parametric layer in the network.
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub sigma_w: f64,
    /// Input scale σ_X²: 1 in analytic mode, the measured second moment
    /// E[X²] in calibration mode.
    pub sigma_x2: f64,
    /// Pre-activation mean μ_H.
    pub mu_h: f64,
    pub sigma_h: f64,
    /// E[f'(H)²].
    pub ef2: f64,
    /// Threshold of the spike layer fed by this layer, if any.
    pub v_threshold: Option<f64>,
}

/// Monte-Carlo estimate of E[f'(H)²] for H ~ N(mu_h, sigma_h²).
pub fn estimate_ef2(s: &SurrogateSpec, mu_h: f64, sigma_h: f64, n_samples: usize, rng: &mut RngStream) -> Result<f64> {
    if !(sigma_h > 0.0 && sigma_h.is_finite()) {
        return Err(param_err(format!("sigma_h must be finite and > 0, got {sigma_h}")));
    }
    if !mu_h.is_finite() {
        return Err(param_err(format!("mu_h must be finite, got {mu_h}")));
    }
    if n_samples < 1000 {
        return Err(param_err(format!("estimate_ef2 needs at least 1000 samples, got {n_samples}")));
    }
    let sum: f64 = (0..n_samples)
        .map(|_| {
            let g = s.grad(mu_h + sigma_h * rng.standard_normal());
            g * g
        })
        .sum();
    Ok(sum / n_samples as f64)
}

pub fn compute_sigma_w(scheme: &InitScheme, fan_in: usize, fan_out: usize, sigma_x2: f64, ef2: f64) -> Result<f64> {
    scheme.validate()?;
    if fan_in == 0 || fan_out == 0 {
        return Err(param_err(format!("fans must be positive, got fan_in={fan_in} fan_out={fan_out}")));
    }
    let (fi, fo) = (fan_in as f64, fan_out as f64);
    let ikun_denominator = |fans: f64| -> Result<f64> {
        if !(sigma_x2 > 0.0 && sigma_x2.is_finite()) {
            return Err(param_err(format!("sigma_x2 must be finite and > 0, got {sigma_x2}")));
        }
        if !(ef2 > 0.0 && ef2.is_finite()) {
            return Err(param_err(format!("E[f'(H)^2] must be finite and > 0, got {ef2}")));
        }
        Ok(fans * sigma_x2 * ef2)
    };
    Ok(match scheme.kind {
        InitKind::Lecun => (1.0 / fi).sqrt(),
        InitKind::Xavier => (2.0 / (fi + fo)).sqrt(),
        InitKind::Kaiming => (2.0 / fi).sqrt(),
        InitKind::Normal => scheme.fixed_std,
        InitKind::IkunV1 => (scheme.alpha / ikun_denominator(fi)?).sqrt(),
        InitKind::IkunV2 => (scheme.alpha / ikun_denominator(fi + fo)?).sqrt(),
    })
}

/// `(fan_in, fan_out)`: dense `(n_in, n_out)`, conv `(c_in·k², c_out·k²)`.
pub fn fan_dims(layer: &LayerSpec) -> Result<(usize, usize)> {
    match *layer {
        LayerSpec::Dense { n_in, n_out } => Ok((n_in, n_out)),
        LayerSpec::Conv { c_in, c_out, kernel, .. } => Ok((c_in * kernel * kernel, c_out * kernel * kernel)),
        other => Err(Error::NoParameters(format!("{} layer has no weights", other.name()))),
    }
}

/// Moments pooled over every entry of every tensor.
fn pooled_moments<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0usize, 0.0, 0.0);
    for t in tensors {
        for &v in t.data() {
            n += 1;
            s += v;
            ss += v * v;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = s / n as f64;
    (mean, (ss / n as f64 - mean * mean).max(0.0))
}

fn calibration_frames(net: &Network, batch: &Tensor, rng: &RngStream) -> Result<Vec<Tensor>> {
    let t = net.spec().time_steps;
    match net.spec().encoder {
        Encoder::ConstantCurrent => Ok(vec![batch.clone(); t]),
        Encoder::PoissonRate => {
            let mut enc = rng.fork(purpose::CALIBRATION);
            crate::network::encode_input(batch, t, Encoder::PoissonRate, &mut enc)
        }
    }
}

/// Standard-normal weight sample for one layer; scaled by σ_W on use.
fn draw_unit(net: &Network, layer: usize, rng: &mut RngStream) -> Result<Tensor> {
    let p = net.layer_params(layer).expect("parametric layer");
    sample_gaussian(rng, p.weight.shape(), 0.0, 1.0)
}

fn set_layer(net: &mut Network, layer: usize, unit: &Tensor, sigma_w: f64) {
    let p = net.layer_params_mut(layer).expect("parametric layer");
    p.weight = unit.map(|z| sigma_w * z);
    p.bias = Tensor::zeros(p.bias.shape());
}

/// Draws every parametric layer from N(0, σ_W²) with zero bias.
///
/// Without `calibration`, IKUN kinds use σ_X² = 1 and H ~ N(0, 1) and
/// thresholds are left alone. With a calibration batch, layers are
/// initialized in forward order; for IKUN kinds each layer gets
/// [`CALIBRATION_PASSES`] refinement passes that re-measure the spike
/// layer's pre-activations, set its threshold to μ_H, re-estimate
/// E[f'(H)²] around that threshold and rescale one fixed weight draw; a
/// final measurement pins the threshold to the resulting μ_H.
pub fn initialize_network(
    net: &mut Network,
    scheme: &InitScheme,
    surrogate: &SurrogateSpec,
    calibration: Option<&Tensor>,
    rng: &RngStream,
) -> Result<Vec<CalibrationStats>> {
    scheme.validate()?;
    surrogate.validate()?;
    if let Some(batch) = calibration {
        if batch.shape()[0] == 0 {
            return Err(param_err("calibration batch is empty"));
        }
    }
    let frames = calibration.map(|b| calibration_frames(net, b, rng)).transpose()?;
    let layers = net.parametric_layers();
    let mut ef2_rng = rng.fork(purpose::EF2);
    let analytic_ef2 = if scheme.kind.is_ikun() {
        estimate_ef2(surrogate, 0.0, 1.0, DEFAULT_EF2_SAMPLES, &mut ef2_rng)?
    } else {
        1.0
    };
    let mut stats = Vec::with_capacity(layers.len());

    for (slot, &l) in layers.iter().enumerate() {
        let (fan_in, fan_out) = fan_dims(&net.spec().layers[l])?;
        let spike = net.spec().layers[l + 1..]
            .iter()
            .take_while(|ly| !ly.is_parametric())
            .position(|ly| matches!(ly, LayerSpec::Spike { .. }))
            .map(|off| l + 1 + off);
        let mut wrng = rng.fork(((purpose::WEIGHTS << 8) | slot as u64) << 4);

        let unit = draw_unit(net, l, &mut wrng)?;

        let Some(frames) = frames.as_ref() else {
            let sigma_w = compute_sigma_w(scheme, fan_in, fan_out, 1.0, analytic_ef2)?;
            set_layer(net, l, &unit, sigma_w);
            stats.push(CalibrationStats {
                layer: l,
                fan_in,
                fan_out,
                sigma_w,
                sigma_x2: 1.0,
                mu_h: 0.0,
                sigma_h: 1.0,
                ef2: analytic_ef2,
                v_threshold: spike.and_then(|s| net.threshold(s)),
            });
            continue;
        };

        let measure = |net: &Network| -> Result<(f64, f64, f64)> {
            let (_, tape) = net.forward_frames(frames, Mode::Spiking)?;
            let (mean_x, var_x) = pooled_moments(tape.layer_inputs(l));
            let (mu_h, var_h) = match spike {
                Some(s) => pooled_moments(tape.pre_activations(s)),
                None => (0.0, 1.0),
            };
            // Var(Σ w·x) = fan_in·σ_W²·E[x²] for zero-mean weights, so the
            // input scale that matters is the second moment
            Ok((var_x + mean_x * mean_x, mu_h, var_h.sqrt()))
        };

        let (sigma_x2, _, _) = measure(net)?;
        if scheme.kind.is_ikun() && sigma_x2 <= 0.0 {
            return Err(param_err(format!(
                "input to layer {l} is identically zero on the calibration batch; cannot calibrate"
            )));
        }
        let mut ef2 = analytic_ef2;
        let mut sigma_w = compute_sigma_w(scheme, fan_in, fan_out, sigma_x2, ef2)?;
        set_layer(net, l, &unit, sigma_w);

        if scheme.kind.is_ikun() {
            for _ in 0..CALIBRATION_PASSES {
                let (_, mu_h, sigma_h) = measure(net)?;
                if sigma_h <= 0.0 {
                    return Err(param_err(format!("pre-activations of layer {l} are constant; cannot calibrate")));
                }
                if let Some(s) = spike {
                    net.set_threshold(s, mu_h)?;
                }
                // f' is evaluated at h - v_threshold, centred once the threshold sits at μ_H
                let centre = spike.and_then(|s| net.threshold(s)).map_or(mu_h, |th| mu_h - th);
                ef2 = estimate_ef2(surrogate, centre, sigma_h, DEFAULT_EF2_SAMPLES, &mut ef2_rng)?;
                sigma_w = compute_sigma_w(scheme, fan_in, fan_out, sigma_x2, ef2)?;
                set_layer(net, l, &unit, sigma_w);
            }
        }
        let (_, mu_h, sigma_h) = measure(net)?;
        if scheme.kind.is_ikun() {
            if let Some(s) = spike {
                net.set_threshold(s, mu_h)?;
            }
        } else if sigma_h > 0.0 {
            let centre = spike.and_then(|s| net.threshold(s)).map_or(mu_h, |th| mu_h - th);
            ef2 = estimate_ef2(surrogate, centre, sigma_h, DEFAULT_EF2_SAMPLES, &mut ef2_rng)?;
        }
        stats.push(CalibrationStats {
            layer: l,
            fan_in,
            fan_out,
            sigma_w,
            sigma_x2,
            mu_h,
            sigma_h,
            ef2,
            v_threshold: spike.and_then(|s| net.threshold(s)),
        });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;
    use crate::neuron::{NeuronSpec, SurrogateKind};

    #[test]
    fn classical_formulas() {
        let k = compute_sigma_w(&InitScheme::new(InitKind::Kaiming), 50, 7, 1.0, 1.0).unwrap();
        assert!((k - 0.2).abs() < 1e-15);
        let x = compute_sigma_w(&InitScheme::new(InitKind::Xavier), 300, 100, 1.0, 1.0).unwrap();
        assert!((x - 0.005f64.sqrt()).abs() < 1e-15);
        assert!((x - 0.070711).abs() < 1e-6);
        let l = compute_sigma_w(&InitScheme::new(InitKind::Lecun), 25, 3, 1.0, 1.0).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        let n = compute_sigma_w(&InitScheme::normal(0.05), 25, 3, 9.0, 9.0).unwrap();
        assert_eq!(n, 0.05);
    }

    #[test]
    fn ikun_v1_reduces_to_kaiming() {
        let v1 = compute_sigma_w(&InitScheme::new(InitKind::IkunV1), 100, 10, 1.0, 1.0).unwrap();
        let k = compute_sigma_w(&InitScheme::new(InitKind::Kaiming), 100, 10, 1.0, 1.0).unwrap();
        assert_eq!(v1, k);
        assert!((v1 - 0.141421).abs() < 1e-6);
    }

    #[test]
    fn ikun_rejects_bad_divisors() {
        let s = InitScheme::new(InitKind::IkunV2);
        assert!(compute_sigma_w(&s, 10, 10, 0.0, 1.0).is_err());
        assert!(compute_sigma_w(&s, 10, 10, 1.0, 0.0).is_err());
        assert!(compute_sigma_w(&s, 0, 10, 1.0, 1.0).is_err());
        assert!(compute_sigma_w(&InitScheme { alpha: -1.0, ..s }, 10, 10, 1.0, 1.0).is_err());
    }

    #[test]
    fn fan_conventions() {
        assert_eq!(fan_dims(&LayerSpec::Dense { n_in: 784, n_out: 128 }).unwrap(), (784, 128));
        let conv = LayerSpec::Conv { c_in: 1, c_out: 8, kernel: 3, stride: 1, pad: 1 };
        assert_eq!(fan_dims(&conv).unwrap(), (9, 72));
        let pool = LayerSpec::Pool { kind: crate::numerics::PoolKind::Max, size: 2 };
        assert!(matches!(fan_dims(&pool), Err(Error::NoParameters(_))));
        assert!(fan_dims(&LayerSpec::Flatten).is_err());
    }

    #[test]
    fn ef2_constant_and_small_alpha() {
        let mut rng = RngStream::new(0, 1);
        assert_eq!(estimate_ef2(&SurrogateSpec::constant(), 3.0, 2.0, 1000, &mut rng).unwrap(), 1.0);
        let tiny = estimate_ef2(&SurrogateSpec::sigmoid(1e-3), 0.0, 1.0, 10_000, &mut rng).unwrap();
        assert!(tiny < 1e-6, "{tiny}");
        assert!(estimate_ef2(&SurrogateSpec::sigmoid(4.0), 0.0, 0.0, 1000, &mut rng).is_err());
        assert!(estimate_ef2(&SurrogateSpec::sigmoid(4.0), 0.0, 1.0, 999, &mut rng).is_err());
    }

    #[test]
    fn ef2_nonincreasing_in_sigma_for_sigmoid() {
        let s = SurrogateSpec::sigmoid(4.0);
        let vals: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&sd| estimate_ef2(&s, 0.0, sd, DEFAULT_EF2_SAMPLES, &mut RngStream::new(9, 9)).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
    }

    #[test]
    fn ikun_scale_covariance() {
        let s = InitScheme { alpha: 1.7, ..InitScheme::new(InitKind::IkunV1) };
        for c in [0.5, 3.0, 10.0] {
            let a = compute_sigma_w(&s, 40, 20, 0.8, 0.3).unwrap().powi(2);
            let b = compute_sigma_w(&s, 40, 20, 0.8 * c, 0.3).unwrap().powi(2);
            assert!((a / c - b).abs() <= 1e-15 * a);
        }
    }

    #[test]
    fn v2_with_equal_fans_is_v1_at_double_fan_in() {
        for alpha in [0.5, 2.0, 3.3] {
            let v2 = compute_sigma_w(&InitScheme { alpha, ..InitScheme::new(InitKind::IkunV2) }, 64, 64, 0.7, 0.2).unwrap();
            let v1 = compute_sigma_w(&InitScheme { alpha, ..InitScheme::new(InitKind::IkunV1) }, 128, 1, 0.7, 0.2).unwrap();
            assert!((v1 - v2).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_ikun_matches_kaiming_with_constant_surrogate() {
        let spec = NetworkSpec::conv_default(NeuronSpec::default(), SurrogateSpec::constant());
        let mut a = Network::new(spec.clone()).unwrap();
        let mut b = Network::new(spec).unwrap();
        let rng = RngStream::new(4, 0);
        let sa = initialize_network(&mut a, &InitScheme::new(InitKind::IkunV1), &SurrogateSpec::constant(), None, &rng)
            .unwrap();
        let sb = initialize_network(&mut b, &InitScheme::new(InitKind::Kaiming), &SurrogateSpec::constant(), None, &rng)
            .unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x.sigma_w - y.sigma_w).abs() < 1e-12);
            assert!((x.sigma_w - (2.0 / x.fan_in as f64).sqrt()).abs() < 1e-12);
        }
        // same streams, same σ → identical weights
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn normal_scheme_empirical_std() {
        let spec = NetworkSpec::dense_stack(2, 400, NeuronSpec::default(), SurrogateSpec::default(), 1);
        let mut net = Network::new(spec).unwrap();
        initialize_network(&mut net, &InitScheme::normal(0.05), &SurrogateSpec::default(), None, &RngStream::new(1, 0))
            .unwrap();
        for l in net.parametric_layers() {
            let p = net.layer_params(l).unwrap();
            let sd = p.weight.variance().sqrt();
            assert!((sd / 0.05 - 1.0).abs() < 0.02, "{sd}");
            assert!(p.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn calibration_sets_thresholds_to_mu_h() {
        let spec = NetworkSpec::dense_stack(3, 32, NeuronSpec::default(), SurrogateSpec::default(), 4);
        let mut net = Network::new(spec).unwrap();
        let mut rng = RngStream::new(3, 0);
        let batch = sample_gaussian(&mut rng, &[128, 32], 0.0, 1.0).unwrap();
        let stats = initialize_network(
            &mut net,
            &InitScheme::new(InitKind::IkunV2),
            &SurrogateSpec::default(),
            Some(&batch),
            &RngStream::new(3, 1),
        )
        .unwrap();
        assert_eq!(stats.len(), 3);
        for st in &stats {
            assert_eq!(st.v_threshold, Some(st.mu_h));
            assert_eq!(net.threshold(st.layer + 1), Some(st.mu_h));
            let expected = (2.0 / ((st.fan_in + st.fan_out) as f64 * st.sigma_x2 * st.ef2)).sqrt();
            assert!((st.sigma_w - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_or_silent_calibration_rejected() {
        let spec = NetworkSpec::dense_stack(2, 4, NeuronSpec::default(), SurrogateSpec::new(SurrogateKind::Atan, 2.0), 2);
        let mut net = Network::new(spec).unwrap();
        let flat = Tensor::zeros(&[8, 4]);
        let err = initialize_network(
            &mut net,
            &InitScheme::new(InitKind::IkunV1),
            &SurrogateSpec::default(),
            Some(&flat),
            &RngStream::new(0, 0),
        );
        assert!(err.is_err());
    }
}
