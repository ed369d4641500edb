use spikelab::network::{Decoder, Encoder, LayerSpec, Mode, NetworkSpec};
use spikelab::neuron::{NeuronSpec, ResetMode, SurrogateKind, SurrogateSpec};
use spikelab::numerics::{sample_gaussian, RngStream, Tensor};
use spikelab::train::{batch_gradients_mode, mse_loss};
use spikelab::Network;

fn tiny_net(neuron: NeuronSpec, surrogate: SurrogateSpec) -> Network {
    let spike = LayerSpec::Spike { neuron, surrogate };
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Conv { c_in: 1, c_out: 2, kernel: 3, stride: 1, pad: 0 },
            spike,
            LayerSpec::Flatten,
            LayerSpec::Dense { n_in: 32, n_out: 2 },
            spike,
        ],
        time_steps: 2,
        encoder: Encoder::ConstantCurrent,
        decoder: Decoder::FiringRate,
        input_shape: vec![1, 6, 6],
    };
    Network::new(spec).unwrap()
}

fn randomize(net: &mut Network, seed: u64, std: f64) {
    let mut rng = RngStream::new(seed, 0);
    let theta = sample_gaussian(&mut rng, &[net.param_count()], 0.0, std).unwrap();
    net.set_flat_params(theta.data()).unwrap();
}

fn inputs(seed: u64, b: usize) -> (Tensor, Vec<usize>) {
    let mut rng = RngStream::new(seed, 1);
    let x = Tensor::new(&[b, 1, 6, 6], (0..b * 36).map(|_| rng.uniform()).collect()).unwrap();
    let labels = (0..b).map(|i| i % 2).collect();
    (x, labels)
}

fn relaxed_loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let (rates, _) = net.forward(x, Mode::Relaxed, &mut RngStream::new(0, 0)).unwrap();
    mse_loss(&rates, labels).unwrap().0
}

/// Returns (checked entries, worst relative error).
fn fd_check(net: &mut Network, x: &Tensor, labels: &[usize]) -> (usize, f64) {
    let (_, grads) = batch_gradients_mode(net, x, labels, Mode::Relaxed, &mut RngStream::new(0, 0)).unwrap();
    let analytic = grads.flat();
    let theta = net.flat_params();
    let eps = 1e-4;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        if a.abs() <= 1e-6 {
            continue;
        }
        let mut p = theta.clone();
        p[i] += eps;
        net.set_flat_params(&p).unwrap();
        let lp = relaxed_loss(net, x, labels);
        p[i] -= 2.0 * eps;
        net.set_flat_params(&p).unwrap();
        let lm = relaxed_loss(net, x, labels);
        let n = (lp - lm) / (2.0 * eps);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        checked += 1;
    }
    net.set_flat_params(&theta).unwrap();
    (checked, worst)
}

#[test]
fn relaxed_gradients_match_finite_differences_for_every_surrogate() {
    let surrogates = [
        SurrogateSpec::sigmoid(4.0),
        SurrogateSpec::new(SurrogateKind::Atan, 2.0),
        SurrogateSpec::new(SurrogateKind::Triangular, 1.0),
        SurrogateSpec::constant(),
    ];
    for (k, s) in surrogates.into_iter().enumerate() {
        let mut net = tiny_net(NeuronSpec::default(), s);
        randomize(&mut net, 10 + k as u64, 0.5);
        let (x, labels) = inputs(20 + k as u64, 3);
        let (checked, worst) = fd_check(&mut net, &x, &labels);
        assert!(checked > 10, "{s:?}: only {checked} parameters had a gradient");
        assert!(worst < 1e-4, "{s:?}: worst relative error {worst:e}");
    }
}

#[test]
fn relaxed_gradients_hold_for_if_and_soft_reset() {
    let neurons = [
        NeuronSpec::integrate_and_fire(),
        NeuronSpec { reset: ResetMode::Soft, ..NeuronSpec::default() },
    ];
    for (k, n) in neurons.into_iter().enumerate() {
        let mut net = tiny_net(n, SurrogateSpec::sigmoid(4.0));
        randomize(&mut net, 30 + k as u64, 0.5);
        let (x, labels) = inputs(40 + k as u64, 2);
        let (checked, worst) = fd_check(&mut net, &x, &labels);
        assert!(checked > 10);
        assert!(worst < 1e-4, "{n:?}: worst relative error {worst:e}");
    }
}

#[test]
fn forward_is_deterministic_in_both_modes() {
    let mut net = tiny_net(NeuronSpec::default(), SurrogateSpec::default());
    randomize(&mut net, 5, 0.5);
    let (x, _) = inputs(6, 4);
    for mode in [Mode::Spiking, Mode::Relaxed] {
        let a = net.forward(&x, mode, &mut RngStream::new(1, 1)).unwrap().0;
        let b = net.forward(&x, mode, &mut RngStream::new(1, 1)).unwrap().0;
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn spiking_rates_are_multiples_of_one_over_t() {
    let mut net = tiny_net(NeuronSpec::default(), SurrogateSpec::default());
    randomize(&mut net, 7, 1.0);
    let (x, _) = inputs(8, 5);
    let rates = net.forward(&x, Mode::Spiking, &mut RngStream::new(0, 0)).unwrap().0;
    for r in rates.data() {
        assert!([0.0, 0.5, 1.0].contains(r), "rate {r}");
    }
}
