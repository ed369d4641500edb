use spikelab::data::synthetic_dataset;
use spikelab::init::{initialize_network, InitKind, InitScheme};
use spikelab::neuron::{NeuronSpec, SurrogateSpec};
use spikelab::numerics::RngStream;
use spikelab::train::{evaluate, metrics_csv, run_training, run_training_with, OptimizerConfig, TrainConfig};
use spikelab::{Network, NetworkSpec};

fn fresh(kind: InitKind, seed: u64) -> Network {
    let surrogate = SurrogateSpec::default();
    let mut net = Network::new(NetworkSpec::conv_default(NeuronSpec::default(), surrogate)).unwrap();
    initialize_network(&mut net, &InitScheme::new(kind), &surrogate, None, &RngStream::new(seed, 0)).unwrap();
    net
}

fn quick(optimizer: OptimizerConfig, epochs: usize) -> TrainConfig {
    TrainConfig { optimizer, batch_size: 32, epochs, seed: 4, ..TrainConfig::default() }
}

#[test]
fn synthetic_sanity_run_separates_classes() {
    let train = synthetic_dataset(400, 1).unwrap();
    let test = synthetic_dataset(200, 2).unwrap();
    for kind in [InitKind::Kaiming, InitKind::IkunV2] {
        let mut net = fresh(kind, 0);
        let m = run_training(&mut net, &train, &test, &quick(OptimizerConfig::adam(), 5), None).unwrap();
        let last = m.last().unwrap();
        assert!(last.train_acc >= 0.95, "{kind}: train accuracy {}", last.train_acc);
        assert!(last.test_acc >= 0.95, "{kind}: test accuracy {}", last.test_acc);
        for e in &m {
            assert!((0.0..=1.0).contains(&e.train_acc) && (0.0..=1.0).contains(&e.test_acc));
            assert!(e.train_loss >= 0.0 && e.test_loss >= 0.0);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let train = synthetic_dataset(96, 3).unwrap();
    let test = synthetic_dataset(40, 4).unwrap();
    let run = || {
        let mut net = fresh(InitKind::IkunV2, 1);
        let m = run_training(&mut net, &train, &test, &quick(OptimizerConfig::sgd(), 2), None).unwrap();
        (metrics_csv(&m), net.flat_params())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let train = synthetic_dataset(64, 5).unwrap();
    let test = synthetic_dataset(20, 6).unwrap();
    for opt in [OptimizerConfig::Sgd { lr: 0.0, momentum: 0.9 }, OptimizerConfig::Adam { lr: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }] {
        let mut net = fresh(InitKind::Kaiming, 2);
        let before = net.flat_params();
        run_training(&mut net, &train, &test, &quick(opt, 2), None).unwrap();
        let after = net.flat_params();
        assert!(before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let train = synthetic_dataset(20, 7).unwrap();
    let mut net = fresh(InitKind::Lecun, 3);
    let before = net.flat_params();
    let mut calls = 0;
    let m = run_training_with(&mut net, &train, &train, &quick(OptimizerConfig::sgd(), 0), &mut |_, _, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert!(m.is_empty());
    assert_eq!(calls, 0);
    assert_eq!(before, net.flat_params());
}

#[test]
fn best_checkpoint_reproduces_best_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.ckpt");
    let train = synthetic_dataset(120, 8).unwrap();
    let test = synthetic_dataset(60, 9).unwrap();
    let mut net = fresh(InitKind::Xavier, 4);
    let m = run_training(&mut net, &train, &test, &quick(OptimizerConfig::adam(), 3), Some(&ckpt)).unwrap();
    let best = m.iter().map(|e| e.test_acc).fold(f64::NEG_INFINITY, f64::max);
    let mut restored = fresh(InitKind::Xavier, 99);
    restored.load_checkpoint(&ckpt).unwrap();
    // constant-current encoding ignores the encoder stream
    let (_, acc) = evaluate(&restored, &test, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(acc, best);
}
