use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{validate_shape, Tensor};
use crate::error::{param_err, Result};

/// Seeded random stream. ChaCha8 keyed by `seed`, with `stream_id` selecting
/// an independent keystream, so per-layer and per-purpose streams never depend
/// on the order in which other streams are consumed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Stream ids are `purpose << 32 | index`; purposes are listed here so that
/// two subsystems never share a keystream by accident.
pub mod purpose {
    pub const WEIGHTS: u64 = 1;
    pub const EF2: u64 = 2;
    pub const ENCODER: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SUBSET: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const PROBES: u64 = 7;
    pub const LANCZOS: u64 = 8;
    pub const VARPROP: u64 = 9;
    pub const CALIBRATION: u64 = 10;
    pub const EVAL_SUBSET: u64 = 11;
}

pub fn stream_id(purpose: u64, index: u64) -> u64 {
    (purpose << 32) | (index & 0xffff_ffff)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn for_purpose(seed: u64, purpose: u64, index: u64) -> Self {
        Self::new(seed, stream_id(purpose, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream under the same seed, keyed on this stream's id and `index`.
    pub fn fork(&self, index: u64) -> Self {
        let mixed = self
            .stream_id
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .rotate_left(17)
            ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        Self::new(self.seed, mixed)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

pub fn sample_gaussian(rng: &mut RngStream, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !std.is_finite() || std < 0.0 {
        return Err(param_err(format!("standard deviation must be finite and >= 0, got {std}")));
    }
    if !mean.is_finite() {
        return Err(param_err(format!("mean must be finite, got {mean}")));
    }
    validate_shape(shape)?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

pub fn sample_rademacher(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor> {
    validate_shape(shape)?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.rademacher()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let mut rng = RngStream::new(1, 0);
        let t = sample_gaussian(&mut rng, &[3], 0.0, 0.0).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0]);
        let t = sample_gaussian(&mut rng, &[2], 5.0, 0.0).unwrap();
        assert_eq!(t.data(), &[5.0, 5.0]);
    }

    #[test]
    fn negative_std_rejected() {
        let mut rng = RngStream::new(1, 0);
        assert!(sample_gaussian(&mut rng, &[3], 0.0, -1.0).is_err());
        assert!(sample_gaussian(&mut rng, &[], 0.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_concentration() {
        let mut rng = RngStream::new(7, 3);
        let t = sample_gaussian(&mut rng, &[1_000_000], 0.0, 1.0).unwrap();
        let mean = t.mean();
        let std = t.variance().sqrt();
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.997..=1.003).contains(&std), "std {std}");
    }

    #[test]
    fn rademacher_codomain_and_balance() {
        let mut rng = RngStream::new(11, 0);
        let t = sample_rademacher(&mut rng, &[4]).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0 || v == -1.0));

        let t = sample_rademacher(&mut rng, &[1_000_000]).unwrap();
        let plus = t.data().iter().filter(|&&v| v == 1.0).count() as f64 / 1e6;
        assert!((0.498..=0.502).contains(&plus), "fraction {plus}");
        assert!(t.mean().abs() <= 0.004);
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let a = sample_rademacher(&mut RngStream::new(5, 9), &[64]).unwrap();
        let b = sample_rademacher(&mut RngStream::new(5, 9), &[64]).unwrap();
        assert_eq!(a, b);
        let c = sample_rademacher(&mut RngStream::new(5, 10), &[64]).unwrap();
        assert_ne!(a, c);

        // consuming one stream does not perturb another
        let mut s1 = RngStream::new(5, 1);
        let _ = sample_gaussian(&mut s1, &[100], 0.0, 1.0).unwrap();
        let x = sample_gaussian(&mut RngStream::new(5, 2), &[8], 0.0, 1.0).unwrap();
        let y = sample_gaussian(&mut RngStream::new(5, 2), &[8], 0.0, 1.0).unwrap();
        assert_eq!(x, y);
    }
}
