//! Flat binary checkpoint.
//!
//! ```text
//! "SPKL" | version: u32 | layer_count: u32
//! per layer:  tensor_count: u32
//!   per tensor: rank: u32 | dims: u32 × rank | data: f64 × Π dims
//! ```
//!
//! All integers and reals are little-endian. Parametric layers store
//! `[weight, bias]`, spike layers store their threshold as a `[1]` tensor,
//! other layers store nothing.

use std::fs;
use std::path::Path;

use super::{LayerSpec, Network};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"SPKL";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub tensors: Vec<Tensor>,
}

impl CheckpointEntry {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl Network {
    fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        self.spec
            .layers
            .iter()
            .zip(&self.params)
            .map(|(layer, p)| {
                let tensors = match (layer, p) {
                    (_, Some(p)) => vec![p.weight.clone(), p.bias.clone()],
                    (LayerSpec::Spike { neuron, .. }, None) => vec![Tensor::filled(&[1], neuron.v_threshold)],
                    _ => Vec::new(),
                };
                CheckpointEntry { tensors }
            })
            .collect()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        encode(&self.checkpoint_entries())
    }

    /// Loads parameters and thresholds; shapes must match this network's spec.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = decode(bytes)?;
        let expected = self.checkpoint_entries();
        let ours: Vec<_> = expected.iter().map(CheckpointEntry::shapes).collect();
        let theirs: Vec<_> = entries.iter().map(CheckpointEntry::shapes).collect();
        if ours != theirs {
            return Err(shape_err(format!(
                "checkpoint layer shapes {theirs:?} do not match network layer shapes {ours:?}"
            )));
        }
        for (i, entry) in entries.into_iter().enumerate() {
            let mut it = entry.tensors.into_iter();
            match &self.spec.layers[i] {
                LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_mut().unwrap();
                    p.weight = it.next().unwrap();
                    p.bias = it.next().unwrap();
                }
                LayerSpec::Spike { .. } => {
                    let v = it.next().unwrap().data()[0];
                    self.set_threshold(i, v)?;
                }
                _ => {}
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_entries())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.load_checkpoint_bytes(&bytes)
    }
}

fn encode(entries: &[CheckpointEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, entries.len() as u32);
    for e in entries {
        put_u32(&mut out, e.tensors.len() as u32);
        for t in &e.tensors {
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let layers = r.u32()? as usize;
    let mut entries = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(&shape, data)?);
        }
        entries.push(CheckpointEntry { tensors });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;
    use crate::neuron::{NeuronSpec, SurrogateSpec};
    use crate::numerics::{sample_gaussian, RngStream};
    use proptest::prelude::*;

    fn random_net(seed: u64) -> Network {
        let spec = NetworkSpec::conv_with_channels(2, 3, 4, NeuronSpec::default(), SurrogateSpec::default());
        let mut net = Network::new(spec).unwrap();
        let mut rng = RngStream::new(seed, 0);
        let flat = sample_gaussian(&mut rng, &[net.param_count()], 0.0, 1.0).unwrap().into_data();
        net.set_flat_params(&flat).unwrap();
        net.set_threshold(1, 0.25 + rng.uniform()).unwrap();
        net
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>()) {
            let net = random_net(seed);
            let bytes = net.to_checkpoint_bytes();
            let mut other = Network::new(net.spec().clone()).unwrap();
            other.set_threshold(1, 1.0).unwrap();
            other.load_checkpoint_bytes(&bytes).unwrap();
            prop_assert_eq!(other.to_checkpoint_bytes(), bytes);
            prop_assert_eq!(other.threshold(1), net.threshold(1));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = random_net(1).to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"SPKL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9);
    }

    #[test]
    fn mismatch_reports_both_shape_lists() {
        let bytes = random_net(2).to_checkpoint_bytes();
        let spec = NetworkSpec::conv_with_channels(2, 5, 4, NeuronSpec::default(), SurrogateSpec::default());
        let mut other = Network::new(spec).unwrap();
        let msg = other.load_checkpoint_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("[3, 2, 3, 3]") && msg.contains("[5, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = random_net(3).to_checkpoint_bytes();
        let mut net = random_net(3);
        assert!(matches!(net.load_checkpoint_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(net.load_checkpoint_bytes(&bad), Err(Error::Format(_))));
    }
}
