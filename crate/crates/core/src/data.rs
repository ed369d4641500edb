//! Dataset ingestion: IDX files (optionally gzip-compressed), stratified
//! subsetting, seeded batching and a synthetic corpus for fast tests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{param_err, Error, Result};
use crate::numerics::rng::purpose;
use crate::numerics::{RngStream, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Images `[N, 1, H, W]` in `[0, 1]` and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(param_err(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param_err(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(param_err(format!("label {l} outside [0, {NUM_CLASSES})")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample image shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { images, labels })
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Decoded contents of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[N, H, W]`, scaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<u8>),
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(path: &Path) -> Result<IdxData> {
    let bytes = read_maybe_gz(path)?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("file too short for an IDX header ({} bytes)", bytes.len())));
    }
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)? as u32;
    let rank = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Format(format!("bad IDX magic 0x{other:08x}"))),
    };
    let dims = (1..=rank).map(word).collect::<Result<Vec<_>>>()?;
    let header = 4 * (rank + 1);
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::Format(format!(
            "IDX payload has {actual} bytes, header promises {expected} (dims {dims:?})"
        )));
    }
    let payload = &bytes[header..];
    Ok(match magic {
        IDX_IMAGES_MAGIC => {
            let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
            IdxData::Images(Tensor::new(&dims, data)?)
        }
        _ => IdxData::Labels(payload.to_vec()),
    })
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(param_err(format!(
            "{} pixels do not fill {count}×{rows}×{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found", dir.join(stem).display()),
    )))
}

/// Loads `{prefix}-images-idx3-ubyte` / `{prefix}-labels-idx1-ubyte` pairs.
pub fn load_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images = match load_idx(&find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)? {
        IdxData::Images(t) => t,
        IdxData::Labels(_) => return Err(Error::Format(format!("{prefix} images file holds labels"))),
    };
    let labels = match load_idx(&find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?)? {
        IdxData::Labels(l) => l,
        IdxData::Images(_) => return Err(Error::Format(format!("{prefix} labels file holds images"))),
    };
    let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    let images = images.reshape(&[n, 1, h, w])?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect())
}

/// Standard train (`train-*`) and test (`t10k-*`) splits from one directory.
pub fn load_fashion_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(dir, "train")?, load_split(dir, "t10k")?))
}

/// Class-stratified seeded subset: `n / 10` per class, the remainder going
/// to the lowest class indices. Selected samples keep their original order.
pub fn subset_indices(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    let total = dataset.len();
    if n > total {
        return Err(param_err(format!("subset of {n} requested from {total} samples")));
    }
    if n == total {
        return Ok((0..total).collect());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        let want = n / NUM_CLASSES + usize::from(c < n % NUM_CLASSES);
        if want > members.len() {
            return Err(param_err(format!(
                "class {c} has {} samples, stratified subset needs {want}",
                members.len()
            )));
        }
        RngStream::for_purpose(seed, purpose::SUBSET, c as u64).shuffle(members);
        picked.extend_from_slice(&members[..want]);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    dataset.select(&subset_indices(dataset, n, seed)?)
}

/// Seeded permutation of `0..n` keyed on `(seed, epoch)`, cut into batches;
/// the last partial batch is kept.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(param_err("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::for_purpose(shuffle_seed, purpose::SHUFFLE, epoch).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub const SYNTHETIC_NOISE_STD: f64 = 0.02;

pub fn synthetic_dataset(n: usize, seed: u64) -> Result<Dataset> {
    synthetic_dataset_with_noise(n, seed, SYNTHETIC_NOISE_STD)
}

/// 28×28 images, sample `i` has class `i % 10`: a bright (0.9) 7×7 block at
/// a class-specific cell of a 4×4 grid on a 0.1 background, plus clipped
/// Gaussian noise.
pub fn synthetic_dataset_with_noise(n: usize, seed: u64, noise_std: f64) -> Result<Dataset> {
    if n < NUM_CLASSES {
        return Err(param_err(format!("synthetic dataset needs n >= {NUM_CLASSES}, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(param_err(format!("noise std must be finite and >= 0, got {noise_std}")));
    }
    let mut rng = RngStream::for_purpose(seed, purpose::SYNTHETIC, 0);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % NUM_CLASSES;
        let (by, bx) = (7 * (c / 4), 7 * (c % 4));
        for y in 0..28 {
            for x in 0..28 {
                let inside = (by..by + 7).contains(&y) && (bx..bx + 7).contains(&x);
                let base = if inside { 0.9 } else { 0.1 };
                let noise = if noise_std > 0.0 { noise_std * rng.standard_normal() } else { 0.0 };
                data.push((base + noise).clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(&[n, 1, 28, 28], data)?, labels)
}
