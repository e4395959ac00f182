//! Datasets: the two-Gaussian synthetic task, IDX image files, label noise
//! and deterministic mini-batching.
//!
//! IDX layout (big-endian): images use magic `0x00000803` followed by
//! count, rows, cols and `u8` pixels; labels use `0x00000801`, count and
//! `u8` labels. Multi-channel images use `0x00000804` with dimensions
//! count, channels, rows, cols.

use std::fs;
use std::path::Path;

use crate::error::{config, contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_CHANNEL_IMAGES_MAGIC: u32 = 0x0000_0804;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × d` vectors or `N × C × H × W` images.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() || inputs.rows() != labels.len() || inputs.rank() < 2 {
            return contract(format!(
                "{} labels for inputs {:?}",
                labels.len(),
                inputs.shape()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return contract(format!("label {bad} outside {num_classes} classes"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

pub const SYNTHETIC_DIM: usize = 10;

/// Two balanced Gaussian classes in R^10: class 1 ~ N(0, I), class 0 ~
/// N(−1, I). Samples are shuffled; train and test come from independent
/// streams of the same seed.
pub fn gen_synthetic(seed: u64, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    if !n_train.is_multiple_of(2) || !n_test.is_multiple_of(2) || n_train == 0 || n_test == 0 {
        return config(format!(
            "synthetic split sizes must be positive and even, got {n_train}/{n_test}"
        ));
    }
    let make = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = Rng::derive(seed, stream);
        let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(n * SYNTHETIC_DIM);
        for &l in &labels {
            let mean = if l == 1 { 0.0 } else { -1.0 };
            data.extend((0..SYNTHETIC_DIM).map(|_| rng.normal_with(mean, 1.0)));
        }
        Dataset::new(Tensor::new(vec![n, SYNTHETIC_DIM], data)?, labels, 2)
    };
    Ok((make(n_train, 0)?, make(n_test, 1)?))
}

/// Reassigns exactly `round(fraction·N)` distinct labels, each to a class
/// drawn uniformly from the other classes.
pub fn flip_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return config(format!("flip fraction must lie in [0, 1], got {fraction}"));
    }
    let count = (fraction * ds.len() as f64).round() as usize;
    let mut out = ds.clone();
    if count == 0 || ds.num_classes < 2 {
        return Ok(out);
    }
    let mut rng = Rng::new(seed);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    // Partial Fisher–Yates: the first `count` slots are a uniform sample.
    for i in 0..count {
        let j = i + rng.below((ds.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    for &i in &idx[..count] {
        let old = out.labels[i];
        let mut new = rng.below(ds.num_classes as u64 - 1) as usize;
        if new >= old {
            new += 1;
        }
        out.labels[i] = new;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub shuffle: bool,
}

/// Index partition of `0..n` into batches; the last batch may be short.
pub fn batch_indices(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return config("batch size must be positive");
    }
    if plan.batch_size > n {
        return config(format!("batch size {} exceeds {n} samples", plan.batch_size));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if plan.shuffle {
        Rng::new(plan.seed).shuffle(&mut order);
    }
    Ok(order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect())
}

/// Materialized mini-batches `(inputs, labels)`.
pub fn batches(ds: &Dataset, plan: &BatchPlan) -> Result<Vec<(Tensor, Vec<usize>)>> {
    Ok(batch_indices(ds.len(), plan)?
        .into_iter()
        .map(|idx| {
            let labels = idx.iter().map(|&i| ds.labels[i]).collect();
            (ds.inputs.select_rows(&idx), labels)
        })
        .collect())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let bytes = self.take(4)?;
        Ok(u32::from_be_bytes(bytes.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: wanted {n} more bytes, file has {}", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses IDX image bytes into `N × C × H × W` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.u32()?;
    let dims = match magic {
        IDX_IMAGES_MAGIC => {
            let (n, h, w) = (c.u32()?, c.u32()?, c.u32()?);
            [n, 1, h, w]
        }
        IDX_CHANNEL_IMAGES_MAGIC => [c.u32()?, c.u32()?, c.u32()?, c.u32()?],
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad image magic {other:#010x}"),
            })
        }
    };
    let dims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    if dims.contains(&0) {
        return Err(Error::Format {
            offset: 4,
            msg: format!("zero dimension in {dims:?}"),
        });
    }
    let len: usize = dims.iter().product();
    let pixels = c.take(len)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after pixel data".into(),
        });
    }
    Tensor::new(dims, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = c.u32()? as usize;
    let labels = c.take(n)?.iter().map(|&l| l as usize).collect();
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after labels".into(),
        });
    }
    Ok(labels)
}

/// Loads an image/label IDX pair. The class count is `max label + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let inputs = parse_idx_images(&fs::read(images)?)?;
    let lbl_bytes = fs::read(labels)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != inputs.rows() {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{} labels for {} images", labels.len(), inputs.rows()),
        });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

/// Encodes `N × C × H × W` pixels in `[0, 1]` as IDX, rounding to the
/// nearest `u8` level. Single-channel data uses the standard 3-D layout.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, ch, h, w] = images.shape()[..] else {
        return contract(format!("IDX images must be N×C×H×W, got {:?}", images.shape()));
    };
    let mut out = Vec::with_capacity(20 + images.len());
    if ch == 1 {
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, h, w] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        out.extend_from_slice(&IDX_CHANNEL_IMAGES_MAGIC.to_be_bytes());
        for d in [n, ch, h, w] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let Ok(b) = u8::try_from(l) else {
            return contract(format!("label {l} does not fit in a byte"));
        };
        out.push(b);
    }
    Ok(out)
}

pub fn write_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    fs::write(images, encode_idx_images(&ds.inputs)?)?;
    fs::write(labels, encode_idx_labels(&ds.labels)?)?;
    Ok(())
}
