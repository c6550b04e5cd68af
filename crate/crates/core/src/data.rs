//! MNIST IDX ingestion.
//!
//! Both raw and gzip-compressed (`.gz` extension) containers are accepted.
//! Pixel bytes are scaled by 1/255 so inputs share the clipped-ReLU codomain.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images, labels and their one-hot targets, row-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub one_hot: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        let count = images.shape().first().copied().unwrap_or(0);
        if count != labels.len() {
            return Err(Error::shape(
                format!("{count} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        let one_hot = one_hot(&labels, num_classes)?;
        Ok(Self {
            images,
            labels,
            one_hot,
        })
    }

    /// Load the canonical `train-*` or `t10k-*` file pair from `dir`.
    pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let images = find_file(dir, split.prefix(), "images", 3)?;
        let labels = find_file(dir, split.prefix(), "labels", 1)?;
        Dataset::new(load_idx_images(&images)?, load_idx_labels(&labels)?, 10)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape (everything after the count axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let stride: usize = self.sample_shape().iter().product();
        &self.images.data()[index * stride..(index + 1) * stride]
    }

    pub fn target(&self, index: usize) -> &[f64] {
        let classes = self.one_hot.shape()[1];
        &self.one_hot.data()[index * classes..(index + 1) * classes]
    }

    /// First `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let stride: usize = self.sample_shape().iter().product();
        let classes = self.one_hot.shape()[1];
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset {
            images: Tensor::new(shape, self.images.data()[..n * stride].to_vec())
                .expect("prefix of a valid tensor"),
            labels: self.labels[..n].to_vec(),
            one_hot: Tensor::new(vec![n, classes], self.one_hot.data()[..n * classes].to_vec())
                .expect("prefix of a valid tensor"),
        }
    }
}

fn find_file(dir: &Path, prefix: &str, what: &str, dims: u8) -> Result<PathBuf> {
    let stems = [
        format!("{prefix}-{what}-idx{dims}-ubyte"),
        format!("{prefix}-{what}.idx{dims}-ubyte"),
    ];
    for stem in &stems {
        for ext in ["", ".gz"] {
            let candidate = dir.join(format!("{stem}{ext}"));
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::io(
        dir.join(&stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let observed = be_u32(bytes, 0);
    if observed != magic {
        return Err(Error::Format {
            path: path.into(),
            observed,
            expected: magic,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_idx_images(&read_maybe_gz(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read_maybe_gz(path)?, path)
}

/// Decode an in-memory IDX3 image container; `origin` only labels errors.
pub fn parse_idx_images(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    check_header(bytes, origin, IMAGE_MAGIC, 16)?;
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            path: origin.into(),
            expected,
            actual: payload.len(),
        });
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![count, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], origin: &Path) -> Result<Vec<u8>> {
    check_header(bytes, origin, LABEL_MAGIC, 8)?;
    let count = be_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::LengthMismatch {
            path: origin.into(),
            expected: count,
            actual: payload.len(),
        });
    }
    if let Some((i, &bad)) = payload.iter().enumerate().find(|(_, &b)| b > 9) {
        return Err(Error::Domain(format!(
            "{}: label {bad} at index {i} is outside 0..=9",
            origin.display()
        )));
    }
    Ok(payload.to_vec())
}

/// `count × num_classes` matrix whose rows are standard basis vectors.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(vec![labels.len(), num_classes]);
    let data = out.data_mut();
    for (row, &label) in labels.iter().enumerate() {
        let label = usize::from(label);
        if label >= num_classes {
            return Err(Error::Domain(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        data[row * num_classes + label] = 1.0;
    }
    Ok(out)
}
