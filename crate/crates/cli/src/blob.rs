//! Weight blob encoding.
//!
//! ```text
//! magic   8 bytes  "FLABWGT\0"
//! version u32 LE   1
//! per stage, in network order, for W then b:
//!   ndim  u32 LE, extents u32 LE × ndim, values f64 LE (row-major)
//! ```

use faultlab_core::{Layer, ModelSpec, Tensor, TrainedModel};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"FLABWGT\0";
pub const VERSION: u32 = 1;

pub fn encode(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + model.n_params() * 8 + model.layers().len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for layer in model.layers() {
        for t in [&layer.weights, &layer.bias] {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'a str,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(CliError::Corruption {
                what: self.what.to_string(),
                detail: format!("blob truncated at byte {}", self.at),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.corrupt(format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn corrupt(&self, detail: String) -> CliError {
        CliError::Corruption {
            what: self.what.to_string(),
            detail,
        }
    }
}

/// Decode a blob for `spec`; `what` names the model in errors.
pub fn decode(bytes: &[u8], spec: ModelSpec, what: &str) -> Result<TrainedModel> {
    let mut cur = Cursor { bytes, at: 0, what };
    if cur.take(8)? != MAGIC {
        return Err(cur.corrupt("bad blob magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(cur.corrupt(format!("unsupported blob version {version}")));
    }
    let mut layers = Vec::new();
    while cur.at < bytes.len() {
        let weights = cur.tensor()?;
        let bias = cur.tensor()?;
        layers.push(Layer { weights, bias });
    }
    TrainedModel::new(spec, layers).map_err(|e| cur.corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use faultlab_core::train::init_model;

    #[test]
    fn layout_header() {
        let model = init_model(ModelSpec::mlp(1, 2).unwrap(), 1);
        let bytes = encode(&model);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        // First tensor: rank 2, extents [2, 784].
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &784u32.to_le_bytes());
        let expected_len = 12 + 4 * (3 + 2 + 3 + 2) + 8 * model.n_params();
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn round_trip_is_exact() {
        let spec: ModelSpec = "CNN-1-3-2-4-max".parse().unwrap();
        let model = init_model(spec, 9);
        assert_eq!(decode(&encode(&model), spec, "m").unwrap(), model);
    }

    #[test]
    fn truncation_and_wrong_spec_are_corruption() {
        let spec = ModelSpec::mlp(1, 2).unwrap();
        let bytes = encode(&init_model(spec, 1));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], spec, "m"),
            Err(CliError::Corruption { .. })
        ));
        assert!(matches!(
            decode(&bytes, ModelSpec::mlp(1, 3).unwrap(), "m"),
            Err(CliError::Corruption { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, spec, "m").is_err());
    }
}
