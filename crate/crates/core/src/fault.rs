//! Deviation models applied to pre-activation values.
//!
//! Each scalar independently suffers a deviation event with probability `p`.
//! Under the conditionally uniform model a deviating scalar is replaced by a
//! uniform draw from the bounded output range; under the erasure model it is
//! replaced by 0.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    None,
    #[serde(rename = "uniform")]
    ConditionallyUniform,
    Erasure,
}

impl DeviationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviationKind::None => "none",
            DeviationKind::ConditionallyUniform => "uniform",
            DeviationKind::Erasure => "erasure",
        }
    }
}

impl fmt::Display for DeviationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(DeviationKind::None),
            "uniform" | "conditionally_uniform" | "conditionally-uniform" => {
                Ok(DeviationKind::ConditionallyUniform)
            }
            "erasure" => Ok(DeviationKind::Erasure),
            other => Err(Error::Domain(format!("unknown deviation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationConfig {
    kind: DeviationKind,
    p: f64,
    range_lo: f64,
    range_hi: f64,
}

impl DeviationConfig {
    pub const DEFAULT_RANGE: (f64, f64) = (-1.0, 1.0);

    pub fn new(kind: DeviationKind, p: f64) -> Result<Self> {
        check_probability(p)?;
        let (range_lo, range_hi) = Self::DEFAULT_RANGE;
        Ok(Self {
            kind,
            p,
            range_lo,
            range_hi,
        })
    }

    pub fn none() -> Self {
        Self::new(DeviationKind::None, 0.0).unwrap()
    }

    pub fn uniform(p: f64) -> Result<Self> {
        Self::new(DeviationKind::ConditionallyUniform, p)
    }

    pub fn erasure(p: f64) -> Result<Self> {
        Self::new(DeviationKind::Erasure, p)
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Domain(format!(
                "deviation range [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        self.range_lo = lo;
        self.range_hi = hi;
        Ok(self)
    }

    pub fn kind(&self) -> DeviationKind {
        self.kind
    }

    /// Effective deviation probability; always 0 for [`DeviationKind::None`].
    pub fn p(&self) -> f64 {
        match self.kind {
            DeviationKind::None => 0.0,
            _ => self.p,
        }
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_lo, self.range_hi)
    }

    pub fn is_active(&self) -> bool {
        self.p() > 0.0
    }

    /// Sample a mask for `values` and apply this model to it in place.
    pub fn inject<R: Rng + ?Sized>(&self, values: &mut [f64], rng: &mut R) {
        if !self.is_active() {
            return;
        }
        let mask = draw_mask(values.len(), self.p, rng);
        match self.kind {
            DeviationKind::None => {}
            DeviationKind::ConditionallyUniform => {
                uniform_in_place(values, &mask, self.range(), rng)
            }
            DeviationKind::Erasure => erase_in_place(values, &mask),
        }
    }
}

/// Boolean tensor marking which scalars deviate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() {
            return Err(Error::shape(shape, bits.len()));
        }
        Ok(Self { shape, bits })
    }

    pub fn filled(shape: Vec<usize>, value: bool) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            bits: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn draw_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < p).collect()
}

fn uniform_in_place<R: Rng + ?Sized>(values: &mut [f64], mask: &[bool], (lo, hi): (f64, f64), rng: &mut R) {
    let width = hi - lo;
    for (v, _) in values.iter_mut().zip(mask).filter(|(_, &m)| m) {
        *v = lo + width * rng.gen::<f64>();
    }
}

fn erase_in_place(values: &mut [f64], mask: &[bool]) {
    for (v, _) in values.iter_mut().zip(mask).filter(|(_, &m)| m) {
        *v = 0.0;
    }
}

pub fn sample_deviation_mask<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Result<Mask> {
    check_probability(p)?;
    let n = shape.iter().product();
    Ok(Mask {
        shape: shape.to_vec(),
        bits: draw_mask(n, p, rng),
    })
}

pub fn apply_conditionally_uniform<R: Rng + ?Sized>(
    pre: &Tensor,
    mask: &Mask,
    range: (f64, f64),
    rng: &mut R,
) -> Result<Tensor> {
    pre.check_shape(mask.shape())?;
    let mut out = pre.clone();
    uniform_in_place(out.data_mut(), &mask.bits, range, rng);
    Ok(out)
}

pub fn apply_erasure(pre: &Tensor, mask: &Mask) -> Result<Tensor> {
    pre.check_shape(mask.shape())?;
    let mut out = pre.clone();
    erase_in_place(out.data_mut(), &mask.bits);
    Ok(out)
}
