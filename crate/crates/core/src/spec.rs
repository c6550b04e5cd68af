//! Model family descriptions: `MLP-L-N` and `CNN-L-C-P-F-pool`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    None,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::None => "none",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "none" => Ok(Pooling::None),
            other => Err(Error::Domain(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Architecture {
    Mlp {
        layers: usize,
        neurons: usize,
    },
    Cnn {
        layers: usize,
        kernel: usize,
        pool_size: usize,
        feature_maps: usize,
        pooling: Pooling,
        dense_width: usize,
    },
}

/// Input image geometry: rows × cols × channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl InputShape {
    pub const MNIST: InputShape = InputShape {
        rows: 28,
        cols: 28,
        channels: 1,
    };

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One trainable stage of a network, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    /// Valid, stride-1 correlation followed by `pool`×`pool` max pooling
    /// (`pool == 1` means no pooling).
    Conv {
        rows: usize,
        cols: usize,
        channels: usize,
        kernel: usize,
        maps: usize,
        pool: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerShape {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Conv {
                kernel,
                channels,
                maps,
                ..
            } => vec![kernel, kernel, channels, maps],
            LayerShape::Dense { inputs, outputs } => vec![outputs, inputs],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerShape::Conv { maps, .. } => maps,
            LayerShape::Dense { outputs, .. } => outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.bias_len()
    }

    /// Pre-activation extent (before pooling).
    pub fn conv_out(&self) -> Option<(usize, usize)> {
        match *self {
            LayerShape::Conv {
                rows, cols, kernel, ..
            } => Some((rows + 1 - kernel, cols + 1 - kernel)),
            LayerShape::Dense { .. } => None,
        }
    }

    pub fn pre_activation_len(&self) -> usize {
        match *self {
            LayerShape::Conv { maps, .. } => {
                let (r, c) = self.conv_out().unwrap();
                r * c * maps
            }
            LayerShape::Dense { outputs, .. } => outputs,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerShape::Conv { maps, pool, .. } => {
                let (r, c) = self.conv_out().unwrap();
                (r / pool) * (c / pool) * maps
            }
            LayerShape::Dense { outputs, .. } => outputs,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerShape::Conv { .. })
    }

    /// Glorot fan-in / fan-out.
    pub fn fans(&self) -> (usize, usize) {
        match *self {
            LayerShape::Conv {
                kernel,
                channels,
                maps,
                ..
            } => (kernel * kernel * channels, kernel * kernel * maps),
            LayerShape::Dense { inputs, outputs } => (inputs, outputs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    arch: Architecture,
    num_classes: usize,
    clip: f64,
    input: InputShape,
}

impl ModelSpec {
    pub const DEFAULT_DENSE_WIDTH: usize = 200;
    pub const DEFAULT_CLIP: f64 = 1.0;

    pub fn new(arch: Architecture, input: InputShape, num_classes: usize, clip: f64) -> Result<Self> {
        let spec = Self {
            arch,
            num_classes,
            clip,
            input,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(layers: usize, neurons: usize) -> Result<Self> {
        Self::new(
            Architecture::Mlp { layers, neurons },
            InputShape::MNIST,
            10,
            Self::DEFAULT_CLIP,
        )
    }

    pub fn cnn(layers: usize, kernel: usize, pool_size: usize, feature_maps: usize, pooling: Pooling) -> Result<Self> {
        Self::new(
            Architecture::Cnn {
                layers,
                kernel,
                pool_size,
                feature_maps,
                pooling,
                dense_width: Self::DEFAULT_DENSE_WIDTH,
            },
            InputShape::MNIST,
            10,
            Self::DEFAULT_CLIP,
        )
    }

    pub fn with_input(self, input: InputShape) -> Result<Self> {
        Self::new(self.arch, input, self.num_classes, self.clip)
    }

    pub fn with_dense_width(self, width: usize) -> Result<Self> {
        let arch = match self.arch {
            Architecture::Cnn {
                layers,
                kernel,
                pool_size,
                feature_maps,
                pooling,
                ..
            } => Architecture::Cnn {
                layers,
                kernel,
                pool_size,
                feature_maps,
                pooling,
                dense_width: width,
            },
            mlp => mlp,
        };
        Self::new(arch, self.input, self.num_classes, self.clip)
    }

    pub fn with_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.arch, self.input, num_classes, self.clip)
    }

    pub fn with_clip(self, clip: f64) -> Result<Self> {
        Self::new(self.arch, self.input, self.num_classes, clip)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn depth(&self) -> usize {
        match self.arch {
            Architecture::Mlp { layers, .. } | Architecture::Cnn { layers, .. } => layers,
        }
    }

    pub fn is_cnn(&self) -> bool {
        matches!(self.arch, Architecture::Cnn { .. })
    }

    /// Pool side actually applied; `none` pooling is a 1×1 window.
    pub fn effective_pool(&self) -> usize {
        match self.arch {
            Architecture::Cnn {
                pooling: Pooling::Max,
                pool_size,
                ..
            } => pool_size,
            _ => 1,
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::Spec {
            spec: self.to_string(),
            reason: reason.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(self.invalid("num_classes must be >= 1"));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(self.invalid("clip must be a positive finite number"));
        }
        if self.input.is_empty() {
            return Err(self.invalid("input shape must be non-empty"));
        }
        match self.arch {
            Architecture::Mlp { layers, neurons } => {
                if layers < 1 || neurons < 1 {
                    return Err(self.invalid("L and N must be >= 1"));
                }
            }
            Architecture::Cnn {
                layers,
                kernel,
                pool_size,
                feature_maps,
                dense_width,
                ..
            } => {
                if layers < 1 || kernel < 1 || pool_size < 1 || feature_maps < 1 || dense_width < 1 {
                    return Err(self.invalid("L, C, P, F and dense width must be >= 1"));
                }
                let pool = self.effective_pool();
                let (mut rows, mut cols) = (self.input.rows, self.input.cols);
                for layer in 1..=layers {
                    if rows < kernel || cols < kernel {
                        return Err(self.invalid(format!(
                            "layer {layer}: {kernel}x{kernel} kernel exceeds {rows}x{cols} input"
                        )));
                    }
                    rows = (rows + 1 - kernel) / pool;
                    cols = (cols + 1 - kernel) / pool;
                    if rows < 1 || cols < 1 {
                        return Err(self.invalid(format!(
                            "layer {layer}: pooling shrinks the feature map to nothing"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every trainable stage in network order, ending with the classifier.
    pub fn layer_plan(&self) -> Vec<LayerShape> {
        let mut plan = Vec::new();
        let classifier_inputs = match self.arch {
            Architecture::Mlp { layers, neurons } => {
                let mut inputs = self.input.len();
                for _ in 0..layers {
                    plan.push(LayerShape::Dense {
                        inputs,
                        outputs: neurons,
                    });
                    inputs = neurons;
                }
                inputs
            }
            Architecture::Cnn {
                layers,
                kernel,
                feature_maps,
                dense_width,
                ..
            } => {
                let pool = self.effective_pool();
                let (mut rows, mut cols, mut channels) =
                    (self.input.rows, self.input.cols, self.input.channels);
                for _ in 0..layers {
                    let conv = LayerShape::Conv {
                        rows,
                        cols,
                        channels,
                        kernel,
                        maps: feature_maps,
                        pool,
                    };
                    let (r, c) = conv.conv_out().unwrap();
                    plan.push(conv);
                    rows = r / pool;
                    cols = c / pool;
                    channels = feature_maps;
                }
                plan.push(LayerShape::Dense {
                    inputs: rows * cols * channels,
                    outputs: dense_width,
                });
                dense_width
            }
        };
        plan.push(LayerShape::Dense {
            inputs: classifier_inputs,
            outputs: self.num_classes,
        });
        plan
    }

    pub fn count_params(&self) -> usize {
        self.layer_plan().iter().map(LayerShape::param_count).sum()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.arch {
            Architecture::Mlp { layers, neurons } => write!(f, "MLP-{layers}-{neurons}"),
            Architecture::Cnn {
                layers,
                kernel,
                pool_size,
                feature_maps,
                pooling,
                ..
            } => write!(f, "CNN-{layers}-{kernel}-{pool_size}-{feature_maps}-{pooling}"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Parses the family names with default width, classes and input.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Spec {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = s.trim().split('-').collect();
        let num = |i: usize| -> Result<usize> {
            parts[i]
                .parse()
                .map_err(|_| bad(&format!("`{}` is not a positive integer", parts[i])))
        };
        match parts.first().map(|p| p.to_ascii_uppercase()).as_deref() {
            Some("MLP") if parts.len() == 3 => ModelSpec::mlp(num(1)?, num(2)?),
            Some("CNN") if parts.len() == 6 => {
                let pooling = parts[5].parse().map_err(|_| bad("pool must be `max` or `none`"))?;
                ModelSpec::cnn(num(1)?, num(2)?, num(3)?, num(4)?, pooling)
            }
            _ => Err(bad("expected MLP-L-N or CNN-L-C-P-F-pool")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_match_closed_form() {
        assert_eq!(ModelSpec::mlp(1, 100).unwrap().count_params(), 784 * 100 + 100 + 100 * 10 + 10);
        assert_eq!(ModelSpec::mlp(1, 100).unwrap().count_params(), 79_510);
        assert_eq!(ModelSpec::mlp(2, 200).unwrap().count_params(), 199_210);
        let cnn = ModelSpec::cnn(1, 3, 2, 8, Pooling::Max).unwrap();
        assert_eq!(
            cnn.count_params(),
            (3 * 3 * 8 + 8) + (13 * 13 * 8 * 200 + 200) + (200 * 10 + 10)
        );
        assert_eq!(cnn.count_params(), 272_690);
    }

    #[test]
    fn name_round_trip() {
        for name in ["MLP-2-200", "CNN-2-3-2-16-none", "CNN-3-3-2-32-max"] {
            let spec: ModelSpec = name.parse().unwrap();
            assert_eq!(spec.to_string(), name);
        }
        assert!("MLP-0-10".parse::<ModelSpec>().is_err());
        assert!("CNN-1-3-2-8-avg".parse::<ModelSpec>().is_err());
        assert!("RNN-1-2".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn none_pooling_ignores_pool_size() {
        let spec: ModelSpec = "CNN-2-3-2-16-none".parse().unwrap();
        assert_eq!(spec.effective_pool(), 1);
        let plan = spec.layer_plan();
        assert_eq!(plan[1].output_len(), 24 * 24 * 16);
    }

    #[test]
    fn degenerate_cnn_is_rejected() {
        // 28 -> 26 -> pool 8 -> 3 -> kernel 5 does not fit.
        assert!(ModelSpec::cnn(2, 3, 8, 4, Pooling::Max).is_err());
        assert!(ModelSpec::cnn(1, 29, 1, 4, Pooling::None).is_err());
        assert!(ModelSpec::cnn(3, 5, 2, 4, Pooling::Max).is_err());
        assert!(ModelSpec::cnn(3, 3, 2, 4, Pooling::Max).is_ok());
    }
}
