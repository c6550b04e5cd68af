//! Training grids: TOML files listing model families and the values to
//! sweep for each hyperparameter.
//!
//! ```toml
//! seeds = [0, 1]
//! train_limit = 4000
//!
//! [train]
//! epochs = 15
//!
//! [[mlp]]
//! layers = [1, 2]
//! neurons = [25, 50, 100]
//!
//! [[cnn]]
//! layers = [1, 2]
//! kernel = [3, 5]
//! pool_size = [2]
//! feature_maps = [8, 16]
//! pooling = ["max", "none"]
//! ```

use std::collections::HashSet;
use std::path::Path;

use faultlab_core::train::TrainConfig;
use faultlab_core::{ModelSpec, Pooling};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainSettings,
    /// Train on the first `train_limit` training images only.
    pub train_limit: Option<usize>,
    /// Report clean error on the first `test_limit` test images only.
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub mlp: Vec<MlpBlock>,
    #[serde(default)]
    pub cnn: Vec<CnnBlock>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Optimizer settings; the per-model seed is derived, never given here.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_conv")]
    pub dropout_conv: f64,
    #[serde(default = "d_dense")]
    pub dropout_dense: f64,
    #[serde(default = "d_rho")]
    pub adadelta_rho: f64,
    #[serde(default = "d_eps")]
    pub adadelta_eps: f64,
}

fn d_batch() -> usize {
    TrainConfig::default().batch_size
}
fn d_epochs() -> usize {
    TrainConfig::default().epochs
}
fn d_conv() -> f64 {
    TrainConfig::default().dropout_conv
}
fn d_dense() -> f64 {
    TrainConfig::default().dropout_dense
}
fn d_rho() -> f64 {
    TrainConfig::default().adadelta_rho
}
fn d_eps() -> f64 {
    TrainConfig::default().adadelta_eps
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            dropout_conv: d.dropout_conv,
            dropout_dense: d.dropout_dense,
            adadelta_rho: d.adadelta_rho,
            adadelta_eps: d.adadelta_eps,
        }
    }
}

impl TrainSettings {
    pub fn with_seed(self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            dropout_conv: self.dropout_conv,
            dropout_dense: self.dropout_dense,
            adadelta_rho: self.adadelta_rho,
            adadelta_eps: self.adadelta_eps,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpBlock {
    pub layers: Vec<usize>,
    pub neurons: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnBlock {
    pub layers: Vec<usize>,
    pub kernel: Vec<usize>,
    pub pool_size: Vec<usize>,
    pub feature_maps: Vec<usize>,
    pub pooling: Vec<Pooling>,
    pub dense_width: Option<usize>,
}

/// One model to train: architecture plus replica seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedModel {
    pub model_id: String,
    pub spec: ModelSpec,
    pub replica: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    pub models: Vec<PlannedModel>,
    /// CNN combinations whose kernels do not fit the shrinking feature map.
    pub skipped: Vec<String>,
}

/// Name used in model ids; the dense width appears only when non-default.
pub fn spec_name(spec: &ModelSpec) -> String {
    match spec.arch() {
        faultlab_core::Architecture::Cnn { dense_width, .. } if *dense_width != ModelSpec::DEFAULT_DENSE_WIDTH => {
            format!("{spec}-w{dense_width}")
        }
        _ => spec.to_string(),
    }
}

pub fn model_id(spec: &ModelSpec, replica: u64) -> String {
    format!("{}-s{replica}", spec_name(spec))
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() as u64 + 1)
                .unwrap_or(0);
            CliError::Parse {
                path: origin.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    /// Expand every block into concrete models, in file order.
    ///
    /// With `pooling = "none"` the pool size has no effect, so only the
    /// first listed P is used. Listing the same model twice is an error.
    pub fn expand(&self) -> Result<GridPlan> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` must not be empty".into()));
        }
        if self.mlp.is_empty() && self.cnn.is_empty() {
            return Err(CliError::Config("grid lists no models".into()));
        }
        let mut specs = Vec::new();
        let mut skipped = Vec::new();
        for block in &self.mlp {
            nonempty("mlp.layers", &block.layers)?;
            nonempty("mlp.neurons", &block.neurons)?;
            for &l in &block.layers {
                for &n in &block.neurons {
                    specs.push(ModelSpec::mlp(l, n)?);
                }
            }
        }
        for block in &self.cnn {
            nonempty("cnn.layers", &block.layers)?;
            nonempty("cnn.kernel", &block.kernel)?;
            nonempty("cnn.pool_size", &block.pool_size)?;
            nonempty("cnn.feature_maps", &block.feature_maps)?;
            nonempty("cnn.pooling", &block.pooling)?;
            let all = block
                .layers
                .iter()
                .chain(&block.kernel)
                .chain(&block.pool_size)
                .chain(&block.feature_maps)
                .chain(&block.dense_width);
            if all.into_iter().any(|&v| v == 0) {
                return Err(CliError::Config("cnn hyperparameters must be >= 1".into()));
            }
            for &l in &block.layers {
                for &c in &block.kernel {
                    for &pooling in &block.pooling {
                        let pools = match pooling {
                            Pooling::Max => &block.pool_size[..],
                            Pooling::None => &block.pool_size[..1],
                        };
                        for &p in pools {
                            for &f in &block.feature_maps {
                                // Every other constraint was checked above, so
                                // a failure here is the spatial one.
                                let spec = match ModelSpec::cnn(l, c, p, f, pooling) {
                                    Ok(s) => s,
                                    Err(_) => {
                                        skipped.push(format!("CNN-{l}-{c}-{p}-{f}-{pooling}"));
                                        continue;
                                    }
                                };
                                specs.push(match block.dense_width {
                                    Some(w) => spec.with_dense_width(w)?,
                                    None => spec,
                                });
                            }
                        }
                    }
                }
            }
        }

        let mut seen = HashSet::new();
        let mut models = Vec::new();
        for spec in specs {
            for &replica in &self.seeds {
                let model_id = model_id(&spec, replica);
                if !seen.insert(model_id.clone()) {
                    return Err(CliError::DuplicateKey(model_id));
                }
                models.push(PlannedModel { model_id, spec, replica });
            }
        }
        Ok(GridPlan { models, skipped })
    }
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(CliError::Config(format!("`{name}` must list at least one value")));
    }
    Ok(())
}
