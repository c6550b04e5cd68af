//! Faulty-inference laboratory for small deep networks.
//!
//! Trains MLP and CNN classifiers with fault-free backpropagation, then
//! evaluates them while injecting per-scalar computation deviations before
//! every activation (conditionally uniform or erasure models), and provides
//! the robustness, smallest-model and fault-tolerance-efficiency analyses.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fault;
pub mod nn;
pub mod rng;
pub mod spec;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use fault::{DeviationConfig, DeviationKind, Mask};
pub use nn::{Layer, TrainedModel};
pub use spec::{Architecture, InputShape, ModelSpec, Pooling};
pub use tensor::Tensor;
