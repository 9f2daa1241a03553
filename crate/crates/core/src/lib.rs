//! Desk-scale sparsely annotated semantic segmentation: a hierarchical
//! patch-attention encoder, attention-propagated class probabilities, an
//! affinity consistency loss, verified reverse-mode gradients, and a
//! synthetic sparse-annotation benchmark.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod parallel;
pub mod pnm;
pub mod rng;
pub mod seg_head;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vis;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
