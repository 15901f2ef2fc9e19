//! Bipolar morphological neural networks: a reverse-mode tensor engine,
//! max-plus BM layers, layer-by-layer conversion of trained CNNs, and the
//! training, data and benchmarking utilities around them.

pub mod bench;
pub mod bm;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use layers::NetworkSpec;
pub use tensor::{Graph, Tensor, Var, NEG_INF};
