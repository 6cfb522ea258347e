//! A small deterministic autodiff engine in double precision with the layer
//! set needed by 1-D residual and small 2-D convolutional classifiers.
//!
//! Everything runs single-threaded; the GEMM backend is used without its
//! threading feature so results are bit-identical across runs.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{BatchStats, Graph, Var};
pub use params::{multistep_lr, Adam, BufferId, ParamId, ParamStore};
pub use tensor::Tensor;
