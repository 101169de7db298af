//! Numeric substrate: tensors, matrix kernels, the autodiff tape, attention,
//! parameter storage and gradient checking. Everything here is generic over
//! [`Real`] and free of any model-specific knowledge.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use attention::attention;
pub use gradcheck::{check_gradients, GradCheckSettings, GradMap, GradReport};
pub use graph::{GradStore, Graph, Var};
pub use params::{Param, ParamSet};
pub use rng::derive_rng;
pub use scalar::Real;
pub use tensor::Tensor;
