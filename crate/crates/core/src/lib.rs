//! Numeric substrate and model architecture for BLaLM: tensors, seeded
//! randomness, reverse-mode autodiff with a finite-difference checker, the
//! shared transformer layers, every token mixer (causal and sliding-window
//! attention, the mLSTM matrix-memory cell in recurrent and parallel form,
//! Hedgehog feature maps, branch combination), and the assembled decoder.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod mixers;
pub mod model;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use graph::{Graph, Var};
pub use param::{ParamSet, Parameter, ShapeClass};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;
