//! Sequence models with predefined sparseness: block-diagonal recurrent
//! layers built from parallel dense LSTM components, and frequency-ordered
//! sparse word embeddings, on top of a small reverse-mode autodiff engine.
//!
//! The numeric core is generic over the scalar type; experiments and
//! checkpoints use the `f64` aliases below.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod gradcheck;
pub mod optim;
pub mod plan;
pub mod recurrent;
pub mod regularization;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
