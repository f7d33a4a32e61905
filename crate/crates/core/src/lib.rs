//! Multi-scale camouflaged-object segmentation stack.
//!
//! Everything here is built on one dense-tensor engine with reverse-mode
//! automatic differentiation (`tensor`). On top of it sit the parameter and
//! layer toolkit (`nn`), the zoom pyramid (`pyramid`), the shared triplet
//! encoder (`encoder`), the multi-head scale-integration unit (`mhsiu`), the
//! grouped granularity-perception unit with its optional temporal branch
//! (`rgpu`), the assembled model (`model`) and training loop (`train`), the
//! loss zoo (`losses`), evaluation metrics (`metrics`), and
//! dataset/serialization tooling (`data`).

pub mod data;
pub mod encoder;
pub mod losses;
pub mod metrics;
pub mod mhsiu;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod rgpu;
pub mod tensor;
pub mod train;

pub use tensor::{Elem, Tensor, TensorError};
