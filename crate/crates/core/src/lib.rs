//! Dual-branch infrared small-target detector built on a from-scratch tensor
//! kernel layer with reverse-mode gradients.

pub mod autodiff;
pub mod dse;
pub mod error;
pub mod gradcheck;
pub mod lasea;
pub mod metrics;
pub mod layers;
pub mod network;
pub mod ops;
pub mod params;
pub mod pgm;
pub mod scanbench;
pub mod serialize;
pub mod ssm;
pub mod suites;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Region, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
