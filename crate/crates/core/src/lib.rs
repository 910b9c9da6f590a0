//! A desk-scale referring image segmentation model with image-conditioned
//! language queries, per-layer query calibration in the decoder, and a
//! language reconstruction objective, built on a small reverse-mode
//! autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases at the crate
//! root fix the two precisions the tooling uses: `f32` for training and
//! `f64` for gradient verification.

pub mod cdec;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod optim;
pub mod qgm;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use model::{Mode, Model};
pub use nn::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
