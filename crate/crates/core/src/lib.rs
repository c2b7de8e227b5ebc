//! Core algorithms for small-scale multi-modal domain generalization
//! experiments.
//!
//! The crate is `no_std` (it needs `alloc`) and contains no IO. It provides
//! a dense `f64` tensor type with a recorded reverse-mode differentiation
//! graph, Adam, small per-modality MLP encoders with uni-modal and fused
//! heads, a synthetic multi-domain multi-modal data generator, and the
//! training algorithm itself: confidence-driven modality dropout, a
//! first-order uni-modal inner step, an EMA teacher and KL distillation.
//! A perturbation-based flatness probe sits on top.
//!
//! File formats, configuration loading and the command-line front end live
//! in the `mbcd-lab` crate.
#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod flatness;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;
