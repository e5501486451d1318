//! Pairing-free group-level knowledge distillation on a desk-scale,
//! framework-free stack: a reverse-mode autodiff tensor engine, a small
//! CNN classifier with class activation maps, group construction,
//! prototype and dense distillation heads, a trainer, a synthetic
//! two-modality benchmark, and cross-validation tooling.

pub mod adam;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod grouping;
pub mod linalg;
pub mod metrics;
pub mod qformer;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adam::{AdamState, Param};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, NEG_INF};
