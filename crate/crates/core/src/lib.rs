//! Core library for a lightweight anchor-free detector toolkit: NCHW f64
//! tensors and conv primitives, composite blocks (ghost/GS convolutions and
//! a grouped lightweight detection head), an architecture-config parser with
//! static shape inference and forward execution, a parameter/FLOP cost
//! model, hybrid IoU + normalized-Wasserstein box losses with analytic
//! gradients, and mAP evaluation.

pub mod blocks;
pub mod cost;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
