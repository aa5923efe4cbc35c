//! Speculative-decoding laboratory: a toy target transformer, three drafter
//! families, tree drafting and verification, drafter distillation, and a
//! simulated client-server transport.

pub mod checkpoint;
pub mod distill;
pub mod drafters;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod speculation;
pub mod target_model;
pub mod transport;

pub use error::{Error, Result};
