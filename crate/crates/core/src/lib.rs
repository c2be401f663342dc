//! Skeleton-based action quality assessment: pose cleaning, a graph
//! convolutional joint encoder, discriminative non-local attention that
//! distills long sequences into a fixed-length vector, and a score/gender
//! head, all on a small self-contained autodiff engine.

// `!(x > 0.0)` style range checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod harness;
pub mod heads;
pub mod jfe;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
