//! Hierarchical windowed-attention engine for paralinguistic sequence
//! classification on precomputed acoustic features: a four-stage encoder
//! built on speech-unit duration statistics, a standard-Transformer
//! baseline, an analytic cost model, reverse-mode differentiation, and a
//! desk-scale training loop.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod error;
pub mod features;
pub mod hierarchy;
pub mod numerics;
pub mod training;
pub mod weights;

pub use error::{HierformError, Result};
