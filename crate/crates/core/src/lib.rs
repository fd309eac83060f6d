//! Frame interpolation with test-time motion adaptation: a frozen classical
//! motion estimator, a differentiable synthesis path, a plug-in per-pixel
//! affine flow adapter, and a cycle-consistency optimization loop, plus a
//! synthetic ground-truth benchmark harness.

pub mod adaptation;
pub mod adapter;
pub mod config;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
