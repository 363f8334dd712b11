//! Experiment harness for the attention estimators in `lara-core`: synthetic
//! and file-backed inputs, error and unbiasedness studies, scaling
//! benchmarks, report emission and the invariant suite.

pub mod alloc;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod method;
pub mod report;
pub mod study;
pub mod svg;
pub mod tensor;

pub use error::{HarnessError, Result};
