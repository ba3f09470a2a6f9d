//! Minimal reverse-mode differentiation: a dynamic tape over dense f64
//! arrays, finite-difference checking, and AdamW.

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub use optim::{adamw_step, AdamWConfig, Parameter};
pub use tape::{Tape, Var};
