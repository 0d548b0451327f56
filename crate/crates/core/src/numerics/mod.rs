//! Tensor algebra with reverse-mode differentiation, deterministic RNG
//! streams, and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_multi};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
