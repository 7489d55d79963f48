//! Deterministic numerics: dense tensors, a reverse-mode tape, a seeded PRNG,
//! Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{GradCheck, GradCheckReport};
pub use rng::Rng;
pub use tape::{bilinear_at, sigmoid, NodeId, Tape};
pub use tensor::Tensor;
