//! Conflict-eliminating BEV fusion operator kit.
//!
//! Two fused bird's-eye-view feature maps disagree when a box is missing from
//! one modality (dissolved peak) or misplaced between them (duplicated peak).
//! This crate implements the two mechanisms that remove those conflicts, a
//! small detection stack around them, and a synthetic benchmark that
//! manufactures such scenes deterministically:
//!
//! - flow-based alignment: cross-modal cost volumes drive a per-cell flow
//!   that warps each modality before fusion ([`sfa`]);
//! - query recovery: object queries dissolved in the fused map are recovered
//!   from the single-modality maps under a fusion mask ([`dqr`]);
//! - a transformer decoder, center-heatmap training objective, two-stage
//!   training pipeline, and evaluation metrics ([`decoder`], [`objective`],
//!   [`pipeline`]);
//! - a synthetic conflict-scene generator with controllable drop and
//!   miscalibration rates ([`synth`]).
//!
//! Everything is f64, single-threaded per run, and bit-deterministic for a
//! fixed seed and configuration.

pub mod check;
pub mod cli;
pub mod decoder;
pub mod dqr;
pub mod error;
pub mod grid;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod synth;
pub mod sfa;

pub use error::{Error, Result};
