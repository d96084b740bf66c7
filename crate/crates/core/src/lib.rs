//! Sparse set prediction of next-day fire clusters.
//!
//! The crate covers the full pipeline at desk scale: ground-truth cluster
//! targets built from future fire frames, exact Hungarian matching with an
//! asymmetric classification/localization cost, a differentiable set loss,
//! a small query decoder on a reverse-mode autodiff engine, a synthetic fire
//! world, and event/coverage/raster evaluation with brute-force oracles.

pub mod harness;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod setloss;
pub mod simulator;
pub mod targets;
pub mod tensor;
