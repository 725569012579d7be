//! `dycaf`: a CPU reference implementation of an equilibrium-based feature
//! pyramid neck with dynamic dual attention and class-aware adaptation.
//!
//! Everything is 64-bit and runs on a small reverse-mode tape, so every
//! gradient can be checked against central differences.
//!
//! # Modules
//!
//! - [`tensor`]: `(n, c, h, w)` tensors, the primitive kernels and DT4 file I/O
//! - [`params`]: named parameter store with per-name seeded initialization
//! - [`autodiff`]: the tape, its backward rules and the finite-difference oracle
//! - [`attention`]: dynamic GAP, channel bottleneck and spatial mask
//! - [`equilibrium`]: fusion operator, Broyden solver, implicit gradients
//! - [`neck`]: lateral projections, the two sweeps and per-level equilibria
//! - [`class_adapt`], [`kmeans`]: prototype and conv class-attention heads
//! - [`losses`]: equilibrium consistency, KL-to-uniform and the weighted total
//! - [`harness`]: config files, the four commands and JSON reports

pub mod attention;
pub mod autodiff;
pub mod class_adapt;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod kmeans;
pub mod losses;
pub mod neck;
pub mod params;
pub mod tensor;

pub use autodiff::{GradMap, Tape, Var};
pub use equilibrium::{EquilibriumResult, SolverConfig};
pub use error::{Error, Result};
pub use neck::{FeaturePyramid, Neck, NeckConfig};
pub use params::ParamStore;
pub use tensor::{Shape, Tensor4};
