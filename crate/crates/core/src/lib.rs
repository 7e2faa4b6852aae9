//! Multi-look coherent lidar reconstruction.
//!
//! The crate models a coherent lidar as an aperture-masked orthonormal 3D DFT
//! and reconstructs the speckle-free reflectivity from several independent
//! looks by running a consensus equilibrium between one EM-surrogate data
//! agent per look and a single prior (denoising) agent.
//!
//! Module map:
//!
//! * [`volume`]: dense real/complex grids, the orthonormal 3D DFT, aperture masks.
//! * [`forward`]: the measurement operator `A = D(a) F`, its adjoint and the
//!   back-projection initializer.
//! * [`sim`]: Lambertian phantoms and fully developed speckle simulation.
//! * [`em`]: EM surrogate data agents (covariance diagonal, conditional-mean
//!   gradient step, cubic and quadratic proximal maps).
//! * [`dense`]: small-`n` dense likelihood and surrogate evaluators used as
//!   oracles.
//! * [`prior`]: TV, l2,1, Gaussian and external-sidecar prior agents.
//! * [`mace`]: consensus engine and the full reconstruction loop.
//! * [`theory`]: majorized consensus on toy quadratic problems.
//! * [`metrics`]: PSNR, point clouds, nearest-neighbour distances and NRMSE.
//! * [`io`]: binary volume files, dataset bundles, configuration, reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dense;
pub mod em;
pub mod error;
pub mod forward;
pub mod io;
pub mod mace;
pub mod metrics;
pub mod prior;
pub mod sim;
pub mod theory;
pub mod volume;

pub use error::{Error, Result};
pub use forward::ForwardOperator;
pub use volume::{ApertureMask, ComplexVolume, Dims, PadFactor, RealVolume};

pub use num_complex::Complex64;
