//! Plug-and-play ADMM hyperspectral unmixing.
//!
//! Given a hyperspectral cube and known endmember spectra, [`pnp::unmix`]
//! estimates per-pixel abundances that are non-negative and sum to one,
//! alternating a per-pixel simplex QP with an off-the-shelf image denoiser
//! that plays the role of the prior.

pub mod denoise;
pub mod error;
pub mod io;
pub mod model;
mod par;
pub mod pnp;
pub mod qp;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{AbundanceMatrix, EndmemberMatrix, MetricsReport};
pub use pnp::{unmix, PnpConfig, UnmixOutput};
pub use qp::Mode;
pub use tensor::{fold, unfold, HsiCube, PixelMatrix, Plane};
