//! Susceptibility mapping from single-orientation field data: dipole physics,
//! classical inversions, a sinusoidal network that completes the dipole
//! kernel inside its cone-null region, the losses that train it, and
//! evaluation metrics.

pub mod classical;
pub mod dipole;
pub mod error;
pub mod fft;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod recon;
pub mod siren;
pub mod trainer;

pub use error::{QsmError, Result};
