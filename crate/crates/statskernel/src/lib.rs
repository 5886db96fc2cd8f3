//! Numerical building blocks for the MVPA / metabolic-syndrome samplers:
//! small dense linear algebra, random variates, log densities, least squares,
//! convergence diagnostics and an adaptive random-walk Metropolis kernel.
//!
//! All randomness flows through [`rng::KernelRng`], a ChaCha8 generator with
//! independent numbered streams, so every draw is reproducible from a seed.

pub mod density;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod linalg;
pub mod metropolis;
pub mod rng;

pub use diagnostics::{effective_sample_size, gelman_rubin, split_rhat, Rhat};
pub use error::{KernelError, Result};
pub use linalg::{ols, OlsFit, Spd};
pub use metropolis::{adaptive_rw_metropolis, AdaptiveSettings, ChainState, Step};
pub use rng::{stream_id, stream_rng, KernelRng};
