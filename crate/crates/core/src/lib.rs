//! Target-aligned coverage expansion (TCE) for cross-domain offline
//! reinforcement learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`netcore`]: residual SiLU MLPs with hand-written reverse mode and Adam.
//! - [`diffusion`]: noise schedule, denoising score matching, and the
//!   predictor–corrector reverse sampler.
//! - [`datasets`]: transitions, scalers, training-set assembly, and the
//!   `TCED` binary format.
//! - [`selection`]: nearest-neighbor transition distances and quantile
//!   subset selection of source data.
//! - [`generator`]: the mixture-state and target-transition score models,
//!   auxiliary labelers, and two-stage synthesis.
//! - [`policy`]: implicit Q-learning with a KL pull toward the target
//!   behavior policy.
//! - [`theory`]: exact tabular MDP machinery for the performance-gap bounds.
//! - [`domains`]: linear-Gaussian source/target pairs with known dynamics.
//! - [`config`], [`pipeline`]: experiment configuration and orchestration.

pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod domains;
pub mod error;
pub mod generator;
pub mod matrix;
pub mod netcore;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod selection;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::Matrix;
