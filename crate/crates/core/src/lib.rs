//! Primary-components conditional hierarchical VAE workbench.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, a tape-based reverse-mode graph and gradient checks.
//! - [`linear_pc`]: the linear two-component objectives, a PCA oracle and subspace tools.
//! - [`model`]: High VAE, Low VAE, chVAE and pchVAE built on a shared encoder trunk.
//! - [`loss`]: the five-term loss, closed-form KL, ELBO anomaly scores and an MI bound.
//! - [`phantom`]: synthetic phantom slices, anomaly injection and file formats.
//! - [`metrics`]: AUROC, average precision and reconstruction MSE.
//! - [`train`]: Adam, the training loop and checkpoints.
//! - [`experiment`]: evaluation and multi-seed sweeps as used by the CLI.

pub mod autodiff;
pub mod codec;
pub mod config;
pub mod error;
pub mod experiment;
pub mod linear_pc;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, ParamStore, Var};
pub use error::{Error, Result};
pub use rng::SeedStream;
pub use tensor::Tensor;
