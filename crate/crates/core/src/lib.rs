//! Language-conditioned latent alignment for 2D differential-drive
//! navigation.
//!
//! The crate trains a privileged point-goal expert with PPO in a small 2D
//! simulator, freezes its latent interface, and then trains a
//! language-conditioned adapter that maps synthetic egocentric vision plus an
//! instruction embedding into the expert's latent space. Frozen expert
//! suffix layers decode those latents into wheel commands, which transfers
//! the expert's behavior to unseen goal categories without touching its
//! weights.

pub mod adapter;
pub mod alignment;
pub mod error;
pub mod eval;
pub mod expert;
pub mod featurize;
pub mod perception;
pub mod robustness;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
