//! A self-contained engine for episodic meta-learning with a variational
//! information bottleneck, aimed at multi-domain digit-style recognition
//! at desk scale.
//!
//! The crate provides, bottom to top:
//!
//! - [`autodiff`]: a reverse-mode tape over dense f64 tensors with a
//!   rayon-parallel kernel core (sequential fallback behind the
//!   `parallel` feature);
//! - [`distributions`]: diagonal Gaussians with reparameterized sampling
//!   and closed-form KL divergence;
//! - [`networks`]: the feature extractor and the two amortized inference
//!   networks, plus parameter initialization and checkpointing;
//! - [`objectives`]: the bottleneck-regularized episodic loss and its
//!   ablations (plain VIB, probabilistic baseline, deterministic ERM);
//! - [`data`]: IDX ingestion, rotation-domain synthesis, a procedural
//!   glyph fallback, and the episode sampler;
//! - [`trainer`]: the Adam-based episodic training loop with
//!   validation-based model selection and exact-resume checkpoints;
//! - [`evaluation`]: leave-one-domain-out testing, Monte-Carlo
//!   prediction with per-classifier uncertainty, ablation/sweep
//!   harnesses, and information-plane estimates;
//! - [`cli`]: the command-line surface.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod infoplane;
pub mod networks;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
