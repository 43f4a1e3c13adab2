//! Marionette: a desk-scale latent diffusion pipeline for audio- and
//! pose-driven half-body avatar animation.
//!
//! Everything runs on the CPU with plain `f32` arrays; there is no external
//! ML framework. The crate is organised around three mechanisms:
//!
//! * a vector-quantised hand autoencoder whose codebook tokens condition the
//!   denoiser through hand-masked cross-attention ([`codebook`]),
//! * dual-stream audio conditioning that splits pooled rhythm features from
//!   fine lip tokens and injects the rhythm stream only inside a head mask
//!   ([`audio`]),
//! * a closed-form skeleton calibration that retargets driving poses onto a
//!   reference subject before pose maps are rendered ([`skeleton`]).
//!
//! The [`diffusion`] module holds the noise schedule and sampling steps, the
//! [`denoiser`] module the conditional U-Net and its two training stages, and
//! the [`harness`] module synthetic data, metrics and run orchestration.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release -p marionette --example diffusion_basics
//! cargo run --release -p marionette --example train_hand_codebook
//! cargo run --release -p marionette --example hand_tokens
//! cargo run --release -p marionette --example audio_conditioning
//! cargo run --release -p marionette --example calibrate_pose
//! cargo run --release -p marionette --example motion_metrics
//! cargo run --release -p marionette --example train_and_generate
//! cargo run --release -p marionette --example ablation_grid
//! ```
//!
//! The thin `marionette` binary wraps the same entry points as subcommands
//! (`make-data`, `train`, `generate`, `calibrate`, `metrics`, `ablate`).

pub mod attention;
pub mod audio;
pub mod codebook;
pub mod denoiser;
pub mod container;
pub mod diffusion;
pub mod skeleton;
pub mod tensor;

pub use tensor::{Arr, ArrView};
