//! Desk-scale multi-entity video diffusion.
//!
//! The pipeline generates short videos containing several visual entities,
//! each bound to its own reference image and audio track. A diffusion
//! transformer predicts, per entity, a spatiotemporal occupancy mask from
//! the evolving video latent; during sampling those masks are cached across
//! denoising steps and gate where each entity's audio features are injected.
//!
//! Crate layout mirrors the pipeline stages:
//!
//! * [`synthgen`] — synthetic multi-entity scenes with ground-truth masks
//!   and audio-coupled appearance.
//! * [`codec`] — invertible space-time patchify codec (pixel <-> latent).
//! * [`features`] — audio feature extraction, mute tracks, caption tokens.
//! * [`backbone`] — dual-stream diffusion transformer with joint attention.
//! * [`layout`] — per-layer mask predictor heads and the cross-step cache.
//! * [`audiocond`] — mask-gated per-entity audio cross-attention.
//! * [`trainer`] — flow-matching + focal-loss training loop.
//! * [`sampler`] — Euler denoising loop with CFG and iterative mask caching.
//! * [`eval`] — mask IoU, audio attribution, ablation harness, Frechet score.
//! * [`cli`] — subcommands, config files, tensor container I/O.

pub mod audiocond;
pub mod backbone;
pub mod cli;
pub mod codec;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod layout;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod synthgen;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
