//! A small routed vision-language model, built from scratch on f64 tensors.
//!
//! An image is dispatched by a trainable router to exactly one of three
//! specialized vision encoders; the selected expert's tokens are reduced
//! (pixel unshuffle / bilinear resize), mapped through that expert's MLP
//! adapter into a tiny causal decoder, and captioned. Training runs in three
//! stages: router classification, adapter pre-training, and decoder+adapter
//! fine-tuning with the router and encoders frozen.
//!
//! Layout:
//! - [`tensor`], [`nn`], [`optim`], [`rng`]: numeric substrate (hand-written
//!   forward/backward passes, AdamW, deterministic PRNG);
//! - [`vision`]: expert encoders and token reduction;
//! - [`router`]: pooled-feature gating and expert selection;
//! - [`adapters`]: per-expert MLP adapters into the decoder width;
//! - [`decoder`]: causal LM over a symbol vocabulary;
//! - [`synthdata`]: three-domain synthetic dataset generator;
//! - [`pipeline`]: end-to-end forward, staged training, checkpoints,
//!   metrics, ablation;
//! - [`profile`]: desk-scale and full-scale geometry presets.

pub mod adapters;
pub mod check;
pub mod decoder;
pub mod error;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod profile;
pub mod rng;
pub mod router;
pub mod synthdata;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
