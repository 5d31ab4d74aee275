//! Parameter-efficient multi-modal adaptation of a volumetric transformer
//! segmenter.
//!
//! A CT-only model is trained first. It is then upgraded to accept PET by
//! adding a PET patch embedding, low-rank updates (LoRA or DoRA) on the
//! attention projections, a parallel PET input skip path and a
//! missing-modality adapter, while every pre-trained weight stays frozen.
//! Early- and late-fusion baselines, a DeepHit prognosis head and the
//! metrics needed to compare them live alongside.
//!
//! Everything runs on a small reverse-mode autodiff engine in [`tensor`],
//! generic over `f32` (training) and `f64` (gradient checks).

pub mod adaptation;
pub mod backbone;
pub mod data;
mod error;
pub mod fusion;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
