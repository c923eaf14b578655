//! Fully automatic two-stage intervertebral disc segmentation from
//! multimodal spine volumes.
//!
//! The pipeline: multimodal volume handling ([`volume`]), Weber contrast
//! analysis ([`contrast`]), affine and elastic augmentation ([`augment`]),
//! a from-scratch differentiable 3D (and 2D) U-Net ([`nn`], [`unet`]),
//! connected-component localization with patch cropping and reassembly
//! ([`pipeline`]), Dice/Hausdorff evaluation ([`metrics`]), and a
//! deterministic synthetic Dixon phantom ([`phantom`]) so everything runs
//! at desk scale.
//!
//! All randomness flows from explicit seeds and every parallel reduction
//! uses a fixed order, so identical configurations produce byte-identical
//! results.

pub mod augment;
pub mod contrast;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod unet;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
