//! Three-way stroke triage (no stroke / hemorrhagic / ischemic) from CT-style
//! images.
//!
//! The crate covers the whole workflow: corpus manifests and the stratified
//! split, preprocessing and classical augmentation, a label-conditioned GAN
//! for minority-class synthesis, four transformer/hybrid backbones (ViT, TNT,
//! ConvNeXt, MaxViT) with transfer-learning utilities, metric evaluation, and
//! Grad-CAM / Grad-CAM++ explanations.

pub mod backbones;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gan;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
