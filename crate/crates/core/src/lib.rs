//! Masked latent graph diffusion pre-training for histopathology patches.
//!
//! A patch becomes a superpixel entity graph ([`entity_graph`]), each tile
//! is compressed by a small VAE ([`latent_codec`]), and a GNN encoder with a
//! cross-attention diffusion decoder ([`backbone`]) learns to denoise masked
//! parts of the latent graph from the visible rest ([`pretrain`]). The
//! encoder then feeds classification and survival heads ([`downstream`]).

pub mod backbone;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod downstream;
pub mod entity_graph;
pub mod error;
pub mod experiment;
pub mod latent_codec;
pub mod mask_split;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod pretrain;
pub mod synthetic;

pub use error::{Error, Result};
