//! Bit-accurate functional model of a fixed-point plenoptic rendering core.
//!
//! The pipeline runs positional encoding ([`peu`]), a tiled MLP built on
//! multiplierless constant multiplication ([`rmcm`], [`mlp`]) and volume
//! rendering ([`vru`]) entirely in 16-bit fixed point ([`fxp`]). [`plcore`]
//! chains them with activity counters, [`renderer`] drives whole frames and
//! hosts the floating-point reference, and [`model_io`] holds the model
//! container, the post-training quantizer and image I/O.

pub mod cli;
pub mod fxp;
pub mod mlp;
pub mod model_io;
pub mod peu;
pub mod plcore;
pub mod renderer;
pub mod rmcm;
pub mod vru;
