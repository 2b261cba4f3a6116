//! Dynamically routed transformer captioner.
//!
//! The encoder mixes five modeling cells per layer with per-sample path
//! weights; a vanilla transformer decoder generates captions. Everything is
//! generic over the scalar type; the `*32` / `*64` aliases fix it.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod decode;
pub mod decoder;
pub mod encoder;
mod error;
pub mod metrics;
pub mod model;
pub mod router;
pub mod training;
pub mod vocab;

pub use config::{Arrangement, CellKind, EncoderConfig, Grouping, RouterVariant, RoutingType};
pub use error::{DtnError, Result};
pub use model::{Captioner, DecodeMode, ModelConfig};

pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Captioner32 = model::Captioner<f32>;
pub type Captioner64 = model::Captioner<f64>;
