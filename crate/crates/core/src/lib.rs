//! Sign-language translation from spatial and motion video features: frozen
//! encoders, a trainable sign adapter, contrastive visual–text alignment, a
//! LoRA-adapted decoder, two-phase training and the analysis tools.

pub mod adapter;
pub mod align;
pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod llm;
pub mod motion;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod spatial;
pub mod spft;
pub mod trainer;

pub use error::{Error, Result};
