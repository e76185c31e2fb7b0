//! Multimodal translation workbench: a Transformer whose decoder can attend
//! to image grid features next to the source sentence, an auxiliary
//! "imagination" head that predicts pooled image features from the encoder,
//! and the data, training and evaluation machinery around them.

pub mod attention;
pub mod charlm;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ImageFeatures, Model, ModelConfig, ModelMode, Sample};
pub use rng::SplitMix64;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
