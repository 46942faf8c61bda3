//! Similarity-keeping multimodal contrastive learning between EEG time
//! series and frozen image embeddings: encoders, losses, training,
//! zero-shot retrieval evaluation, and model interpretation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod io;
pub mod encoders;
pub mod losses;
pub mod params;
pub mod registry;
pub mod training;
pub mod types;

pub use error::{Error, Result};
