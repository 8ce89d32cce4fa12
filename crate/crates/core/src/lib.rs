//! Multi-view CT lesion detection at desk scale: windowed rendering of HU
//! volumes, a shared-weight multi-pathway detector with channel-attention
//! fusion and position supervision, and FROC evaluation.

pub mod autodiff;
pub mod cluster;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod froc;
pub mod model;
pub mod phantom;
pub mod volume;
pub mod windowing;

pub use error::{Error, Result};
