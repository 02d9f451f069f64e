//! Domain re-modulation for few-shot generative domain adaptation.
//!
//! A frozen style-based source generator is extended with per-domain
//! trainable mapping + affine modules whose styles are blended with the
//! source styles. Modules can be stored in a bank and combined at
//! inference time for multi-domain and hybrid-domain synthesis.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod image;
pub mod nn;

pub use error::{DormError, Result};
pub mod dorm;
pub mod encoder;
pub mod losses;
pub mod data;
pub mod metrics;
pub mod toy;
pub mod training;
