//! Few-shot binary segmentation with masked cross-image encoding.
//!
//! A frozen convolutional backbone feeds three guidance products to a small
//! ASPP decoder: a masked-average-pooled class prototype, a level-4 cosine
//! similarity map, and the cross-image encoding of support and query
//! tokens. The crate also carries the synthetic episodic benchmark used to
//! train and evaluate it.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod episode;
pub mod error;
pub mod harness;
pub mod head;
pub mod mce;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pnm;
pub mod prototype;
pub mod suite;
pub mod train;

pub use config::RunConfig;
pub use error::{MceError, Result};
pub use model::MceModel;
