//! Teacher-student anomaly detection on frozen Vision Transformer patch
//! embeddings, with size-aware segmentation metrics.
//!
//! Two shallow MLPs learn to map the patch embeddings of one Transformer
//! layer onto those of a deeper layer and back. On anomalous images the
//! mappings break down, and the per-patch prediction errors of both
//! directions, multiplied together, form the anomaly map.

pub mod anomaly_map;
pub mod error;
pub mod feature_store;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;
pub mod student;

pub use error::{Error, ErrorKind, Result};
