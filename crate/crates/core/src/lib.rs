//! Pool-based active learning for 2D slice segmentation.
//!
//! The pipeline: volumes are normalized and sliced ([`data`], [`storage`],
//! [`synthetic`]), a UNet is trained from scratch each cycle ([`trainer`]),
//! unlabelled slices are scored ([`uncertainty`]), a batch is queried
//! ([`selection`]) and the model is evaluated on held-out volumes
//! ([`evaluation`]). [`experiment`] runs the whole loop with resumable
//! persistence and [`report`] aggregates finished runs.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod report;
pub mod selection;
pub mod stats;
pub mod storage;
pub mod synthetic;
pub mod trainer;
pub mod uncertainty;

pub use error::{CoreError, Result};
