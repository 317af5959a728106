//! Multi-tenant serving of fine-tuned mixture-of-experts models that share
//! one architecture.
//!
//! * [`consolidate`] builds the device image offline: experts at each
//!   (layer, expert) location are ranked by cross-model similarity and the
//!   most similar locations are filled round-robin from the served models.
//! * [`engine`] serves requests on that image, swapping only non-expert
//!   weights when the requested model changes and fetching missing experts
//!   from the host store.
//! * [`costmodel`] and [`sim`] turn hit/miss behaviour into milliseconds and
//!   replay Poisson workloads under the proposed scheme and the
//!   single-model, MIG and time-sharing baselines.

pub mod consolidate;
pub mod costmodel;
pub mod engine;
pub mod error;
pub mod io;
pub mod model;
pub mod quality;
pub mod rng;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
