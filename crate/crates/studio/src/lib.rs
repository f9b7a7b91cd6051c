//! HTTP generation service: request validation, a bounded worker pool over a
//! swappable model snapshot, and a durable run log with an image store.

pub mod api;
pub mod config;
pub mod error;
pub mod server;
pub mod store;

pub use api::{GenerationRequest, PairInput, ResolvedRequest};
pub use config::{ConfigOverrides, StudioConfig};
pub use error::{ErrorBody, StudioError};
pub use server::{serve, serve_on, CheckpointList, Health, LoadResult, RunView, Studio, Submitted};
pub use store::{RunRecord, RunStatus, RunStore};
