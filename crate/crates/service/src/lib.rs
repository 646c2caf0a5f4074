//! HTTP inference service and command-line front end.

pub mod api;
pub mod app;
pub mod cli;
pub mod engine;
pub mod error;

pub use app::{router, AppState};
pub use engine::Engine;
pub use error::ServiceError;
