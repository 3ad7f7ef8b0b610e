//! HTTP job service over the nep-core generator, editor and refiner, plus the `nep`
//! command-line front end.
//!
//! Endpoints: `POST /v1/generate`, `POST /v1/edit`, `POST /v1/refine` (each returns a job
//! id), `GET /v1/jobs/{id}` and `GET /v1/health`.

pub mod api;
pub mod cli;
pub mod engine;
pub mod error;
pub mod jobs;
pub mod server;

pub use engine::Engine;
pub use error::ServiceError;
pub use server::{router, AppState};
