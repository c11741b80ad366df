//! The analysis service graph: a client gateway with the job store and
//! orchestrator, an internal gateway with the backend registry, and the
//! disc, macula, vessel and report services. Everything runs in one process
//! or as separate processes speaking HTTP.

pub mod config;
pub mod error;
pub mod http;
pub mod internal;
pub mod link;
pub mod orchestrator;
pub mod remote;
pub mod server;
pub mod stages;
pub mod store;
pub mod wire;

pub use config::{ServiceConfig, ServiceName};
pub use error::{ServiceError, ServiceResult};
pub use server::{start, Mode, RunningServer};
