//! HTTP API and command line front end over `recall-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod provider;
pub mod service;

pub use config::ServiceConfig;
pub use error::GatewayError;
pub use service::Service;
