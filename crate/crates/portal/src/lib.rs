//! The forge portal: principals, teams, the platform service layer and its
//! HTTP API.

pub mod auth;
pub mod config;
pub mod error;
pub mod http;
pub mod platform;
pub mod teams;

pub use auth::{Principal, Role};
pub use error::ApiError;
pub use platform::{DatasetSource, Platform};
