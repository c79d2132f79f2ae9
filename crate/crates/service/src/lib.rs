//! Screening service: a durable case store, an in-process analysis queue,
//! the HTTP API over both, and the helpers behind the `drscreen` CLI.

pub mod api;
pub mod error;
pub mod model;
pub mod store;
pub mod tools;
pub mod worker;

pub use api::{router, Server};
pub use error::{Result, ServiceError};
pub use store::Store;
pub use worker::{Service, ServiceConfig};
