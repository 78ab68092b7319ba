//! Domain logic for the CernVM cloud gateway: contextualization contexts,
//! PIN pairing, cluster definitions, the shared state store, the message bus,
//! cloud agents and the gateway-side orchestration.

pub mod bus;
pub mod clock;
pub mod cloud;
pub mod cluster;
pub mod context;
pub mod error;
pub mod gateway;
pub mod ids;
pub mod lab;
pub mod pairing;
pub mod principal;
pub mod store;

pub use error::{Error, ErrorBody, Result};
pub use principal::Principal;
