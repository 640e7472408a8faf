//! Smart-meter telemetry over LPWAN: radio analysis, payload codecs,
//! connectors, an in-process message bus, a reading store and a fleet simulator.

pub mod bus;
pub mod codecs;
pub mod config;
pub mod connectors;
pub mod error;
pub mod model;
pub mod radio;
pub mod sim;
pub mod store;

pub use error::ModelError;
