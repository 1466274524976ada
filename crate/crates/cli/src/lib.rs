//! HTTP service and shared helpers behind the `painter` binary.

pub mod service;
pub mod wire;
