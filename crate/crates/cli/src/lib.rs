//! Command-line workflows and the HTTP editing service.

pub mod commands;
pub mod service;
