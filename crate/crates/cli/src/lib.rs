//! Experiment pipelines, wire formats and the HTTP service behind `lse`.

pub mod commands;
pub mod service;
pub mod wire;
