//! End-to-end experiment driver: data, training, every compression method,
//! bundling, the runtime exercise and the report.

pub mod config;
pub mod data;
pub mod idx;
pub mod pipeline;
pub mod report;
