//! Benchmark harness for client-side MQTT bridges: load generation, the
//! bridge under test, measurement, orchestration and reporting.

pub mod bridge;
pub mod config;
pub mod loadgen;
pub mod metrics;
pub mod presets;
pub mod report;
pub mod runner;
