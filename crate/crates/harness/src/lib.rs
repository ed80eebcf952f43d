pub mod checker;
pub mod config;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scenario;
pub mod workload;
