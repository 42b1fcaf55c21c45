pub mod checks;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod runner;
pub mod significance;
pub mod sweep;
