pub mod charts;
pub mod config;
pub mod runner;
