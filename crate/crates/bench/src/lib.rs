//! Experiment harness: configuration, matrix execution, deterministic CSV
//! output and SVG figures.

pub mod config;
pub mod plot;
pub mod records;
pub mod runner;
