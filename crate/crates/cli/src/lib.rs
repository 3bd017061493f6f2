//! Command-line pipeline around the `ensdown` library: synthesize data,
//! train ensembles, predict, evaluate, and run whole experiments. Every
//! command writes one output directory holding its artifacts and a
//! `manifest.json` that records the resolved settings, seeds, inputs,
//! artifact hashes and run time.

pub mod cli;
pub mod commands;
pub mod experiment;
pub mod manifest;

pub use cli::{run, Cli};
