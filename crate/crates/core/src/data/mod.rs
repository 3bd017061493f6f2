//! Grid fields, calendar arithmetic, file I/O and the synthetic generator.

pub mod calendar;
pub mod grid;
pub mod io;
pub mod synth;

pub use calendar::{DatasetSplit, NoLeapDay, PeriodSpec, Season};
pub use grid::{align_time, GridField};
pub use io::{load_grid, save_grid};
pub use synth::{generate_pseudo_reality, GroundTruth, PseudoReality, SynthConfig};
