//! Experiment runner front end: result files and SVG figures.

pub mod plot;
pub mod report;

pub use plot::{figure, render_svg, Chart, Figure, Series};
pub use report::{emit_csv, parse_csv, read_csv, write_csv, RunFile, RunMeta, HEADER};
