//! Stage drivers and the SVG renderer behind the `cellnn` binary.

pub mod render;
pub mod stages;
