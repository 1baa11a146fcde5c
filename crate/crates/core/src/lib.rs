//! Cell-neighborhood spatial analysis.
//!
//! The pipeline reads per-nucleus tables ([`ingest`]), counts the cell types
//! among each cell's nearest same-slide neighbors ([`signature`]), embeds the
//! distinct signatures in 2-D with a weighted t-SNE ([`embed`]), estimates per
//! group densities over the embedding ([`density`]) and compares groups inside
//! analyst-drawn boxes ([`quantify`]). [`synth`] generates cohorts with planted
//! neighborhood motifs and [`io`] holds the CSV/JSON artifact formats shared by
//! the CLI and the HTTP service.

pub mod density;
pub mod embed;
pub mod ingest;
pub mod io;
pub mod quantify;
pub mod signature;
pub mod synth;

pub use ingest::{Cell, CellType, CohortTable};
pub use signature::{Anchor, NeighborhoodSignature, SignatureAtlas};

/// Version tag carried by every JSON document the crate emits.
pub const SCHEMA_VERSION: u32 = 1;
