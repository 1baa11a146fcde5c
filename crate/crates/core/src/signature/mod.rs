//! k-nearest-neighbor composition signatures.
//!
//! For every cell, the types of its `k` nearest same-slide neighbors (the cell
//! itself excluded) are counted into a six-bin vector. Ties at equal distance
//! are broken by ascending `cell_id`, which makes results independent of input
//! order and thread count.

mod atlas;
mod code;
mod kdtree;

use std::fmt;

use rayon::prelude::*;

use crate::ingest::{CellType, CohortTable};

pub use atlas::{build_atlas, Anchor, AtlasEntry, SignatureAtlas};
pub use code::{composition_count, MAX_CODE_K};
pub use kdtree::{build_spatial_index, knn_signature, Neighbor, SpatialIndex, DEFAULT_LEAF_SIZE};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignatureError {
    #[error("spatial index needs at least one cell")]
    EmptyIndex,
    #[error("spatial index holds one slide ('{expected}') but got a cell from '{found}'")]
    MixedSlides { expected: String, found: String },
    #[error("duplicate cell_id {0} on one slide")]
    DuplicateCellId(u64),
    #[error("cell {0} is not in the spatial index")]
    CenterNotIndexed(u64),
    #[error("leaf size must be positive")]
    InvalidLeafSize,
    #[error("neighborhood size k must be in 1..={MAX_CODE_K}, got {0}")]
    InvalidK(usize),
    #[error("max radius must be non-negative, got {0}")]
    InvalidRadius(f64),
    #[error("empty atlas: no retained cells for anchor '{0}'")]
    EmptyAtlas(Anchor),
    #[error("assignment does not match cohort: {0}")]
    AssignmentMismatch(String),
    #[error("invalid atlas: {0}")]
    InvalidAtlas(String),
}

/// Counts of neighbor cell types, indexed by [`CellType::ordinal`].
///
/// Ordering (and therefore [`code`](Self::code)) is lexicographic on the
/// count vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeighborhoodSignature {
    counts: [u32; CellType::COUNT],
}

impl NeighborhoodSignature {
    pub fn new(counts: [u32; CellType::COUNT]) -> Self {
        Self { counts }
    }

    pub fn from_types(types: impl IntoIterator<Item = CellType>) -> Self {
        let mut counts = [0; CellType::COUNT];
        for t in types {
            counts[t.ordinal()] += 1;
        }
        Self { counts }
    }

    pub fn counts(&self) -> [u32; CellType::COUNT] {
        self.counts
    }

    pub fn count(&self, t: CellType) -> u32 {
        self.counts[t.ordinal()]
    }

    /// Neighborhood size; always the sum of the counts.
    pub fn k(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Rank of this composition among all compositions of `k()` into six
    /// parts, in lexicographic order. Stable across cohorts and atlases.
    pub fn code(&self) -> u64 {
        code::rank(&self.counts)
    }

    pub fn from_code(code: u64, k: u32) -> Option<Self> {
        code::unrank(code, k).map(Self::new)
    }

    pub fn as_f64(&self) -> [f64; CellType::COUNT] {
        self.counts.map(f64::from)
    }
}

impl fmt::Display for NeighborhoodSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in CellType::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}:{}", t.short_name(), self.counts[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Fewer than `k` other cells on the slide within the search radius.
    InsufficientNeighbors { found: usize },
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::InsufficientNeighbors { .. } => "insufficient neighbors",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignatureOutcome {
    Retained(NeighborhoodSignature),
    Dropped(DropReason),
}

impl SignatureOutcome {
    pub fn signature(&self) -> Option<&NeighborhoodSignature> {
        match self {
            SignatureOutcome::Retained(s) => Some(s),
            SignatureOutcome::Dropped(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignatureParams {
    pub k: usize,
    /// Neighbors must lie strictly closer than this; `None` is unbounded.
    pub max_radius: Option<f64>,
    pub leaf_size: usize,
}

impl Default for SignatureParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_radius: None,
            leaf_size: DEFAULT_LEAF_SIZE,
        }
    }
}

impl SignatureParams {
    fn check(&self) -> Result<(), SignatureError> {
        if self.k == 0 || self.k > MAX_CODE_K as usize {
            return Err(SignatureError::InvalidK(self.k));
        }
        if self.leaf_size == 0 {
            return Err(SignatureError::InvalidLeafSize);
        }
        if let Some(r) = self.max_radius {
            if !(r >= 0.0) {
                return Err(SignatureError::InvalidRadius(r));
            }
        }
        Ok(())
    }
}

/// Per-cell outcomes, in cohort order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureAssignment {
    k: u32,
    entries: Vec<(u64, SignatureOutcome)>,
}

impl SignatureAssignment {
    pub fn from_entries(k: u32, entries: Vec<(u64, SignatureOutcome)>) -> Self {
        Self { k, entries }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn entries(&self) -> &[(u64, SignatureOutcome)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retained_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, o)| matches!(o, SignatureOutcome::Retained(_)))
            .count()
    }

    pub fn dropped_count(&self) -> usize {
        self.len() - self.retained_count()
    }
}

/// Computes every cell's signature, building one index per slide.
///
/// Slides are processed in parallel; the result is keyed by cohort position,
/// so it does not depend on the number of threads.
pub fn compute_signatures(
    cohort: &CohortTable,
    params: &SignatureParams,
) -> Result<SignatureAssignment, SignatureError> {
    params.check()?;
    let radius2 = params.max_radius.map_or(f64::INFINITY, |r| r * r);
    let slides: Vec<&str> = cohort.slide_ids().collect();
    let per_slide: Vec<Vec<(usize, SignatureOutcome)>> = slides
        .par_iter()
        .map(|slide| {
            let positions = cohort.slide_positions(slide);
            let cells = positions.iter().map(|&p| &cohort.cells()[p]);
            let index = SpatialIndex::build(cells, params.leaf_size)?;
            Ok(positions
                .iter()
                .enumerate()
                .map(|(local, &pos)| {
                    let outcome = index.signature_at(index.tree_position(local), params.k, radius2);
                    (pos, outcome)
                })
                .collect())
        })
        .collect::<Result<_, SignatureError>>()?;

    let mut outcomes: Vec<Option<SignatureOutcome>> = vec![None; cohort.len()];
    for (pos, outcome) in per_slide.into_iter().flatten() {
        outcomes[pos] = Some(outcome);
    }
    let entries = cohort
        .cells()
        .iter()
        .zip(outcomes)
        .map(|(cell, o)| (cell.cell_id, o.expect("slide index covers every cell")))
        .collect();
    Ok(SignatureAssignment {
        k: params.k as u32,
        entries,
    })
}
