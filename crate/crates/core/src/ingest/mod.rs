//! Cell tables: parsing, validation, patch merging and cohort summaries.
//!
//! The canonical input is a flat table with one row per detected nucleus
//! (`slide_id`, `group`, `cell_type`, `x`, `y`, optionally `cell_id`).
//! Coordinates are whole-slide pixels at the magnification the detector ran
//! at; no unit conversion happens anywhere in the pipeline.

mod patch;
mod summary;
mod table;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use patch::{
    merge_patch_coordinates, parse_patch_detections, parse_slide_groups, GlobalDetection,
    PatchDetection, DEFAULT_PATCH_SIZE,
};
pub use summary::{summarize, SummaryTable};
pub use table::{parse_cell_table, write_cell_table, ColumnMap, ColumnRole, TableFormat};

/// Errors raised while reading or assembling cell tables.
#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed row at line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("schema error: missing column '{column}' for {role}")]
    MissingColumn { role: ColumnRole, column: String },
    #[error("unknown cell type '{token}' at line {line}")]
    UnknownCellType { token: String, line: u64 },
    #[error("non-finite coordinate at line {line}")]
    NonFinite { line: u64 },
    #[error("detection {index}: local coordinate ({x}, {y}) outside [0, {patch_size})")]
    OutOfPatch {
        index: usize,
        x: f64,
        y: f64,
        patch_size: f64,
    },
    #[error("slide '{0}' has no group assignment")]
    UnmappedSlide(String),
    #[error("invalid column map: {0}")]
    ColumnMap(String),
}

/// The six nucleus categories, with a fixed ordinal used by every signature
/// vector and serialized column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellType {
    Neutrophil = 0,
    Epithelial = 1,
    Lymphocyte = 2,
    Plasma = 3,
    Eosinophil = 4,
    Connective = 5,
}

impl CellType {
    pub const COUNT: usize = 6;

    pub const ALL: [CellType; Self::COUNT] = [
        CellType::Neutrophil,
        CellType::Epithelial,
        CellType::Lymphocyte,
        CellType::Plasma,
        CellType::Eosinophil,
        CellType::Connective,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    /// Three-letter column name (`neu`, `epi`, `lym`, `pla`, `eos`, `con`).
    pub fn short_name(self) -> &'static str {
        match self {
            CellType::Neutrophil => "neu",
            CellType::Epithelial => "epi",
            CellType::Lymphocyte => "lym",
            CellType::Plasma => "pla",
            CellType::Eosinophil => "eos",
            CellType::Connective => "con",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            CellType::Neutrophil => "neutrophil",
            CellType::Epithelial => "epithelial",
            CellType::Lymphocyte => "lymphocyte",
            CellType::Plasma => "plasma",
            CellType::Eosinophil => "eosinophil",
            CellType::Connective => "connective",
        }
    }

    /// Row label used in cohort summary tables.
    pub fn table_label(self) -> &'static str {
        match self {
            CellType::Neutrophil => "Neutrophils (neu)",
            CellType::Epithelial => "Epithelial cell (epi)",
            CellType::Lymphocyte => "Lymphocytes (lym)",
            CellType::Plasma => "Plasma cell (pla)",
            CellType::Eosinophil => "Eosinophils (eos)",
            CellType::Connective => "Connective tissue (con)",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Returned when a token does not name one of the six cell types.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown cell type '{0}'")]
pub struct UnknownCellType(pub String);

impl FromStr for CellType {
    type Err = UnknownCellType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let token = s.trim().to_ascii_lowercase();
        let parsed = match token.as_str() {
            "neu" | "neutrophil" | "neutrophils" => CellType::Neutrophil,
            "epi" | "epithelial" | "epithelial cell" | "epithelial cells" => CellType::Epithelial,
            "lym" | "lymphocyte" | "lymphocytes" => CellType::Lymphocyte,
            "pla" | "plasma" | "plasma cell" | "plasma cells" => CellType::Plasma,
            // "eon" is accepted as an eosinophil alias.
            "eos" | "eon" | "eosinophil" | "eosinophils" => CellType::Eosinophil,
            "con" | "connective" | "connective tissue" => CellType::Connective,
            _ => return Err(UnknownCellType(s.to_string())),
        };
        Ok(parsed)
    }
}

impl Serialize for CellType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.short_name())
    }
}

impl<'de> Deserialize<'de> for CellType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let token = String::deserialize(deserializer)?;
        token.parse().map_err(serde::de::Error::custom)
    }
}

/// One detected nucleus in whole-slide coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: u64,
    pub slide_id: String,
    pub group: String,
    pub cell_type: CellType,
    pub x: f64,
    pub y: f64,
}

/// An immutable collection of cells with group and per-slide indexes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortTable {
    cells: Vec<Cell>,
    groups: BTreeSet<String>,
    slides: BTreeMap<String, Vec<Range<usize>>>,
}

impl CohortTable {
    /// Builds the group set and slide index. No invariants are checked here;
    /// see [`validate`].
    pub fn from_cells(cells: Vec<Cell>) -> Self {
        let mut groups = BTreeSet::new();
        let mut slides: BTreeMap<String, Vec<Range<usize>>> = BTreeMap::new();
        for (pos, cell) in cells.iter().enumerate() {
            if !groups.contains(&cell.group) {
                groups.insert(cell.group.clone());
            }
            match slides.get_mut(&cell.slide_id) {
                Some(ranges) => match ranges.last_mut() {
                    Some(last) if last.end == pos => last.end = pos + 1,
                    _ => ranges.push(pos..pos + 1),
                },
                None => {
                    slides.insert(cell.slide_id.clone(), vec![pos..pos + 1]);
                }
            }
        }
        Self {
            cells,
            groups,
            slides,
        }
    }

    /// Assigns each merged detection to its slide's group, numbering cells
    /// sequentially from zero.
    pub fn from_detections(
        detections: Vec<GlobalDetection>,
        slide_groups: &BTreeMap<String, String>,
    ) -> Result<Self, IngestError> {
        let cells = detections
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let group = slide_groups
                    .get(&d.slide_id)
                    .ok_or_else(|| IngestError::UnmappedSlide(d.slide_id.clone()))?
                    .clone();
                Ok(Cell {
                    cell_id: i as u64,
                    slide_id: d.slide_id,
                    group,
                    cell_type: d.cell_type,
                    x: d.x,
                    y: d.y,
                })
            })
            .collect::<Result<Vec<_>, IngestError>>()?;
        Ok(Self::from_cells(cells))
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn groups(&self) -> &BTreeSet<String> {
        &self.groups
    }

    pub fn slide_ids(&self) -> impl Iterator<Item = &str> {
        self.slides.keys().map(String::as_str)
    }

    pub fn slide_count(&self) -> usize {
        self.slides.len()
    }

    /// Contiguous position ranges (into [`cells`](Self::cells)) for one slide.
    pub fn slide_ranges(&self, slide_id: &str) -> Option<&[Range<usize>]> {
        self.slides.get(slide_id).map(Vec::as_slice)
    }

    /// Positions of every cell on `slide_id`, in input order.
    pub fn slide_positions(&self, slide_id: &str) -> Vec<usize> {
        self.slide_ranges(slide_id)
            .map(|ranges| ranges.iter().flat_map(|r| r.clone()).collect())
            .unwrap_or_default()
    }

    pub fn into_cells(self) -> Vec<Cell> {
        self.cells
    }
}

/// The invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    UniqueCellId,
    FiniteCoordinate,
    NonNegativeCoordinate,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::UniqueCellId => "unique cell_id",
            Rule::FiniteCoordinate => "finite coordinate",
            Rule::NonNegativeCoordinate => "non-negative coordinate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub cell_id: u64,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cell {}: {}", self.cell_id, self.rule)
    }
}

/// Lists every broken cell invariant; empty means the cohort is valid.
pub fn validate(cohort: &CohortTable) -> Vec<Violation> {
    let mut seen = HashSet::with_capacity(cohort.len());
    let mut out = Vec::new();
    for cell in cohort.cells() {
        if !seen.insert(cell.cell_id) {
            out.push(Violation {
                cell_id: cell.cell_id,
                rule: Rule::UniqueCellId,
            });
        }
        if !(cell.x.is_finite() && cell.y.is_finite()) {
            out.push(Violation {
                cell_id: cell.cell_id,
                rule: Rule::FiniteCoordinate,
            });
        } else if cell.x < 0.0 || cell.y < 0.0 {
            out.push(Violation {
                cell_id: cell.cell_id,
                rule: Rule::NonNegativeCoordinate,
            });
        }
    }
    out
}
