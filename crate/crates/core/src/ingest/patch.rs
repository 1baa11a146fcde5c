//! Patch-local detections lifted back into whole-slide coordinates.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{CellType, IngestError};

/// Tile edge length, in pixels, used by the upstream segmentation model.
pub const DEFAULT_PATCH_SIZE: f64 = 256.0;

fn default_patch_size() -> f64 {
    DEFAULT_PATCH_SIZE
}

/// A nucleus centroid expressed relative to the top-left corner of its patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDetection {
    pub slide_id: String,
    pub patch_origin_x: f64,
    pub patch_origin_y: f64,
    pub local_x: f64,
    pub local_y: f64,
    #[serde(default = "default_patch_size")]
    pub patch_size: f64,
    pub cell_type: CellType,
}

/// A detection in whole-slide pixel space, not yet assigned to a cohort group.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDetection {
    pub slide_id: String,
    pub cell_type: CellType,
    pub x: f64,
    pub y: f64,
}

fn in_patch(v: f64, size: f64) -> bool {
    v.is_finite() && (0.0..size).contains(&v)
}

/// Adds each patch origin to its local centroid. Order and cell types are
/// preserved.
pub fn merge_patch_coordinates(
    detections: &[PatchDetection],
) -> Result<Vec<GlobalDetection>, IngestError> {
    detections
        .iter()
        .enumerate()
        .map(|(index, d)| {
            if !(in_patch(d.local_x, d.patch_size) && in_patch(d.local_y, d.patch_size)) {
                return Err(IngestError::OutOfPatch {
                    index,
                    x: d.local_x,
                    y: d.local_y,
                    patch_size: d.patch_size,
                });
            }
            Ok(GlobalDetection {
                slide_id: d.slide_id.clone(),
                cell_type: d.cell_type,
                x: d.patch_origin_x + d.local_x,
                y: d.patch_origin_y + d.local_y,
            })
        })
        .collect()
}

/// Reads a detection CSV with columns `slide_id, patch_origin_x,
/// patch_origin_y, local_x, local_y, cell_type` and an optional
/// `patch_size`.
pub fn parse_patch_detections<R: Read>(source: R) -> Result<Vec<PatchDetection>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = Vec::new();
    for row in reader.deserialize::<PatchDetection>() {
        out.push(row.map_err(|e| IngestError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads a `slide_id,group` CSV mapping each slide to its cohort group.
pub fn parse_slide_groups<R: Read>(source: R) -> Result<BTreeMap<String, String>, IngestError> {
    #[derive(Deserialize)]
    struct Row {
        slide_id: String,
        group: String,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| IngestError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        out.insert(row.slide_id, row.group);
    }
    Ok(out)
}
