//! Bounding-box queries in embedding space: per-group occupancy, the
//! within-box fraction ratio between two groups, and ROI composition.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::Embedding2D;
use crate::ingest::CellType;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantifyError {
    #[error("invalid bbox: {0}")]
    InvalidBBox(String),
    #[error("unknown group '{0}'")]
    UnknownGroup(String),
    #[error("group '{0}' has zero total weight")]
    EmptyGroup(String),
    #[error("empty ROI")]
    EmptyRoi,
}

/// Closed axis-aligned box `[xmin, xmax] × [ymin, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox")]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Deserialize)]
struct RawBBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl TryFrom<RawBBox> for BBox {
    type Error = QuantifyError;

    fn try_from(r: RawBBox) -> Result<Self, Self::Error> {
        BBox::new(r.xmin, r.ymin, r.xmax, r.ymax)
    }
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, QuantifyError> {
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(QuantifyError::InvalidBBox("coordinates must be finite".into()));
        }
        if !(xmin < xmax && ymin < ymax) {
            return Err(QuantifyError::InvalidBBox(format!(
                "need xmin < xmax and ymin < ymax, got {xmin},{ymin},{xmax},{ymax}"
            )));
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.xmin && p[0] <= self.xmax && p[1] >= self.ymin && p[1] <= self.ymax
    }

    /// Smallest box containing every point, if the spread is non-zero on
    /// both axes.
    pub fn enclosing(points: &[[f64; 2]]) -> Option<Self> {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in points {
            b = [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])];
        }
        Self::new(b[0], b[1], b[2], b[3]).ok()
    }
}

/// `xmin,ymin,xmax,ymax`.
impl FromStr for BBox {
    type Err = QuantifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| QuantifyError::InvalidBBox(format!("expected xmin,ymin,xmax,ymax, got '{s}'")))?;
        match parts.as_slice() {
            [a, b, c, d] => BBox::new(*a, *b, *c, *d),
            _ => Err(QuantifyError::InvalidBBox(format!("expected 4 numbers, got {}", parts.len()))),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.xmin, self.ymin, self.xmax, self.ymax)
    }
}

fn group_column(embedding: &Embedding2D, group: &str) -> Result<usize, QuantifyError> {
    embedding
        .atlas
        .group_index(group)
        .ok_or_else(|| QuantifyError::UnknownGroup(group.to_string()))
}

fn inside<'a>(embedding: &'a Embedding2D, bbox: &BBox) -> impl Iterator<Item = usize> + 'a {
    let bbox = *bbox;
    (0..embedding.len()).filter(move |&i| bbox.contains(embedding.coords[i]))
}

/// Weighted count of `group`'s cells whose signature embeds inside `bbox`.
pub fn cells_in_bbox(embedding: &Embedding2D, bbox: &BBox, group: &str) -> Result<u64, QuantifyError> {
    let g = group_column(embedding, group)?;
    Ok(inside(embedding, bbox)
        .map(|i| embedding.atlas.entries()[i].weights[g])
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioFlag {
    Finite,
    /// `f2 = 0 < f1`.
    Infinite,
    /// `f1 = f2 = 0`.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxEntry {
    pub sig_id: u64,
    pub x: f64,
    pub y: f64,
    pub signature: [u32; CellType::COUNT],
    pub weights: BTreeMap<String, u64>,
}

/// Ratio of the two groups' within-box cell fractions.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRatioReport {
    pub bbox: BBox,
    pub group1: String,
    pub group2: String,
    pub n1: u64,
    pub n2: u64,
    pub N1: u64,
    pub N2: u64,
    pub f1: f64,
    pub f2: f64,
    /// `f1 / f2`; absent unless `flag` is finite.
    pub ratio: Option<f64>,
    pub flag: RatioFlag,
    pub entries: Vec<BoxEntry>,
}

pub fn odds_ratio(
    embedding: &Embedding2D,
    bbox: &BBox,
    group1: &str,
    group2: &str,
) -> Result<OddsRatioReport, QuantifyError> {
    let atlas = &embedding.atlas;
    let g1 = group_column(embedding, group1)?;
    let g2 = group_column(embedding, group2)?;
    let (big1, big2) = (atlas.group_total(g1), atlas.group_total(g2));
    if big1 == 0 {
        return Err(QuantifyError::EmptyGroup(group1.to_string()));
    }
    if big2 == 0 {
        return Err(QuantifyError::EmptyGroup(group2.to_string()));
    }
    let mut entries = Vec::new();
    let (mut n1, mut n2) = (0u64, 0u64);
    for i in inside(embedding, bbox) {
        let e = &atlas.entries()[i];
        n1 += e.weights[g1];
        n2 += e.weights[g2];
        entries.push(BoxEntry {
            sig_id: e.sig_id(),
            x: embedding.coords[i][0],
            y: embedding.coords[i][1],
            signature: e.signature.counts(),
            weights: atlas.groups().iter().cloned().zip(e.weights.iter().copied()).collect(),
        });
    }
    let f1 = n1 as f64 / big1 as f64;
    let f2 = n2 as f64 / big2 as f64;
    let (ratio, flag) = if n2 > 0 {
        (Some(f1 / f2), RatioFlag::Finite)
    } else if n1 > 0 {
        (None, RatioFlag::Infinite)
    } else {
        (None, RatioFlag::Undefined)
    };
    Ok(OddsRatioReport {
        bbox: *bbox,
        group1: group1.to_string(),
        group2: group2.to_string(),
        n1,
        n2,
        N1: big1,
        N2: big2,
        f1,
        f2,
        ratio,
        flag,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComposition {
    pub group: String,
    pub weight: u64,
    /// Weighted mean signature; absent when the group has no cells inside.
    pub mean: Option<[f64; CellType::COUNT]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiComposition {
    pub bbox: BBox,
    pub k: u32,
    pub types: Vec<CellType>,
    pub pooled: GroupComposition,
    pub groups: Vec<GroupComposition>,
    /// Cell types by pooled mean count, descending; ties by ordinal.
    pub ranking: Vec<CellType>,
}

impl RoiComposition {
    pub fn dominant(&self) -> CellType {
        self.ranking[0]
    }
}

fn weighted_mean(embedding: &Embedding2D, rows: &[usize], weight: impl Fn(usize) -> u64) -> (u64, Option<[f64; 6]>) {
    let mut sums = [0u128; CellType::COUNT];
    let mut total = 0u128;
    for &i in rows {
        let w = weight(i) as u128;
        total += w;
        for (s, c) in sums.iter_mut().zip(embedding.atlas.entries()[i].signature.counts()) {
            *s += w * c as u128;
        }
    }
    if total == 0 {
        return (0, None);
    }
    (total as u64, Some(sums.map(|s| s as f64 / total as f64)))
}

pub fn roi_composition(embedding: &Embedding2D, bbox: &BBox) -> Result<RoiComposition, QuantifyError> {
    let atlas = &embedding.atlas;
    let rows: Vec<usize> = inside(embedding, bbox).collect();
    let (weight, mean) = weighted_mean(embedding, &rows, |i| atlas.entries()[i].total_weight());
    let mean = mean.ok_or(QuantifyError::EmptyRoi)?;
    let groups = atlas
        .groups()
        .iter()
        .enumerate()
        .map(|(g, label)| {
            let (weight, mean) = weighted_mean(embedding, &rows, |i| atlas.entries()[i].weights[g]);
            GroupComposition {
                group: label.clone(),
                weight,
                mean,
            }
        })
        .collect();
    let mut ranking = CellType::ALL.to_vec();
    ranking.sort_by(|a, b| mean[b.ordinal()].total_cmp(&mean[a.ordinal()]).then(a.cmp(b)));
    Ok(RoiComposition {
        bbox: *bbox,
        k: atlas.k(),
        types: CellType::ALL.to_vec(),
        pooled: GroupComposition {
            group: "pooled".into(),
            weight,
            mean: Some(mean),
        },
        groups,
        ranking,
    })
}

/// Request body shared by the CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRequest {
    pub bbox: BBox,
    pub g1: String,
    pub g2: String,
}

impl RoiRequest {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Odds-ratio report plus composition; the one ROI answer both front ends
/// emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiAnalysis {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: OddsRatioReport,
    /// Absent for an empty ROI.
    pub composition: Option<RoiComposition>,
}

pub fn analyze_roi(embedding: &Embedding2D, request: &RoiRequest) -> Result<RoiAnalysis, QuantifyError> {
    let report = odds_ratio(embedding, &request.bbox, &request.g1, &request.g2)?;
    let composition = match roi_composition(embedding, &request.bbox) {
        Ok(c) => Some(c),
        Err(QuantifyError::EmptyRoi) => None,
        Err(e) => return Err(e),
    };
    Ok(RoiAnalysis {
        schema_version: crate::SCHEMA_VERSION,
        report,
        composition,
    })
}
