//! Seeded synthetic cohorts with planted neighborhood motifs.
//!
//! Each slide is a uniform box of background cells with types drawn from a
//! mixture. A motif is one anchor cell with `ring_count` cells spaced evenly
//! on a small circle around it, so those ring cells are the anchor's nearest
//! neighbors whenever the ring is tight relative to the background spacing.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{Cell, CellType, CohortTable};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid tissue spec: {0}")]
    Invalid(String),
    #[error("infeasible tissue spec: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub anchor: CellType,
    pub ring: CellType,
    pub ring_count: usize,
    pub per_slide: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub slides: usize,
    /// Background cells per slide (motif cells come on top).
    pub cells_per_slide: usize,
    /// Background type probabilities; omitted types have probability 0.
    #[serde(default)]
    pub mixture: BTreeMap<CellType, f64>,
    #[serde(default)]
    pub motifs: Vec<MotifSpec>,
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueSpec {
    pub groups: Vec<GroupSpec>,
    /// Slides are `[0, box_side]²`.
    pub box_side: f64,
    pub ring_radius: f64,
    /// Neighborhood size the motifs are designed for.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TissueSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tissue spec serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: String| Err(SynthError::Invalid(m));
        if !(self.box_side.is_finite() && self.box_side > 0.0) {
            return invalid(format!("box_side must be positive, got {}", self.box_side));
        }
        if !(self.ring_radius.is_finite() && self.ring_radius > 0.0) {
            return invalid(format!("ring_radius must be positive, got {}", self.ring_radius));
        }
        let mut labels = BTreeSet::new();
        for g in &self.groups {
            if g.label.trim().is_empty() {
                return invalid("empty group label".into());
            }
            if !labels.insert(g.label.as_str()) {
                return invalid(format!("duplicate group '{}'", g.label));
            }
            if g.mixture.values().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return invalid(format!("group '{}': mixture probabilities must be non-negative", g.label));
            }
            let sum: f64 = g.mixture.values().sum();
            if g.cells_per_slide > 0 && (sum - 1.0).abs() > 1e-9 {
                return invalid(format!("group '{}': mixture sums to {sum}, expected 1", g.label));
            }
            for m in &g.motifs {
                if m.ring_count > self.k {
                    return invalid(format!(
                        "group '{}': ring_count {} exceeds k = {}",
                        g.label, m.ring_count, self.k
                    ));
                }
            }
        }
        let has_motifs = self.groups.iter().any(|g| g.motifs.iter().any(|m| m.per_slide > 0));
        if has_motifs && 2.0 * self.ring_radius >= self.box_side {
            return Err(SynthError::Infeasible(format!(
                "ring diameter {} does not fit in box side {}",
                2.0 * self.ring_radius,
                self.box_side
            )));
        }
        Ok(())
    }

    pub fn cells_per_slide(&self, group: &GroupSpec) -> usize {
        group.cells_per_slide + group.motifs.iter().map(|m| m.per_slide * (1 + m.ring_count)).sum::<usize>()
    }

    /// Expected nearest-neighbor distance `0.5/√λ` of a uniform process at
    /// the densest group's cell density.
    pub fn mean_nn_spacing(&self) -> f64 {
        let densest = self.groups.iter().map(|g| self.cells_per_slide(g)).max().unwrap_or(0);
        if densest == 0 {
            return f64::INFINITY;
        }
        0.5 / (densest as f64 / (self.box_side * self.box_side)).sqrt()
    }

    /// Sparse-background regime in which anchors reliably see only their
    /// ring: `ring_radius × 10 < mean_nn_spacing`.
    pub fn motif_isolation_ok(&self) -> bool {
        self.ring_radius * 10.0 < self.mean_nn_spacing()
    }

    /// Two groups with matched background: `A` plants neutrophils ringed by
    /// `k` lymphocytes, `B` neutrophils ringed by `k` epithelial cells.
    pub fn planted_pair(slides_per_group: usize, background: usize, motifs_per_slide: usize, seed: u64) -> Self {
        let mixture: BTreeMap<CellType, f64> = [
            (CellType::Neutrophil, 0.05),
            (CellType::Epithelial, 0.40),
            (CellType::Lymphocyte, 0.20),
            (CellType::Plasma, 0.10),
            (CellType::Eosinophil, 0.05),
            (CellType::Connective, 0.20),
        ]
        .into_iter()
        .collect();
        let group = |label: &str, ring: CellType| GroupSpec {
            label: label.into(),
            slides: slides_per_group,
            cells_per_slide: background,
            mixture: mixture.clone(),
            motifs: vec![MotifSpec {
                anchor: CellType::Neutrophil,
                ring,
                ring_count: 10,
                per_slide: motifs_per_slide,
            }],
        };
        Self {
            groups: vec![group("A", CellType::Lymphocyte), group("B", CellType::Epithelial)],
            box_side: 1000.0,
            ring_radius: 1.0,
            k: 10,
            seed,
        }
    }
}

struct SlideJob<'a> {
    group: &'a GroupSpec,
    slide_id: String,
    stream: u64,
    first_id: u64,
}

fn generate_slide(spec: &TissueSpec, job: &SlideJob<'_>) -> Vec<Cell> {
    let g = job.group;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(job.stream);
    let mut cells = Vec::with_capacity(spec.cells_per_slide(g));
    let push = |cell_type: CellType, x: f64, y: f64, cells: &mut Vec<Cell>| {
        cells.push(Cell {
            cell_id: job.first_id + cells.len() as u64,
            slide_id: job.slide_id.clone(),
            group: g.label.clone(),
            cell_type,
            x,
            y,
        });
    };
    if g.cells_per_slide > 0 {
        let types: Vec<(CellType, f64)> = g.mixture.iter().map(|(t, p)| (*t, *p)).collect();
        let pick = WeightedIndex::new(types.iter().map(|t| t.1)).expect("validated mixture");
        for _ in 0..g.cells_per_slide {
            let t = types[pick.sample(&mut rng)].0;
            let x = rng.random_range(0.0..spec.box_side);
            let y = rng.random_range(0.0..spec.box_side);
            push(t, x, y, &mut cells);
        }
    }
    let r = spec.ring_radius;
    for m in &g.motifs {
        for _ in 0..m.per_slide {
            let ax = rng.random_range(r..=spec.box_side - r);
            let ay = rng.random_range(r..=spec.box_side - r);
            push(m.anchor, ax, ay, &mut cells);
            if m.ring_count == 0 {
                continue;
            }
            let step = std::f64::consts::TAU / m.ring_count as f64;
            let phase = rng.random_range(0.0..step);
            for j in 0..m.ring_count {
                let a = phase + j as f64 * step;
                let x = (ax + r * a.cos()).clamp(0.0, spec.box_side);
                let y = (ay + r * a.sin()).clamp(0.0, spec.box_side);
                push(m.ring, x, y, &mut cells);
            }
        }
    }
    cells
}

/// Slide ids are `<group>_s<index>`; cell ids are sequential from 0 in
/// group, slide order. Slides are generated in parallel, each from its own
/// stream of the seeded generator.
pub fn generate_tissue(spec: &TissueSpec) -> Result<CohortTable, SynthError> {
    spec.validate()?;
    let mut jobs = Vec::new();
    let mut next_id = 0u64;
    for g in &spec.groups {
        for s in 0..g.slides {
            jobs.push(SlideJob {
                group: g,
                slide_id: format!("{}_s{:03}", g.label, s),
                stream: jobs.len() as u64,
                first_id: next_id,
            });
            next_id += spec.cells_per_slide(g) as u64;
        }
    }
    let slides: Vec<Vec<Cell>> = jobs.par_iter().map(|job| generate_slide(spec, job)).collect();
    Ok(CohortTable::from_cells(slides.into_iter().flatten().collect()))
}
