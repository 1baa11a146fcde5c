use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ingest::{CellType, CohortTable};

use super::{composition_count, NeighborhoodSignature, SignatureAssignment, SignatureError, SignatureOutcome};

/// Which center cells an atlas aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchor {
    #[default]
    All,
    Type(CellType),
}

impl Anchor {
    pub fn matches(&self, t: CellType) -> bool {
        match self {
            Anchor::All => true,
            Anchor::Type(a) => *a == t,
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anchor::All => f.write_str("all"),
            Anchor::Type(t) => f.write_str(t.short_name()),
        }
    }
}

impl FromStr for Anchor {
    type Err = crate::ingest::UnknownCellType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            Ok(Anchor::All)
        } else {
            s.parse().map(Anchor::Type)
        }
    }
}

impl Serialize for Anchor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Anchor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// One distinct signature and how many cells of each group carry it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlasEntry {
    pub signature: NeighborhoodSignature,
    /// Aligned with [`SignatureAtlas::groups`].
    pub weights: Vec<u64>,
}

impl AtlasEntry {
    pub fn sig_id(&self) -> u64 {
        self.signature.code()
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.iter().sum()
    }
}

/// Deduplicated signatures with per-group multiplicities, sorted by
/// signature code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureAtlas {
    k: u32,
    anchor: Anchor,
    groups: Vec<String>,
    entries: Vec<AtlasEntry>,
}

impl SignatureAtlas {
    /// Assembles an atlas from explicit entries, checking every invariant.
    /// Entries are re-sorted by code.
    pub fn from_entries(
        k: u32,
        anchor: Anchor,
        groups: Vec<String>,
        mut entries: Vec<AtlasEntry>,
    ) -> Result<Self, SignatureError> {
        let bad = |m: String| Err(SignatureError::InvalidAtlas(m));
        for w in groups.windows(2) {
            if w[0] >= w[1] {
                return bad(format!("groups must be sorted and distinct ('{}', '{}')", w[0], w[1]));
            }
        }
        entries.sort_by(|a, b| a.signature.cmp(&b.signature));
        for pair in entries.windows(2) {
            if pair[0].signature == pair[1].signature {
                return bad(format!("duplicate signature {}", pair[0].signature));
            }
        }
        for e in &entries {
            if e.signature.k() != k {
                return bad(format!("signature {} does not sum to k = {k}", e.signature));
            }
            if e.weights.len() != groups.len() {
                return bad(format!(
                    "entry {} has {} weights for {} groups",
                    e.sig_id(),
                    e.weights.len(),
                    groups.len()
                ));
            }
        }
        if entries.len() as u64 > composition_count(k, CellType::COUNT) {
            return bad("more entries than distinct signatures".into());
        }
        Ok(Self {
            k,
            anchor,
            groups,
            entries,
        })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn anchor(&self) -> Anchor {
        self.anchor
    }

    pub fn with_anchor(mut self, anchor: Anchor) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_index(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == group)
    }

    pub fn entries(&self) -> &[AtlasEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total weight of group `g` (by index) over all entries.
    pub fn group_total(&self, g: usize) -> u64 {
        self.entries.iter().map(|e| e.weights[g]).sum()
    }

    pub fn total_weight(&self) -> u64 {
        self.entries.iter().map(AtlasEntry::total_weight).sum()
    }
}

/// Groups identical signatures of retained anchor-type cells, counting cells
/// per cohort group. Every cohort group gets a weight column, even when it
/// contributes no anchor cells.
pub fn build_atlas(
    assignment: &SignatureAssignment,
    cohort: &CohortTable,
    anchor: Anchor,
) -> Result<SignatureAtlas, SignatureError> {
    if assignment.len() != cohort.len() {
        return Err(SignatureError::AssignmentMismatch(format!(
            "{} outcomes for {} cells",
            assignment.len(),
            cohort.len()
        )));
    }
    let groups: Vec<String> = cohort.groups().iter().cloned().collect();
    let column: BTreeMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();

    let mut merged: BTreeMap<NeighborhoodSignature, Vec<u64>> = BTreeMap::new();
    for ((id, outcome), cell) in assignment.entries().iter().zip(cohort.cells()) {
        if *id != cell.cell_id {
            return Err(SignatureError::AssignmentMismatch(format!(
                "outcome for cell {id} aligned with cell {}",
                cell.cell_id
            )));
        }
        let SignatureOutcome::Retained(sig) = outcome else {
            continue;
        };
        if !anchor.matches(cell.cell_type) {
            continue;
        }
        let weights = merged.entry(*sig).or_insert_with(|| vec![0; groups.len()]);
        weights[column[cell.group.as_str()]] += 1;
    }
    if merged.is_empty() {
        return Err(SignatureError::EmptyAtlas(anchor));
    }
    let entries = merged
        .into_iter()
        .map(|(signature, weights)| AtlasEntry { signature, weights })
        .collect();
    SignatureAtlas::from_entries(assignment.k(), anchor, groups, entries)
}
