//! Balanced 2-D KD-tree over one slide's cells.

use std::collections::HashMap;

use crate::ingest::{Cell, CellType};

use super::{DropReason, NeighborhoodSignature, SignatureError, SignatureOutcome};

pub const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy)]
struct Node {
    min: [f64; 2],
    max: [f64; 2],
    kind: NodeKind,
}

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Leaf { start: u32, end: u32 },
    Split { left: u32, right: u32 },
}

impl Node {
    fn min_dist2(&self, q: [f64; 2]) -> f64 {
        let dx = (self.min[0] - q[0]).max(0.0).max(q[0] - self.max[0]);
        let dy = (self.min[1] - q[1]).max(0.0).max(q[1] - self.max[1]);
        dx * dx + dy * dy
    }
}

/// A neighbor returned by [`SpatialIndex::nearest`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub cell_id: u64,
    pub cell_type: CellType,
    pub distance2: f64,
}

/// KD-tree over the cells of a single slide. Points are stored in tree order
/// (structure of arrays); leaves hold at most `leaf_size` points.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    slide_id: String,
    xs: Vec<f64>,
    ys: Vec<f64>,
    ids: Vec<u64>,
    types: Vec<CellType>,
    nodes: Vec<Node>,
    /// Input order → tree order.
    input_to_tree: Vec<u32>,
    by_id: HashMap<u64, u32>,
}

/// Best-`k` buffer ordered by `(distance², cell_id)`.
struct Candidates {
    k: usize,
    items: Vec<(f64, u64, u32)>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |c| c.0)
    }

    fn offer(&mut self, d2: f64, id: u64, pos: u32) {
        let before = |c: &(f64, u64, u32)| c.0 < d2 || (c.0 == d2 && c.1 < id);
        if self.full() {
            let last = self.items[self.k - 1];
            if !(d2 < last.0 || (d2 == last.0 && id < last.1)) {
                return;
            }
            self.items.pop();
        }
        let at = self.items.partition_point(before);
        self.items.insert(at, (d2, id, pos));
    }
}

impl SpatialIndex {
    /// Builds the tree. All cells must share one `slide_id` and have distinct
    /// ids.
    pub fn build<'a>(
        cells: impl IntoIterator<Item = &'a Cell>,
        leaf_size: usize,
    ) -> Result<Self, SignatureError> {
        if leaf_size == 0 {
            return Err(SignatureError::InvalidLeafSize);
        }
        let mut iter = cells.into_iter().peekable();
        let slide_id = iter
            .peek()
            .map(|c| c.slide_id.clone())
            .ok_or(SignatureError::EmptyIndex)?;
        let mut points: Vec<(f64, f64, u64, CellType)> = Vec::new();
        for c in iter {
            if c.slide_id != slide_id {
                return Err(SignatureError::MixedSlides {
                    expected: slide_id,
                    found: c.slide_id.clone(),
                });
            }
            points.push((c.x, c.y, c.cell_id, c.cell_type));
        }
        let n = points.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::with_capacity(2 * n / leaf_size + 1);
        build_node(&points, &mut order, 0, leaf_size, &mut nodes);

        let mut index = Self {
            slide_id,
            xs: Vec::with_capacity(n),
            ys: Vec::with_capacity(n),
            ids: Vec::with_capacity(n),
            types: Vec::with_capacity(n),
            nodes,
            input_to_tree: vec![0; n],
            by_id: HashMap::with_capacity(n),
        };
        for (tree_pos, &input) in order.iter().enumerate() {
            let (x, y, id, t) = points[input as usize];
            index.xs.push(x);
            index.ys.push(y);
            index.ids.push(id);
            index.types.push(t);
            index.input_to_tree[input as usize] = tree_pos as u32;
            if index.by_id.insert(id, tree_pos as u32).is_some() {
                return Err(SignatureError::DuplicateCellId(id));
            }
        }
        Ok(index)
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub(super) fn tree_position(&self, input_index: usize) -> u32 {
        self.input_to_tree[input_index]
    }

    fn locate(&self, center: &Cell) -> Result<u32, SignatureError> {
        if center.slide_id != self.slide_id {
            return Err(SignatureError::CenterNotIndexed(center.cell_id));
        }
        self.by_id
            .get(&center.cell_id)
            .copied()
            .ok_or(SignatureError::CenterNotIndexed(center.cell_id))
    }

    /// Up to `k` nearest cells to `center` (excluded), strictly closer than
    /// `max_radius` when given, sorted by `(distance, cell_id)`.
    pub fn nearest(
        &self,
        center: &Cell,
        k: usize,
        max_radius: Option<f64>,
    ) -> Result<Vec<Neighbor>, SignatureError> {
        let pos = self.locate(center)?;
        let radius2 = max_radius.map_or(f64::INFINITY, |r| r * r);
        Ok(self
            .search(pos, k, radius2)
            .items
            .into_iter()
            .map(|(d2, id, p)| Neighbor {
                cell_id: id,
                cell_type: self.types[p as usize],
                distance2: d2,
            })
            .collect())
    }

    pub(super) fn signature_at(&self, pos: u32, k: usize, radius2: f64) -> SignatureOutcome {
        let found = self.search(pos, k, radius2);
        if found.items.len() < k {
            return SignatureOutcome::Dropped(DropReason::InsufficientNeighbors {
                found: found.items.len(),
            });
        }
        SignatureOutcome::Retained(NeighborhoodSignature::from_types(
            found.items.iter().map(|&(_, _, p)| self.types[p as usize]),
        ))
    }

    fn search(&self, center: u32, k: usize, radius2: f64) -> Candidates {
        let q = [self.xs[center as usize], self.ys[center as usize]];
        let mut best = Candidates::new(k);
        if k > 0 && !self.nodes.is_empty() {
            self.visit(0, q, center, radius2, &mut best);
        }
        best
    }

    fn visit(&self, node: u32, q: [f64; 2], center: u32, radius2: f64, best: &mut Candidates) {
        let n = &self.nodes[node as usize];
        match n.kind {
            NodeKind::Leaf { start, end } => {
                for p in start..end {
                    if p == center {
                        continue;
                    }
                    let dx = self.xs[p as usize] - q[0];
                    let dy = self.ys[p as usize] - q[1];
                    let d2 = dx * dx + dy * dy;
                    if d2 < radius2 {
                        best.offer(d2, self.ids[p as usize], p);
                    }
                }
            }
            NodeKind::Split { left, right } => {
                let dl = self.nodes[left as usize].min_dist2(q);
                let dr = self.nodes[right as usize].min_dist2(q);
                let (first, d_first, second, d_second) = if dl <= dr {
                    (left, dl, right, dr)
                } else {
                    (right, dr, left, dl)
                };
                // Equal distances must still be explored: a smaller cell_id
                // can displace the current k-th candidate.
                let prune = |d: f64, best: &Candidates| d >= radius2 || (best.full() && d > best.worst());
                if !prune(d_first, best) {
                    self.visit(first, q, center, radius2, best);
                }
                if !prune(d_second, best) {
                    self.visit(second, q, center, radius2, best);
                }
            }
        }
    }
}

fn build_node(
    points: &[(f64, f64, u64, CellType)],
    order: &mut [u32],
    offset: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for &i in order.iter() {
        let p = points[i as usize];
        min[0] = min[0].min(p.0);
        min[1] = min[1].min(p.1);
        max[0] = max[0].max(p.0);
        max[1] = max[1].max(p.1);
    }
    let id = nodes.len() as u32;
    if order.len() <= leaf_size {
        nodes.push(Node {
            min,
            max,
            kind: NodeKind::Leaf {
                start: offset as u32,
                end: (offset + order.len()) as u32,
            },
        });
        return id;
    }
    nodes.push(Node {
        min,
        max,
        kind: NodeKind::Split { left: 0, right: 0 },
    });
    let axis = usize::from(max[1] - min[1] > max[0] - min[0]);
    let coord = |i: &u32| {
        let p = points[*i as usize];
        if axis == 0 {
            p.0
        } else {
            p.1
        }
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |a, b| coord(a).total_cmp(&coord(b)));
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(points, lo, offset, leaf_size, nodes);
    let right = build_node(points, hi, offset + mid, leaf_size, nodes);
    nodes[id as usize].kind = NodeKind::Split { left, right };
    id
}

/// Builds the index for one slide's cells.
pub fn build_spatial_index<'a>(
    cells: impl IntoIterator<Item = &'a Cell>,
    leaf_size: usize,
) -> Result<SpatialIndex, SignatureError> {
    SpatialIndex::build(cells, leaf_size)
}

/// Signature of `center` among its `k` nearest indexed neighbors, or a drop
/// when fewer than `k` qualify.
pub fn knn_signature(
    index: &SpatialIndex,
    center: &Cell,
    k: usize,
    max_radius: Option<f64>,
) -> Result<SignatureOutcome, SignatureError> {
    let pos = index.locate(center)?;
    let radius2 = max_radius.map_or(f64::INFINITY, |r| r * r);
    Ok(index.signature_at(pos, k, radius2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cell(id: u64, t: CellType, x: f64, y: f64) -> Cell {
        Cell {
            cell_id: id,
            slide_id: "s".into(),
            group: "A".into(),
            cell_type: t,
            x,
            y,
        }
    }

    #[test]
    fn singleton() {
        let cells = [cell(0, CellType::Neutrophil, 3.0, 4.0)];
        let index = build_spatial_index(&cells, DEFAULT_LEAF_SIZE).unwrap();
        assert!(index.nearest(&cells[0], 1, None).unwrap().is_empty());
        assert_eq!(
            knn_signature(&index, &cells[0], 1, None).unwrap(),
            SignatureOutcome::Dropped(DropReason::InsufficientNeighbors { found: 0 })
        );
    }

    #[test]
    fn empty_and_mixed_inputs_fail() {
        let none: [Cell; 0] = [];
        assert_eq!(
            build_spatial_index(&none, 4).unwrap_err(),
            SignatureError::EmptyIndex
        );
        let mut other = cell(1, CellType::Neutrophil, 0.0, 0.0);
        other.slide_id = "t".into();
        let cells = [cell(0, CellType::Neutrophil, 0.0, 0.0), other];
        assert!(matches!(
            build_spatial_index(&cells, 4),
            Err(SignatureError::MixedSlides { .. })
        ));
        let dups = [cell(5, CellType::Neutrophil, 0.0, 0.0), cell(5, CellType::Epithelial, 1.0, 0.0)];
        assert_eq!(
            build_spatial_index(&dups, 4).unwrap_err(),
            SignatureError::DuplicateCellId(5)
        );
    }

    #[test]
    fn center_must_be_indexed() {
        let cells = [cell(0, CellType::Neutrophil, 0.0, 0.0), cell(1, CellType::Neutrophil, 1.0, 0.0)];
        let index = build_spatial_index(&cells, 4).unwrap();
        let stranger = cell(9, CellType::Neutrophil, 0.0, 0.0);
        assert_eq!(
            knn_signature(&index, &stranger, 1, None).unwrap_err(),
            SignatureError::CenterNotIndexed(9)
        );
    }

    #[test]
    fn duplicate_coordinates_tie_break_by_id() {
        let cells = [
            cell(0, CellType::Neutrophil, 0.0, 0.0),
            cell(7, CellType::Epithelial, 2.0, 0.0),
            cell(3, CellType::Lymphocyte, 2.0, 0.0),
            cell(5, CellType::Plasma, 0.0, 2.0),
        ];
        let index = build_spatial_index(&cells, 1).unwrap();
        let got: Vec<u64> = index
            .nearest(&cells[0], 3, None)
            .unwrap()
            .iter()
            .map(|n| n.cell_id)
            .collect();
        assert_eq!(got, [3, 5, 7]);
        let got: Vec<u64> = index
            .nearest(&cells[0], 1, None)
            .unwrap()
            .iter()
            .map(|n| n.cell_id)
            .collect();
        assert_eq!(got, [3]);
        // Both cells at the shared coordinate find each other at distance 0.
        let n = index.nearest(&cells[1], 1, None).unwrap();
        assert_eq!((n[0].cell_id, n[0].distance2), (3, 0.0));
    }

    #[test]
    fn homogeneous_neighborhood() {
        let mut cells = vec![cell(0, CellType::Neutrophil, 50.0, 50.0)];
        for i in 0..10 {
            cells.push(cell(i + 1, CellType::Epithelial, 50.0 + i as f64 * 0.1, 51.0));
        }
        for i in 0..30 {
            cells.push(cell(100 + i, CellType::Lymphocyte, i as f64, 0.0));
        }
        let index = build_spatial_index(&cells, 4).unwrap();
        let outcome = knn_signature(&index, &cells[0], 10, None).unwrap();
        assert_eq!(
            outcome.signature().unwrap().counts(),
            [0, 10, 0, 0, 0, 0]
        );
    }

    #[test]
    fn collinear_alternating_fixture() {
        // x = 0..11; even positions epithelial, odd lymphocyte.
        let cells: Vec<Cell> = (0..12)
            .map(|i| {
                let t = if i % 2 == 0 { CellType::Epithelial } else { CellType::Lymphocyte };
                cell(i, t, i as f64, 0.0)
            })
            .collect();
        let index = build_spatial_index(&cells, 2).unwrap();
        let near = index.nearest(&cells[0], 10, None).unwrap();
        let ids: Vec<u64> = near.iter().map(|n| n.cell_id).collect();
        assert_eq!(ids, (1..=10).collect::<Vec<_>>());
        let sig = knn_signature(&index, &cells[0], 10, None).unwrap();
        assert_eq!(sig.signature().unwrap().counts(), [0, 5, 5, 0, 0, 0]);
    }

    #[test]
    fn eight_cells_cannot_fill_ten() {
        let cells: Vec<Cell> = (0..8).map(|i| cell(i, CellType::Plasma, i as f64, 1.0)).collect();
        let index = build_spatial_index(&cells, 16).unwrap();
        let outcome = knn_signature(&index, &cells[3], 10, None).unwrap();
        assert_eq!(outcome, SignatureOutcome::Dropped(DropReason::InsufficientNeighbors { found: 7 }));
        assert_eq!(DropReason::InsufficientNeighbors { found: 7 }.to_string(), "insufficient neighbors");
    }

    #[test]
    fn thousand_uniform_cells_match_all_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000);
        let cells: Vec<Cell> = (0..1000)
            .map(|i| {
                let t = CellType::from_ordinal(rng.random_range(0..6)).unwrap();
                cell(i, t, rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0))
            })
            .collect();
        for leaf in [1, 3, DEFAULT_LEAF_SIZE, 64] {
            let index = build_spatial_index(&cells, leaf).unwrap();
            for c in &cells {
                let mut all: Vec<(f64, u64)> = cells
                    .iter()
                    .filter(|o| o.cell_id != c.cell_id)
                    .map(|o| {
                        let dx = o.x - c.x;
                        let dy = o.y - c.y;
                        (dx * dx + dy * dy, o.cell_id)
                    })
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let expected: Vec<u64> = all[..10].iter().map(|a| a.1).collect();
                let got: Vec<u64> = index
                    .nearest(c, 10, None)
                    .unwrap()
                    .iter()
                    .map(|n| n.cell_id)
                    .collect();
                assert_eq!(got, expected);
            }
        }
    }
}
