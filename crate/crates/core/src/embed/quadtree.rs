//! Barnes-Hut approximation of the t-SNE repulsive forces.

use rayon::prelude::*;

use super::cost::{kernel, reduce};
use super::Reduction;

const NO_CHILD: u32 = u32::MAX;
const MAX_DEPTH: usize = 48;

#[derive(Debug, Clone)]
struct Cell {
    center: [f64; 2],
    half: f64,
    mass: f64,
    com: [f64; 2],
    children: [u32; 4],
    /// Point indices; non-empty only for leaves.
    points: Vec<u32>,
}

/// Region quadtree over a 2-D layout, storing point counts and centres of
/// mass per cell.
#[derive(Debug, Clone)]
pub struct QuadTree {
    cells: Vec<Cell>,
}

impl QuadTree {
    pub fn build(layout: &[[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in layout {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        let center = [0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1])];
        let half = (0.5 * (max[0] - min[0]).max(max[1] - min[1])).max(1e-12) * (1.0 + 1e-9);
        let mut tree = QuadTree { cells: Vec::new() };
        if !layout.is_empty() {
            let all: Vec<u32> = (0..layout.len() as u32).collect();
            tree.insert(layout, center, half, all, 0);
        }
        tree
    }

    fn insert(&mut self, layout: &[[f64; 2]], center: [f64; 2], half: f64, points: Vec<u32>, depth: usize) -> u32 {
        let mass = points.len() as f64;
        let mut com = [0.0, 0.0];
        for &p in &points {
            com[0] += layout[p as usize][0];
            com[1] += layout[p as usize][1];
        }
        com = [com[0] / mass, com[1] / mass];
        let id = self.cells.len() as u32;
        let first = layout[points[0] as usize];
        let coincident = points.iter().all(|&p| layout[p as usize] == first);
        if points.len() == 1 || coincident || depth >= MAX_DEPTH {
            self.cells.push(Cell {
                center,
                half,
                mass,
                com,
                children: [NO_CHILD; 4],
                points,
            });
            return id;
        }
        self.cells.push(Cell {
            center,
            half,
            mass,
            com,
            children: [NO_CHILD; 4],
            points: Vec::new(),
        });
        let mut quadrants: [Vec<u32>; 4] = Default::default();
        for p in points {
            let y = layout[p as usize];
            let q = usize::from(y[0] >= center[0]) | (usize::from(y[1] >= center[1]) << 1);
            quadrants[q].push(p);
        }
        let h = 0.5 * half;
        for (q, members) in quadrants.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let c = [
                center[0] + if q & 1 == 1 { h } else { -h },
                center[1] + if q & 2 == 2 { h } else { -h },
            ];
            let child = self.insert(layout, c, h, members, depth + 1);
            self.cells[id as usize].children[q] = child;
        }
        id
    }

    fn contains(cell: &Cell, y: [f64; 2]) -> bool {
        (y[0] - cell.center[0]).abs() <= cell.half && (y[1] - cell.center[1]).abs() <= cell.half
    }

    /// Accumulates `(Σ_j q̃_ij² (y_i − y_j), Σ_j q̃_ij)` for point `i`.
    fn repulsion(&self, layout: &[[f64; 2]], i: usize, theta2: f64) -> ([f64; 2], f64) {
        let yi = layout[i];
        let mut force = [0.0, 0.0];
        let mut z = 0.0;
        let mut stack = vec![0u32];
        while let Some(c) = stack.pop() {
            let cell = &self.cells[c as usize];
            if !cell.points.is_empty() {
                for &j in &cell.points {
                    if j as usize == i {
                        continue;
                    }
                    let yj = layout[j as usize];
                    let q = kernel(yi, yj);
                    z += q;
                    force[0] += q * q * (yi[0] - yj[0]);
                    force[1] += q * q * (yi[1] - yj[1]);
                }
                continue;
            }
            let dx = yi[0] - cell.com[0];
            let dy = yi[1] - cell.com[1];
            let d2 = dx * dx + dy * dy;
            let width = 2.0 * cell.half;
            if !Self::contains(cell, yi) && width * width < theta2 * d2 {
                let q = 1.0 / (1.0 + d2);
                z += cell.mass * q;
                force[0] += cell.mass * q * q * dx;
                force[1] += cell.mass * q * q * dy;
            } else {
                // Reverse push keeps traversal order ascending by quadrant.
                for &child in cell.children.iter().rev() {
                    if child != NO_CHILD {
                        stack.push(child);
                    }
                }
            }
        }
        (force, z)
    }
}

/// Sparse rows of P used for the attractive term.
#[derive(Debug, Clone)]
pub(super) struct SparseRows {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseRows {
    /// Keeps entries at or above `floor`.
    pub(super) fn from_dense(p: &super::JointProbabilities, floor: f64) -> Self {
        let n = p.n();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for i in 0..n {
            for (j, &v) in p.row(i).iter().enumerate() {
                if j != i && v >= floor && v > 0.0 {
                    cols.push(j as u32);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        Self { offsets, cols, vals }
    }

    pub(super) fn nnz(&self) -> usize {
        self.vals.len()
    }
}

/// Barnes-Hut gradient: exact attraction over `rows`, tree-approximated
/// repulsion with opening criterion `cell width / distance < theta`.
pub(super) fn barnes_hut_gradient(
    rows: &SparseRows,
    layout: &[[f64; 2]],
    exaggeration: f64,
    theta: f64,
    mode: Reduction,
) -> Vec<[f64; 2]> {
    let tree = QuadTree::build(layout);
    let theta2 = theta * theta;
    let per_point: Vec<([f64; 2], f64, [f64; 2])> = (0..layout.len())
        .into_par_iter()
        .map(|i| {
            let yi = layout[i];
            let mut attr = [0.0, 0.0];
            for k in rows.offsets[i]..rows.offsets[i + 1] {
                let yj = layout[rows.cols[k] as usize];
                let mult = rows.vals[k] * kernel(yi, yj);
                attr[0] += mult * (yi[0] - yj[0]);
                attr[1] += mult * (yi[1] - yj[1]);
            }
            let (rep, z) = tree.repulsion(layout, i, theta2);
            (attr, z, rep)
        })
        .collect();
    let z = reduce(per_point.par_iter().map(|p| p.1), mode);
    per_point
        .into_iter()
        .map(|(attr, _, rep)| {
            [
                4.0 * (exaggeration * attr[0] - rep[0] / z),
                4.0 * (exaggeration * attr[1] - rep[1] / z),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cost::exact_gradient;
    use crate::embed::affinities_from_points;
    use rand::{Rng, SeedableRng};

    fn random_layout(seed: u64, n: usize) -> Vec<[f64; 2]> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
            .collect()
    }

    #[test]
    fn tree_mass_and_centroid() {
        let layout = random_layout(1, 257);
        let tree = QuadTree::build(&layout);
        let root = &tree.cells[0];
        assert_eq!(root.mass, 257.0);
        let mean_x = layout.iter().map(|p| p[0]).sum::<f64>() / 257.0;
        assert!((root.com[0] - mean_x).abs() < 1e-9);
        let leaf_points: usize = tree.cells.iter().map(|c| c.points.len()).sum();
        assert_eq!(leaf_points, 257);
        for cell in &tree.cells {
            for &p in &cell.points {
                assert!(QuadTree::contains(cell, layout[p as usize]));
            }
        }
    }

    #[test]
    fn coincident_points_share_a_leaf() {
        let layout = vec![[1.0, 1.0]; 5];
        let tree = QuadTree::build(&layout);
        assert_eq!(tree.cells.len(), 1);
        let (force, z) = tree.repulsion(&layout, 0, 0.25);
        assert_eq!(force, [0.0, 0.0]);
        assert_eq!(z, 4.0);
    }

    #[test]
    fn theta_zero_is_exact() {
        let n = 80;
        let layout = random_layout(2, n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let points: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..5.0))).collect();
        let p = affinities_from_points(&points, &vec![1.0; n], 10.0).unwrap().joint;
        let exact = exact_gradient(&p, &layout, 4.0, Reduction::Ordered);
        let rows = SparseRows::from_dense(&p, 0.0);
        let bh = barnes_hut_gradient(&rows, &layout, 4.0, 0.0, Reduction::Ordered);
        for (a, b) in exact.iter().zip(&bh) {
            for d in 0..2 {
                assert!((a[d] - b[d]).abs() < 1e-12 * (1.0 + a[d].abs()));
            }
        }
        let approx = barnes_hut_gradient(&rows, &layout, 4.0, 0.5, Reduction::Ordered);
        let err: f64 = exact.iter().zip(&approx).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum();
        let norm: f64 = exact.iter().map(|a| a[0].powi(2) + a[1].powi(2)).sum();
        assert!((err / norm).sqrt() < 0.05, "{}", (err / norm).sqrt());
    }
}
