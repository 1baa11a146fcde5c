//! KL cost between the input affinities and the Student-t output kernel, and
//! its exact gradient.

use rayon::prelude::*;

use super::{JointProbabilities, Reduction};

#[inline]
pub(super) fn kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// Sums per-point partials either in index order or in rayon's free order.
pub(super) fn reduce(parts: impl IndexedParallelIterator<Item = f64>, mode: Reduction) -> f64 {
    match mode {
        Reduction::Ordered => parts.collect::<Vec<f64>>().iter().sum(),
        Reduction::Unordered => parts.sum(),
    }
}

/// Normalizer `Σ_{i≠j} (1 + ‖y_i − y_j‖²)⁻¹`.
pub(super) fn kernel_normalizer(layout: &[[f64; 2]], mode: Reduction) -> f64 {
    let rows = (0..layout.len()).into_par_iter().map(|i| {
        let yi = layout[i];
        layout
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &yj)| kernel(yi, yj))
            .sum::<f64>()
    });
    reduce(rows, mode)
}

/// `KL(P ‖ Q) = Σ_{i≠j} p_ij ln(p_ij / q_ij)`; rounding below zero is
/// clamped.
pub fn kl_divergence(p: &JointProbabilities, layout: &[[f64; 2]]) -> f64 {
    kl_divergence_with(p, layout, Reduction::Ordered)
}

pub fn kl_divergence_with(p: &JointProbabilities, layout: &[[f64; 2]], mode: Reduction) -> f64 {
    assert_eq!(p.n(), layout.len(), "layout size must match P");
    let z = kernel_normalizer(layout, mode);
    let log_z = z.ln();
    let rows = (0..layout.len()).into_par_iter().map(|i| {
        let yi = layout[i];
        p.row(i)
            .iter()
            .zip(layout)
            .enumerate()
            .filter(|&(j, (&pij, _))| j != i && pij > 0.0)
            .map(|(_, (&pij, &yj))| pij * (pij.ln() - kernel(yi, yj).ln() + log_z))
            .sum::<f64>()
    });
    reduce(rows, mode).max(0.0)
}

/// Exact gradient `4 Σ_j (α p_ij − q_ij) q̃_ij (y_i − y_j)` for exaggeration
/// factor `α`.
pub(super) fn exact_gradient(
    p: &JointProbabilities,
    layout: &[[f64; 2]],
    exaggeration: f64,
    mode: Reduction,
) -> Vec<[f64; 2]> {
    let z = kernel_normalizer(layout, mode);
    (0..layout.len())
        .into_par_iter()
        .map(|i| {
            let yi = layout[i];
            let mut g = [0.0, 0.0];
            for (j, (&pij, &yj)) in p.row(i).iter().zip(layout).enumerate() {
                if j == i {
                    continue;
                }
                let q = kernel(yi, yj);
                let mult = (exaggeration * pij - q / z) * q;
                g[0] += mult * (yi[0] - yj[0]);
                g[1] += mult * (yi[1] - yj[1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        })
        .collect()
}

/// Gradient of [`kl_divergence`] with respect to every layout coordinate.
pub fn tsne_gradient(p: &JointProbabilities, layout: &[[f64; 2]]) -> Vec<[f64; 2]> {
    assert_eq!(p.n(), layout.len(), "layout size must match P");
    exact_gradient(p, layout, 1.0, Reduction::Ordered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::affinities_from_points;
    use rand::{Rng, SeedableRng};

    /// Straightforward double loop over all ordered pairs.
    fn kl_oracle(p: &JointProbabilities, y: &[[f64; 2]]) -> f64 {
        let n = y.len();
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    z += 1.0 / (1.0 + d2);
                }
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                let pij = p.get(i, j);
                if i != j && pij > 0.0 {
                    let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    let q = 1.0 / (1.0 + d2) / z;
                    kl += pij * (pij / q).ln();
                }
            }
        }
        kl
    }

    fn instance(seed: u64, n: usize) -> (JointProbabilities, Vec<[f64; 2]>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 6]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..4.0)))
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..20.0)).collect();
        let perplexity = ((n - 1) as f64 / 3.0).min(10.0);
        let p = affinities_from_points(&points, &weights, perplexity).unwrap().joint;
        let layout = (0..n)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        (p, layout)
    }

    #[test]
    fn two_point_identity() {
        // With two points both P and Q put 1/2 on each ordered pair.
        let p = JointProbabilities::from_dense(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(kl_divergence(&p, &[[0.0, 0.0], [3.0, -1.0]]), 0.0);
    }

    #[test]
    fn kl_matches_double_loop() {
        let (p, y) = instance(20, 20);
        let kl = kl_divergence(&p, &y);
        assert!(kl >= 0.0);
        assert!((kl - kl_oracle(&p, &y)).abs() < 1e-12, "{kl}");
        assert!((kl_divergence_with(&p, &y, Reduction::Unordered) - kl).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_gradients_oppose() {
        let p = JointProbabilities::from_dense(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        let g = tsne_gradient(&p, &[[-1.0, 0.5], [1.0, -0.5]]);
        assert_eq!(g[0][0], -g[1][0]);
        assert_eq!(g[0][1], -g[1][1]);
    }

    fn relative_fd_error(p: &JointProbabilities, y: &[[f64; 2]]) -> f64 {
        let h = 1e-5;
        let analytic = tsne_gradient(p, y);
        let (mut num, mut den) = (0.0, 0.0);
        let mut probe = y.to_vec();
        for i in 0..y.len() {
            for d in 0..2 {
                probe[i][d] = y[i][d] + h;
                let up = kl_oracle(p, &probe);
                probe[i][d] = y[i][d] - h;
                let down = kl_oracle(p, &probe);
                probe[i][d] = y[i][d];
                let fd = (up - down) / (2.0 * h);
                num += (analytic[i][d] - fd).powi(2);
                den += analytic[i][d].powi(2);
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, y) = instance(50, 50);
        let err = relative_fd_error(&p, &y);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradient_sums_to_zero() {
        let (p, y) = instance(3, 40);
        let g = tsne_gradient(&p, &y);
        let scale: f64 = g.iter().map(|v| v[0].abs() + v[1].abs()).sum();
        let sx: f64 = g.iter().map(|v| v[0]).sum();
        let sy: f64 = g.iter().map(|v| v[1]).sum();
        assert!(sx.abs() < 1e-12 * scale.max(1.0) && sy.abs() < 1e-12 * scale.max(1.0));
    }
}
