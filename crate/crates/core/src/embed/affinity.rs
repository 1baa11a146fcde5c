//! Perplexity-calibrated input affinities.

use rayon::prelude::*;

use crate::ingest::CellType;
use crate::signature::SignatureAtlas;

use super::{EmbedError, WeightsMode};

/// Bisection steps allowed per row before the last bandwidth is accepted.
pub const MAX_CALIBRATION_STEPS: usize = 50;
/// Entropy tolerance (nats) for the per-row bandwidth search.
pub const ENTROPY_TOLERANCE: f64 = 1e-7;

/// Dense, symmetric joint probability matrix with zero diagonal and unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct JointProbabilities {
    n: usize,
    values: Vec<f64>,
}

impl JointProbabilities {
    /// Wraps a row-major `n × n` matrix after checking symmetry,
    /// non-negativity, a zero diagonal and unit mass (to 1e-9).
    pub fn from_dense(n: usize, values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.len() != n * n {
            return Err(EmbedError::InvalidAffinities(format!(
                "expected {} values, got {}",
                n * n,
                values.len()
            )));
        }
        let mut total = 0.0;
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(EmbedError::InvalidAffinities("non-zero diagonal".into()));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !(v >= 0.0 && v.is_finite()) || v != values[j * n + i] {
                    return Err(EmbedError::InvalidAffinities(format!(
                        "entry ({i}, {j}) is negative, non-finite or asymmetric"
                    )));
                }
                total += v;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(EmbedError::InvalidAffinities(format!("mass {total} != 1")));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Calibrated affinities with per-row diagnostics.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub joint: JointProbabilities,
    pub perplexity: f64,
    /// Precision `1 / (2σ²)` of each row's Gaussian.
    pub betas: Vec<f64>,
    /// Shannon entropy (bits) of each calibrated conditional distribution.
    pub entropies: Vec<f64>,
    /// Rows whose search stopped before reaching the target entropy.
    pub unconverged: Vec<usize>,
}

/// Signature count vectors as points in the input space.
pub fn atlas_points(atlas: &SignatureAtlas) -> Vec<[f64; CellType::COUNT]> {
    atlas.entries().iter().map(|e| e.signature.as_f64()).collect()
}

pub fn atlas_weights(atlas: &SignatureAtlas, mode: WeightsMode) -> Vec<f64> {
    atlas
        .entries()
        .iter()
        .map(|e| match mode {
            WeightsMode::Multiplicity => e.total_weight() as f64,
            WeightsMode::Uniform => 1.0,
        })
        .collect()
}

/// Affinities over the atlas's signatures, Euclidean on the raw counts.
pub fn pairwise_affinities(
    atlas: &SignatureAtlas,
    perplexity: f64,
    mode: WeightsMode,
) -> Result<Affinities, EmbedError> {
    affinities_from_points(&atlas_points(atlas), &atlas_weights(atlas, mode), perplexity)
}

struct CalibratedRow {
    conditional: Vec<f64>,
    beta: f64,
    entropy_bits: f64,
    converged: bool,
}

fn calibrate_row(dist2: &[f64], i: usize, target_nats: f64) -> CalibratedRow {
    let n = dist2.len();
    let dmin = dist2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut conditional = vec![0.0; n];
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut entropy = 0.0;
    let mut converged = false;
    for _ in 0..MAX_CALIBRATION_STEPS {
        let mut mass = 0.0;
        let mut weighted = 0.0;
        for (j, (&d, p)) in dist2.iter().zip(conditional.iter_mut()).enumerate() {
            if j == i {
                *p = 0.0;
                continue;
            }
            let shifted = d - dmin;
            *p = (-beta * shifted).exp();
            mass += *p;
            weighted += shifted * *p;
        }
        entropy = mass.ln() + beta * weighted / mass;
        for p in conditional.iter_mut() {
            *p /= mass;
        }
        let gap = entropy - target_nats;
        if gap.abs() < ENTROPY_TOLERANCE {
            converged = true;
            break;
        }
        if gap > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    CalibratedRow {
        conditional,
        beta,
        entropy_bits: entropy / std::f64::consts::LN_2,
        converged,
    }
}

/// Symmetrized, weight-scaled affinities for arbitrary input points.
///
/// Row `i` of the conditional matrix is scaled by `weights[i] / Σ weights`
/// before symmetrization, so a signature carried by many cells contributes
/// proportionally more mass without being duplicated.
pub fn affinities_from_points<const D: usize>(
    points: &[[f64; D]],
    weights: &[f64],
    perplexity: f64,
) -> Result<Affinities, EmbedError> {
    let n = points.len();
    if n < 3 {
        return Err(EmbedError::TooFewEntries(n));
    }
    if !(perplexity > 0.0) || perplexity.is_nan() {
        return Err(EmbedError::InvalidParams(format!("perplexity must be positive, got {perplexity}")));
    }
    if perplexity >= n as f64 {
        return Err(EmbedError::PerplexityTooLarge { perplexity, entries: n });
    }
    if weights.len() != n || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(EmbedError::InvalidParams("weights must be positive and one per point".into()));
    }
    let total_weight: f64 = weights.iter().sum();
    let target = perplexity.ln();

    let rows: Vec<CalibratedRow> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist2: Vec<f64> = points
                .iter()
                .map(|q| {
                    points[i]
                        .iter()
                        .zip(q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            let mut row = calibrate_row(&dist2, i, target);
            let scale = weights[i] / total_weight;
            for p in row.conditional.iter_mut() {
                *p *= scale;
            }
            row
        })
        .collect();

    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (rows[i].conditional[j] + rows[j].conditional[i]);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    let mass: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= mass;
    }

    Ok(Affinities {
        joint: JointProbabilities { n, values },
        perplexity,
        betas: rows.iter().map(|r| r.beta).collect(),
        entropies: rows.iter().map(|r| r.entropy_bits).collect(),
        unconverged: rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.converged)
            .map(|(i, _)| i)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn equidistant_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let points = [[0.0, 0.0], [1.0, 0.0], [0.5, h]];
        let a = affinities_from_points(&points, &[1.0; 3], 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 1.0 / 6.0 };
                assert!((a.joint.get(i, j) - expected).abs() < 1e-12, "({i},{j}) = {}", a.joint.get(i, j));
            }
        }
    }

    /// Entropy of row `i`'s conditional, recomputed from the stored beta.
    fn entropy_bits(points: &[[f64; 6]], i: usize, beta: f64) -> f64 {
        let d2 = |a: &[f64; 6], b: &[f64; 6]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
        let kernel: Vec<f64> = points
            .iter()
            .enumerate()
            .map(|(j, q)| if j == i { 0.0 } else { (-beta * d2(&points[i], q)).exp() })
            .collect();
        let z: f64 = kernel.iter().sum();
        -kernel
            .iter()
            .filter(|&&k| k > 0.0)
            .map(|&k| {
                let p = k / z;
                p * p.log2()
            })
            .sum::<f64>()
    }

    fn random_points(seed: u64, n: usize) -> Vec<[f64; 6]> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..5) as f64 + rng.random_range(0.0..0.01)))
            .collect()
    }

    #[test]
    fn calibrated_entropies_hit_target() {
        let points = random_points(100, 100);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let weights: Vec<f64> = (0..100).map(|_| rng.random_range(1..50) as f64).collect();
        for perplexity in [5.0, 30.0] {
            let a = affinities_from_points(&points, &weights, perplexity).unwrap();
            assert!(a.unconverged.is_empty());
            for i in 0..points.len() {
                let h = entropy_bits(&points, i, a.betas[i]);
                assert!((h - perplexity.log2()).abs() < 1e-4, "row {i}: {h}");
                assert!((a.entropies[i] - h).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn joint_matrix_is_symmetric_and_normalized() {
        let points = random_points(5, 60);
        let weights: Vec<f64> = (0..60).map(|i| 1.0 + (i % 7) as f64).collect();
        let a = affinities_from_points(&points, &weights, 10.0).unwrap();
        let n = a.joint.n();
        let mut asym: f64 = 0.0;
        for i in 0..n {
            assert_eq!(a.joint.get(i, i), 0.0);
            for j in 0..n {
                asym = asym.max((a.joint.get(i, j) - a.joint.get(j, i)).abs());
                assert!(a.joint.get(i, j) >= 0.0);
            }
        }
        assert!(asym < 1e-15);
        assert!((a.joint.sum() - 1.0).abs() < 1e-12);
        assert!(JointProbabilities::from_dense(n, a.joint.as_slice().to_vec()).is_ok());
    }

    #[test]
    fn separated_clusters_keep_mass_inside() {
        let mut points = Vec::new();
        for i in 0..10 {
            points.push([i as f64 * 0.1, 0.0]);
        }
        for i in 0..10 {
            points.push([100.0 + i as f64 * 0.1, 0.0]);
        }
        let a = affinities_from_points(&points, &[1.0; 20], 5.0).unwrap();
        let (mut within, mut across) = (0.0, 0.0);
        for i in 0..20 {
            for j in 0..20 {
                if (i < 10) == (j < 10) {
                    within += a.joint.get(i, j);
                } else {
                    across += a.joint.get(i, j);
                }
            }
        }
        assert!(within > 0.999);
        assert!(across < 1e-100, "{across}");
    }

    #[test]
    fn multiplicity_scales_row_mass() {
        // Symmetric configuration: the heavier endpoint attracts more mass.
        let points = [[0.0], [1.0], [2.0], [3.0]];
        let uniform = affinities_from_points(&points, &[1.0; 4], 2.0).unwrap();
        let heavy = affinities_from_points(&points, &[10.0, 1.0, 1.0, 1.0], 2.0).unwrap();
        let row_mass = |a: &Affinities, i: usize| a.joint.row(i).iter().sum::<f64>();
        assert!((row_mass(&uniform, 0) - row_mass(&uniform, 3)).abs() < 1e-12);
        assert!(row_mass(&heavy, 0) > 2.0 * row_mass(&heavy, 3));
    }

    #[test]
    fn perplexity_bounds() {
        let points = random_points(1, 10);
        let err = affinities_from_points(&points, &[1.0; 10], 10.0).unwrap_err();
        assert!(err.to_string().contains("perplexity too large"));
        assert!(matches!(
            affinities_from_points(&points[..2], &[1.0; 2], 1.0),
            Err(EmbedError::TooFewEntries(2))
        ));
        assert!(affinities_from_points(&points, &[1.0; 10], -1.0).is_err());
        assert!(affinities_from_points(&points, &[0.0; 10], 3.0).is_err());
        assert!(JointProbabilities::from_dense(2, vec![0.0, 0.5, 0.4, 0.0]).is_err());
    }

    #[test]
    fn unreachable_entropy_is_flagged() {
        // Four mutually equidistant points cap the entropy at log2(3) < log2(3.5).
        let points = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let a = affinities_from_points(&points, &[1.0; 4], 3.5).unwrap();
        assert_eq!(a.unconverged, [0, 1, 2, 3]);
        assert!((a.joint.sum() - 1.0).abs() < 1e-12);
    }
}
