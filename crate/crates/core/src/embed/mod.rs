//! Weighted 2-D t-SNE over atlas signatures.
//!
//! Each distinct signature is one point; cells sharing a signature enter as a
//! multiplicity weight on that point's affinity row. The optimizer follows the
//! usual schedule: Gaussian initialization, early exaggeration with low
//! momentum, then plain gradient descent with momentum and per-coordinate
//! gains. `theta > 0` switches the repulsive forces to a Barnes-Hut quadtree.

mod affinity;
mod cost;
mod quadtree;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signature::SignatureAtlas;

pub use affinity::{
    affinities_from_points, atlas_points, atlas_weights, pairwise_affinities, Affinities,
    JointProbabilities, ENTROPY_TOLERANCE, MAX_CALIBRATION_STEPS,
};
pub use cost::{kl_divergence, kl_divergence_with, tsne_gradient};
pub use quadtree::QuadTree;

/// KL is evaluated every this many iterations (and after the last one).
pub const KL_RECORD_INTERVAL: usize = 50;
const INIT_STD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;
/// Relative floor (times the mean entry `1/n²`) below which P entries are
/// skipped in the Barnes-Hut attractive term.
const SPARSE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("perplexity too large: {perplexity} for {entries} atlas entries")]
    PerplexityTooLarge { perplexity: f64, entries: usize },
    #[error("need at least 3 atlas entries, got {0}")]
    TooFewEntries(usize),
    #[error("invalid t-SNE parameters: {0}")]
    InvalidParams(String),
    #[error("invalid affinity matrix: {0}")]
    InvalidAffinities(String),
}

/// How atlas multiplicities enter the affinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    #[default]
    Multiplicity,
    Uniform,
}

impl std::str::FromStr for WeightsMode {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiplicity" => Ok(WeightsMode::Multiplicity),
            "uniform" => Ok(WeightsMode::Uniform),
            other => Err(EmbedError::InvalidParams(format!("unknown weights mode '{other}'"))),
        }
    }
}

/// Summation order for global reductions (the kernel normalizer and KL).
/// `Ordered` gives bitwise-identical results for any thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Ordered,
    Unordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Barnes-Hut opening angle; 0 selects the exact O(n²) gradient.
    pub theta: f64,
    pub seed: u64,
    pub weights: WeightsMode,
    pub reduction: Reduction,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            theta: 0.5,
            seed: 0,
            weights: WeightsMode::Multiplicity,
            reduction: Reduction::Ordered,
        }
    }
}

impl TsneParams {
    fn check(&self) -> Result<(), EmbedError> {
        let bad = |m: &str| Err(EmbedError::InvalidParams(m.to_string()));
        if !(self.perplexity > 0.0 && self.perplexity.is_finite()) {
            return bad("perplexity must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.early_exaggeration >= 1.0 && self.early_exaggeration.is_finite()) {
            return bad("early exaggeration must be at least 1");
        }
        for m in [self.initial_momentum, self.final_momentum] {
            if !(0.0..1.0).contains(&m) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub iteration: usize,
    pub kl: f64,
}

/// Optimizer record kept alongside a computed layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedDiagnostics {
    /// Parameters actually used (perplexity after clamping).
    pub params: TsneParams,
    pub kl_history: Vec<KlRecord>,
    pub warnings: Vec<String>,
    /// Atlas rows whose bandwidth search did not converge.
    pub unconverged_rows: Vec<usize>,
}

/// 2-D coordinates for every atlas entry, in atlas order.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub atlas: SignatureAtlas,
    pub coords: Vec<[f64; 2]>,
    /// Present when the layout was computed in this process.
    pub diagnostics: Option<EmbedDiagnostics>,
}

impl Embedding2D {
    pub fn new(atlas: SignatureAtlas, coords: Vec<[f64; 2]>) -> Result<Self, EmbedError> {
        if atlas.len() != coords.len() {
            return Err(EmbedError::InvalidParams(format!(
                "{} coordinates for {} atlas entries",
                coords.len(),
                atlas.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidParams("non-finite embedding coordinate".into()));
        }
        Ok(Self {
            atlas,
            coords,
            diagnostics: None,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `(xmin, ymin, xmax, ymax)` over all entries.
    pub fn bounds(&self) -> Option<[f64; 4]> {
        if self.coords.is_empty() {
            return None;
        }
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for c in &self.coords {
            b[0] = b[0].min(c[0]);
            b[1] = b[1].min(c[1]);
            b[2] = b[2].max(c[0]);
            b[3] = b[3].max(c[1]);
        }
        Some(b)
    }
}

fn clamp_perplexity(requested: f64, entries: usize, warnings: &mut Vec<String>) -> Result<f64, EmbedError> {
    let ceiling = entries.saturating_sub(1) as f64 / 3.0;
    if requested <= ceiling {
        return Ok(requested);
    }
    if ceiling < 1.0 {
        return Err(EmbedError::PerplexityTooLarge {
            perplexity: requested,
            entries,
        });
    }
    let msg = format!("perplexity {requested} clamped to {ceiling} for {entries} atlas entries");
    log::warn!("{msg}");
    warnings.push(msg);
    Ok(ceiling)
}

fn gradient(
    p: &JointProbabilities,
    sparse: Option<&quadtree::SparseRows>,
    layout: &[[f64; 2]],
    exaggeration: f64,
    params: &TsneParams,
) -> Vec<[f64; 2]> {
    match sparse {
        Some(rows) => quadtree::barnes_hut_gradient(rows, layout, exaggeration, params.theta, params.reduction),
        None => cost::exact_gradient(p, layout, exaggeration, params.reduction),
    }
}

/// Runs t-SNE on the atlas. Deterministic for a fixed `(seed, theta)` with
/// [`Reduction::Ordered`], independent of the rayon thread count.
pub fn tsne_embed(atlas: &SignatureAtlas, params: &TsneParams) -> Result<Embedding2D, EmbedError> {
    params.check()?;
    let n = atlas.len();
    let mut warnings = Vec::new();
    let perplexity = clamp_perplexity(params.perplexity, n, &mut warnings)?;
    let used = TsneParams { perplexity, ..*params };

    let affinities = pairwise_affinities(atlas, perplexity, used.weights)?;
    if !affinities.unconverged.is_empty() {
        warnings.push(format!(
            "bandwidth search did not converge for {} of {n} rows",
            affinities.unconverged.len()
        ));
    }
    let p = &affinities.joint;
    let sparse = (used.theta > 0.0)
        .then(|| quadtree::SparseRows::from_dense(p, SPARSE_FLOOR / (n * n) as f64));
    if let Some(rows) = &sparse {
        log::debug!("barnes-hut attraction over {} of {} pairs", rows.nnz(), n * (n - 1));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(used.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut layout: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::new();

    for iter in 0..used.iterations {
        let exaggerating = iter < used.exaggeration_iterations;
        let exaggeration = if exaggerating { used.early_exaggeration } else { 1.0 };
        let momentum = if exaggerating { used.initial_momentum } else { used.final_momentum };
        let grad = gradient(p, sparse.as_ref(), &layout, exaggeration, &used);

        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                } else {
                    gains[i][d] + 0.2
                };
                update[i][d] = momentum * update[i][d] - used.learning_rate * gains[i][d] * grad[i][d];
                layout[i][d] += update[i][d];
            }
        }
        let mean = layout.iter().fold([0.0, 0.0], |acc, y| [acc[0] + y[0], acc[1] + y[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for y in layout.iter_mut() {
            y[0] -= mean[0];
            y[1] -= mean[1];
        }

        let done = iter + 1;
        if done % KL_RECORD_INTERVAL == 0 || done == used.iterations {
            kl_history.push(KlRecord {
                iteration: done,
                kl: kl_divergence_with(p, &layout, used.reduction),
            });
        }
    }

    if layout.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbedError::InvalidParams("optimization diverged to non-finite coordinates".into()));
    }
    Ok(Embedding2D {
        atlas: atlas.clone(),
        coords: layout,
        diagnostics: Some(EmbedDiagnostics {
            params: used,
            kl_history,
            warnings,
            unconverged_rows: affinities.unconverged,
        }),
    })
}
