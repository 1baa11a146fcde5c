//! Weighted Gaussian kernel density estimates over embedding coordinates.
//!
//! The kernel is an axis-aligned Gaussian `N(0, diag(hx², hy²))`. Because it
//! factorizes per axis, the raster is built from per-point column and row
//! profiles instead of evaluating `exp` at every (point, grid cell) pair.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Grid padding around the data, in bandwidths.
pub const PAD_BANDWIDTHS: f64 = 3.0;
pub const DEFAULT_GRID: usize = 512;
/// Kernel profiles are truncated beyond this many bandwidths (`e^-50` tail).
const PROFILE_CUTOFF: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DensityError {
    #[error("total weight must be positive")]
    ZeroWeight,
    #[error("invalid point {index}: coordinates and weight must be finite, weight non-negative")]
    InvalidPoint { index: usize },
    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),
    #[error("grid must have at least one cell per axis")]
    EmptyGrid,
    #[error("invalid contour spec: {0}")]
    InvalidContours(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub hx: f64,
    pub hy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BandwidthRule {
    #[default]
    Scott,
    Fixed(Bandwidth),
}

/// `scott` or `hx,hy`.
impl FromStr for BandwidthRule {
    type Err = DensityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("scott") {
            return Ok(BandwidthRule::Scott);
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|h| *h > 0.0 && h.is_finite())
                .ok_or_else(|| DensityError::InvalidBandwidth(format!("'{s}'")))
        };
        match parts.as_slice() {
            [hx, hy] => Ok(BandwidthRule::Fixed(Bandwidth {
                hx: parse(hx)?,
                hy: parse(hy)?,
            })),
            _ => Err(DensityError::InvalidBandwidth(format!("expected 'scott' or 'hx,hy', got '{s}'"))),
        }
    }
}

/// Raster shape and an optional minimum extent `[xmin, ymin, xmax, ymax]`
/// (used to align several groups on one grid).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub extent: Option<[f64; 4]>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: DEFAULT_GRID,
            ny: DEFAULT_GRID,
            extent: None,
        }
    }
}

/// Density values (per unit area) at grid-cell centres, row-major with `x`
/// varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub group: String,
    pub origin: [f64; 2],
    pub cell_size: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub bandwidth: Bandwidth,
    /// `(Σw)² / Σw²`.
    pub n_eff: f64,
    pub total_weight: f64,
    pub flags: Vec<String>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size[0],
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size[1],
        ]
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size[0] * self.cell_size[1]
    }

    /// Midpoint-rule integral of the density over the grid.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    pub fn extent(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.nx as f64 * self.cell_size[0],
            self.origin[1] + self.ny as f64 * self.cell_size[1],
        ]
    }

    /// Grid cell containing `p`, if inside.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let fx = (p[0] - self.origin[0]) / self.cell_size[0];
        let fy = (p[1] - self.origin[1]) / self.cell_size[1];
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }
}

fn check_points(points: &[WeightedPoint]) -> Result<f64, DensityError> {
    let mut total = 0.0;
    for (index, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.w.is_finite() && p.w >= 0.0) {
            return Err(DensityError::InvalidPoint { index });
        }
        total += p.w;
    }
    if total > 0.0 {
        Ok(total)
    } else {
        Err(DensityError::ZeroWeight)
    }
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(points: &[WeightedPoint]) -> f64 {
    let (s, s2) = points.iter().fold((0.0, 0.0), |(s, s2), p| (s + p.w, s2 + p.w * p.w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Scott's rule per axis, `h = σ̂ · n_eff^(-1/6)`, with the reliability-
/// weighted unbiased variance (reduces to the `n − 1` sample variance for
/// equal weights). Degenerate axes fall back to 1% of the other axis, or 1.0
/// when both are degenerate; each fallback adds a flag.
pub fn scott_bandwidth(points: &[WeightedPoint]) -> Result<(Bandwidth, Vec<String>), DensityError> {
    let total = check_points(points)?;
    let sum_w2: f64 = points.iter().map(|p| p.w * p.w).sum();
    let n_eff = total * total / sum_w2;
    let denom = total - sum_w2 / total;
    let axis_sd = |coord: fn(&WeightedPoint) -> f64| {
        let mean = points.iter().map(|p| p.w * coord(p)).sum::<f64>() / total;
        let ss: f64 = points.iter().map(|p| p.w * (coord(p) - mean).powi(2)).sum();
        if denom > 0.0 {
            (ss / denom).sqrt()
        } else {
            0.0
        }
    };
    let factor = n_eff.powf(-1.0 / 6.0);
    let hx = axis_sd(|p| p.x) * factor;
    let hy = axis_sd(|p| p.y) * factor;
    let mut flags = Vec::new();
    let ok = |h: f64| h > 0.0 && h.is_finite();
    let bw = match (ok(hx), ok(hy)) {
        (true, true) => Bandwidth { hx, hy },
        (false, true) => {
            flags.push("degenerate_x_bandwidth".to_string());
            Bandwidth { hx: 0.01 * hy, hy }
        }
        (true, false) => {
            flags.push("degenerate_y_bandwidth".to_string());
            Bandwidth { hx, hy: 0.01 * hx }
        }
        (false, false) => {
            flags.push("degenerate_x_bandwidth".to_string());
            flags.push("degenerate_y_bandwidth".to_string());
            Bandwidth { hx: 1.0, hy: 1.0 }
        }
    };
    Ok((bw, flags))
}

/// Bounding box of the positive-weight points padded by
/// [`PAD_BANDWIDTHS`] bandwidths on each axis.
pub fn padded_extent(points: &[WeightedPoint], bandwidth: Bandwidth) -> Option<[f64; 4]> {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in points.iter().filter(|p| p.w > 0.0) {
        b[0] = b[0].min(p.x);
        b[1] = b[1].min(p.y);
        b[2] = b[2].max(p.x);
        b[3] = b[3].max(p.y);
    }
    if !b[0].is_finite() {
        return None;
    }
    let (px, py) = (PAD_BANDWIDTHS * bandwidth.hx, PAD_BANDWIDTHS * bandwidth.hy);
    Some([b[0] - px, b[1] - py, b[2] + px, b[3] + py])
}

fn resolve_bandwidth(points: &[WeightedPoint], rule: BandwidthRule) -> Result<(Bandwidth, Vec<String>), DensityError> {
    match rule {
        BandwidthRule::Scott => scott_bandwidth(points),
        BandwidthRule::Fixed(bw) => {
            if !(bw.hx > 0.0 && bw.hy > 0.0 && bw.hx.is_finite() && bw.hy.is_finite()) {
                return Err(DensityError::InvalidBandwidth(format!("{} x {}", bw.hx, bw.hy)));
            }
            check_points(points)?;
            Ok((bw, Vec::new()))
        }
    }
}

/// Truncated 1-D Gaussian profile: first index and values.
fn profile(center: f64, h: f64, origin: f64, step: f64, len: usize) -> (usize, Vec<f64>) {
    let lo = ((center - PROFILE_CUTOFF * h - origin) / step - 0.5).floor().max(0.0) as usize;
    let hi = (((center + PROFILE_CUTOFF * h - origin) / step - 0.5).ceil().max(0.0) as usize + 1).min(len);
    if lo >= hi {
        return (0, Vec::new());
    }
    let values = (lo..hi)
        .map(|i| {
            let u = (origin + (i as f64 + 0.5) * step - center) / h;
            (-0.5 * u * u).exp()
        })
        .collect();
    (lo, values)
}

/// Fits the weighted KDE and rasterizes it.
pub fn kde_fit(
    group: impl Into<String>,
    points: &[WeightedPoint],
    rule: BandwidthRule,
    grid: &GridSpec,
) -> Result<DensityGrid, DensityError> {
    if grid.nx == 0 || grid.ny == 0 {
        return Err(DensityError::EmptyGrid);
    }
    let total = check_points(points)?;
    let (bandwidth, flags) = resolve_bandwidth(points, rule)?;
    let mut ext = padded_extent(points, bandwidth).ok_or(DensityError::ZeroWeight)?;
    if let Some(e) = grid.extent {
        ext = [ext[0].min(e[0]), ext[1].min(e[1]), ext[2].max(e[2]), ext[3].max(e[3])];
    }
    let origin = [ext[0], ext[1]];
    let cell_size = [(ext[2] - ext[0]) / grid.nx as f64, (ext[3] - ext[1]) / grid.ny as f64];

    let active: Vec<&WeightedPoint> = points.iter().filter(|p| p.w > 0.0).collect();
    let cols: Vec<(usize, Vec<f64>)> = active
        .iter()
        .map(|p| profile(p.x, bandwidth.hx, origin[0], cell_size[0], grid.nx))
        .collect();
    let rows: Vec<(usize, Vec<f64>)> = active
        .iter()
        .map(|p| profile(p.y, bandwidth.hy, origin[1], cell_size[1], grid.ny))
        .collect();
    let norm = 1.0 / (total * 2.0 * std::f64::consts::PI * bandwidth.hx * bandwidth.hy);

    let values: Vec<f64> = (0..grid.ny)
        .into_par_iter()
        .flat_map_iter(|iy| {
            let mut line = vec![0.0; grid.nx];
            for (i, p) in active.iter().enumerate() {
                let (ry, ref ky) = rows[i];
                if iy < ry || iy >= ry + ky.len() {
                    continue;
                }
                let wy = p.w * ky[iy - ry];
                let (cx, ref kx) = cols[i];
                for (slot, k) in line[cx..cx + kx.len()].iter_mut().zip(kx) {
                    *slot += wy * k;
                }
            }
            line.into_iter().map(move |v| v * norm)
        })
        .collect();

    Ok(DensityGrid {
        group: group.into(),
        origin,
        cell_size,
        nx: grid.nx,
        ny: grid.ny,
        bandwidth,
        n_eff: effective_sample_size(points),
        total_weight: total,
        flags,
        values,
    })
}

/// Exact weighted kernel sum at `query` (no grid, no truncation).
pub fn evaluate_density(points: &[WeightedPoint], bandwidth: Bandwidth, query: [f64; 2]) -> f64 {
    let total: f64 = points.iter().map(|p| p.w).sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let sum: f64 = points
        .iter()
        .map(|p| {
            let u = (query[0] - p.x) / bandwidth.hx;
            let v = (query[1] - p.y) / bandwidth.hy;
            p.w * (-0.5 * (u * u + v * v)).exp()
        })
        .sum();
    sum / (total * 2.0 * std::f64::consts::PI * bandwidth.hx * bandwidth.hy)
}

/// Highest-density-region mass quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub quantiles: Vec<f64>,
}

impl Default for ContourSpec {
    fn default() -> Self {
        Self {
            quantiles: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl ContourSpec {
    pub fn new(quantiles: Vec<f64>) -> Result<Self, DensityError> {
        if quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(DensityError::InvalidContours("quantiles must lie in (0, 1)".into()));
        }
        if quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DensityError::InvalidContours("quantiles must be strictly increasing".into()));
        }
        Ok(Self { quantiles })
    }
}

/// Threshold `t_q` per quantile such that cells with density ≥ `t_q` hold at
/// least `1 − q` of the grid's mass (the smallest such region).
pub fn contour_levels(grid: &DensityGrid, spec: &ContourSpec) -> Vec<f64> {
    let mut sorted = grid.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    let mut cumulative = Vec::with_capacity(sorted.len());
    let mut acc = 0.0;
    for v in &sorted {
        acc += v;
        cumulative.push(acc);
    }
    spec.quantiles
        .iter()
        .map(|&q| {
            let target = (1.0 - q) * total;
            let idx = cumulative.partition_point(|&c| c < target).min(sorted.len().saturating_sub(1));
            sorted.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

/// Mass of cells whose density is at least `threshold`.
pub fn mass_above(grid: &DensityGrid, threshold: f64) -> f64 {
    grid.values.iter().filter(|&&v| v >= threshold).sum::<f64>() * grid.cell_area()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn pt(x: f64, y: f64, w: f64) -> WeightedPoint {
        WeightedPoint { x, y, w }
    }

    fn fixed(hx: f64, hy: f64) -> BandwidthRule {
        BandwidthRule::Fixed(Bandwidth { hx, hy })
    }

    #[test]
    fn single_kernel_peak() {
        let g = kde_fit("A", &[pt(2.0, -1.0, 1.0)], fixed(0.5, 2.0), &GridSpec { nx: 301, ny: 301, extent: None }).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI * 0.5 * 2.0);
        let (ix, iy) = g.locate([2.0, -1.0]).unwrap();
        assert_eq!((ix, iy), (150, 150));
        assert!((g.value(ix, iy) - peak).abs() / peak < 1e-9);
        assert!((g.mass() - 1.0).abs() < 0.01);
        assert_eq!(evaluate_density(&[pt(2.0, -1.0, 1.0)], Bandwidth { hx: 0.5, hy: 2.0 }, [2.0, -1.0]), peak);
    }

    #[test]
    fn far_field_decays() {
        let bw = Bandwidth { hx: 1.0, hy: 1.0 };
        assert!(evaluate_density(&[pt(0.0, 0.0, 3.0)], bw, [10.5, 0.0]) < 1e-20);
    }

    #[test]
    fn grid_covers_padded_box() {
        let points = [pt(0.0, 0.0, 1.0), pt(4.0, 1.0, 2.0)];
        let g = kde_fit("A", &points, fixed(0.5, 0.25), &GridSpec::default()).unwrap();
        let e = g.extent();
        assert!(e[0] <= -1.5 + 1e-12 && e[2] >= 5.5 - 1e-12);
        assert!(e[1] <= -0.75 + 1e-12 && e[3] >= 1.75 - 1e-12);
        assert!(g.values.iter().all(|v| *v >= 0.0));
        assert!((g.mass() - 1.0).abs() < 0.01, "{}", g.mass());
    }

    #[test]
    fn mirror_symmetry() {
        let points = [pt(-1.0, 0.0, 1.0), pt(1.0, 0.0, 1.0)];
        let g = kde_fit("A", &points, fixed(0.7, 0.7), &GridSpec { nx: 64, ny: 33, extent: None }).unwrap();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let a = g.value(ix, iy);
                let b = g.value(g.nx - 1 - ix, iy);
                assert!((a - b).abs() < 1e-12 * a.max(1e-300).max(1.0));
            }
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let points: Vec<WeightedPoint> = (0..50)
            .map(|_| pt(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(1.0..9.0)))
            .collect();
        let doubled: Vec<WeightedPoint> = points.iter().map(|p| pt(p.x, p.y, 2.0 * p.w)).collect();
        let spec = GridSpec { nx: 96, ny: 80, extent: None };
        let a = kde_fit("A", &points, BandwidthRule::Scott, &spec).unwrap();
        let b = kde_fit("A", &doubled, BandwidthRule::Scott, &spec).unwrap();
        assert_eq!(a.bandwidth.hx, b.bandwidth.hx);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn scott_equal_weights_match_unweighted() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<(f64, f64)> = (0..200).map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..3.0))).collect();
        let points: Vec<WeightedPoint> = xs.iter().map(|&(x, y)| pt(x, y, 5.0)).collect();
        let (bw, flags) = scott_bandwidth(&points).unwrap();
        assert!(flags.is_empty());
        let n = xs.len() as f64;
        let sd = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let f = n.powf(-1.0 / 6.0);
        assert!((bw.hx - sd(xs.iter().map(|p| p.0).collect()) * f).abs() < 1e-12);
        assert!((bw.hy - sd(xs.iter().map(|p| p.1).collect()) * f).abs() < 1e-12);
    }

    #[test]
    fn scott_fallbacks() {
        let line = [pt(1.0, 0.0, 1.0), pt(1.0, 5.0, 1.0), pt(1.0, 2.0, 1.0)];
        let (bw, flags) = scott_bandwidth(&line).unwrap();
        assert_eq!(flags, ["degenerate_x_bandwidth"]);
        assert!((bw.hx - 0.01 * bw.hy).abs() < 1e-15);
        let (bw, flags) = scott_bandwidth(&[pt(3.0, 3.0, 2.0)]).unwrap();
        assert_eq!(flags.len(), 2);
        assert_eq!((bw.hx, bw.hy), (1.0, 1.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            kde_fit("A", &[pt(0.0, 0.0, 0.0)], BandwidthRule::Scott, &GridSpec::default()).unwrap_err(),
            DensityError::ZeroWeight
        );
        assert!(kde_fit("A", &[], BandwidthRule::Scott, &GridSpec::default()).is_err());
        assert!(kde_fit("A", &[pt(f64::NAN, 0.0, 1.0)], BandwidthRule::Scott, &GridSpec::default()).is_err());
        assert!(kde_fit("A", &[pt(0.0, 0.0, 1.0)], BandwidthRule::Scott, &GridSpec { nx: 0, ny: 3, extent: None }).is_err());
        assert!(kde_fit("A", &[pt(0.0, 0.0, 1.0)], fixed(0.0, 1.0), &GridSpec::default()).is_err());
        assert!("0.5".parse::<BandwidthRule>().is_err());
        assert_eq!("Scott".parse::<BandwidthRule>().unwrap(), BandwidthRule::Scott);
        assert_eq!("0.5, 2".parse::<BandwidthRule>().unwrap(), fixed(0.5, 2.0));
    }

    #[test]
    fn grid_agrees_with_exact_evaluation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let points: Vec<WeightedPoint> = (0..100)
            .map(|_| pt(rng.random_range(-10.0..10.0), rng.random_range(-4.0..4.0), rng.random_range(1.0..4.0)))
            .collect();
        let g = kde_fit("A", &points, BandwidthRule::Scott, &GridSpec::default()).unwrap();
        assert!((g.mass() - 1.0).abs() < 0.01);
        for _ in 0..500 {
            let q = [rng.random_range(g.extent()[0]..g.extent()[2]), rng.random_range(g.extent()[1]..g.extent()[3])];
            let (ix, iy) = g.locate(q).unwrap();
            let c = g.center(ix, iy);
            let exact_at_center = evaluate_density(&points, g.bandwidth, c);
            assert!((g.value(ix, iy) - exact_at_center).abs() <= 1e-12 * exact_at_center.max(1e-300) + 1e-18);
            let exact = evaluate_density(&points, g.bandwidth, q);
            if exact > 1e-6 {
                assert!((g.value(ix, iy) - exact).abs() / exact < 0.05, "{q:?} {} {exact} {:?} {:?}", g.value(ix, iy), g.bandwidth, g.extent());
            }
        }
    }

    #[test]
    fn uniform_grid_levels() {
        let g = DensityGrid {
            group: "A".into(),
            origin: [0.0, 0.0],
            cell_size: [0.5, 0.5],
            nx: 4,
            ny: 2,
            bandwidth: Bandwidth { hx: 1.0, hy: 1.0 },
            n_eff: 1.0,
            total_weight: 1.0,
            flags: vec![],
            values: vec![0.5; 8],
        };
        let levels = contour_levels(&g, &ContourSpec::default());
        assert!(levels.iter().all(|&t| t == 0.5));
    }

    #[test]
    fn single_kernel_half_mass() {
        let g = kde_fit("A", &[pt(0.0, 0.0, 1.0)], fixed(1.0, 1.0), &GridSpec::default()).unwrap();
        let levels = contour_levels(&g, &ContourSpec::default());
        assert!(levels.windows(2).all(|w| w[0] <= w[1]));
        let half = contour_levels(&g, &ContourSpec::new(vec![0.5]).unwrap())[0];
        let above = mass_above(&g, half) / g.mass();
        assert!((above - 0.5).abs() < 0.02, "{above}");
        assert!(ContourSpec::new(vec![0.5, 0.4]).is_err());
        assert!(ContourSpec::new(vec![0.0]).is_err());
    }
}
