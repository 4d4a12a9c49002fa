//! Kernel weights, evaluation grids, linear interpolation, and weighted
//! local-constant averages. Every kernel M-step in the crate is built from
//! these pieces.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimixError};

/// Default number of grid points for curve evaluation.
pub const DEFAULT_GRID_N: usize = 100;

/// Default quantile fraction trimmed from each tail of the index values
/// when a fitting grid is built (see [`trimmed_span`]).
pub const DEFAULT_GRID_TRIM: f64 = 0.05;

/// Kernel mass below this at an evaluation point is treated as starved.
pub const STARVED_MASS: f64 = 1e-12;

/// Symmetric kernel density used for local weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Kernel {
    /// Standard normal density. Unbounded support, so sparse grid tails
    /// still receive positive weight.
    #[default]
    Gaussian,
    /// 0.75 (1 - u^2) on [-1, 1].
    Epanechnikov,
}

impl Kernel {
    /// K(u), a symmetric density integrating to 1.
    pub fn density(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// K_h(u) = K(u / h) / h.
    pub fn weight(self, u: f64, h: f64) -> Result<f64> {
        if !(h.is_finite() && h > 0.0) {
            return Err(SimixError::InvalidBandwidth(h));
        }
        Ok(self.density(u / h) / h)
    }
}

/// Convenience wrapper for the default Gaussian kernel weight K_h(u).
pub fn kernel_weight(u: f64, h: f64) -> Result<f64> {
    Kernel::Gaussian.weight(u, h)
}

/// A strictly increasing evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    /// Build a grid from explicit points; they must be strictly increasing
    /// and finite, with at least two entries.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(SimixError::EmptyData("grid needs at least two points"));
        }
        for w in points.windows(2) {
            if !(w[0].is_finite() && w[1].is_finite() && w[0] < w[1]) {
                return Err(SimixError::Shape(format!(
                    "grid points must be strictly increasing and finite, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Piecewise-linear interpolation of `values` (aligned with the grid) at
    /// `query`. Queries outside the grid clamp to the endpoint values.
    pub fn interpolate(&self, values: &[f64], query: f64) -> Result<f64> {
        if values.len() != self.points.len() {
            return Err(SimixError::Shape(format!(
                "{} values for a {}-point grid",
                values.len(),
                self.points.len()
            )));
        }
        Ok(self.interpolate_unchecked(values, query))
    }

    /// Interpolation without the length check; used in inner loops where the
    /// alignment is established once.
    pub(crate) fn interpolate_unchecked(&self, values: &[f64], query: f64) -> f64 {
        let pts = &self.points;
        if query <= pts[0] {
            return values[0];
        }
        let last = pts.len() - 1;
        if query >= pts[last] {
            return values[last];
        }
        // partition_point returns the first index with point > query
        let hi = pts.partition_point(|&p| p <= query);
        let lo = hi - 1;
        let t = (query - pts[lo]) / (pts[hi] - pts[lo]);
        values[lo] + t * (values[hi] - values[lo])
    }
}

/// N equally spaced grid points spanning the observed index values.
pub fn build_grid(index_values: &[f64], n_points: usize) -> Result<Grid> {
    if index_values.is_empty() {
        return Err(SimixError::EmptyData("no index values to span"));
    }
    if n_points < 2 {
        return Err(SimixError::EmptyData("grid needs at least two points"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in index_values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(SimixError::EmptyData("nonfinite index values"));
    }
    if hi <= lo {
        return Err(SimixError::DegenerateSpan(lo));
    }
    let step = (hi - lo) / (n_points - 1) as f64;
    let points = (0..n_points)
        .map(|t| {
            if t + 1 == n_points {
                hi
            } else {
                lo + step * t as f64
            }
        })
        .collect();
    Grid::from_points(points)
}

/// The [q, 1-q] sample-quantile span of `values`, as a two-element slice
/// suitable for [`build_grid`]. Local-constant estimates are unstable in the
/// sparse tails of the index distribution, so fitting grids are usually built
/// over a trimmed span rather than the full observed range; `trim = 0`
/// reproduces the [min, max] span.
pub fn trimmed_span(values: &[f64], trim: f64) -> Result<[f64; 2]> {
    if values.is_empty() {
        return Err(SimixError::EmptyData("no index values to span"));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(SimixError::Estimation {
            stage: "grid",
            message: format!("grid trim fraction {trim} outside [0, 0.5)"),
        });
    }
    let mut sorted: Vec<f64> = values.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(SimixError::EmptyData("nonfinite index values"));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let last = (sorted.len() - 1) as f64;
    let lo = sorted[(last * trim).round() as usize];
    let hi = sorted[(last * (1.0 - trim)).round() as usize];
    if hi <= lo {
        return Err(SimixError::DegenerateSpan(lo));
    }
    Ok([lo, hi])
}

/// Kernel-weighted local-constant average
/// sum_i w_i v_i K_h(c_i - z) / sum_i w_i K_h(c_i - z).
pub fn weighted_local_average(
    centers: &[f64],
    values: &[f64],
    weights: &[f64],
    z: f64,
    h: f64,
    kernel: Kernel,
) -> Result<f64> {
    if centers.len() != values.len() || centers.len() != weights.len() {
        return Err(SimixError::Shape(format!(
            "centers ({}), values ({}), weights ({}) must match",
            centers.len(),
            values.len(),
            weights.len()
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(SimixError::InvalidBandwidth(h));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..centers.len() {
        let k = kernel.density((centers[i] - z) / h);
        num += weights[i] * values[i] * k;
        den += weights[i] * k;
    }
    if den < STARVED_MASS {
        return Err(SimixError::StarvedNeighborhood {
            grid_point: z,
            mass: den,
        });
    }
    Ok(num / den)
}

/// Per-component proportion, mean, and variance curves on a shared grid.
///
/// For MRSIP only the proportion slot is populated; means and variances
/// stay empty (0 x k).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSet {
    pub grid: Grid,
    /// N x k; rows sum to 1.
    pub proportions: DMatrix<f64>,
    /// N x k component mean curves.
    pub means: DMatrix<f64>,
    /// N x k component variance curves, entries > 0.
    pub variances: DMatrix<f64>,
}

impl CurveSet {
    pub fn n_components(&self) -> usize {
        self.proportions.ncols()
    }

    /// Evaluate the proportion curve of component `j` at `z`.
    pub fn pi_at(&self, j: usize, z: f64) -> f64 {
        self.interp_col(&self.proportions, j, z)
    }

    pub fn mean_at(&self, j: usize, z: f64) -> f64 {
        self.interp_col(&self.means, j, z)
    }

    pub fn variance_at(&self, j: usize, z: f64) -> f64 {
        self.interp_col(&self.variances, j, z)
    }

    fn interp_col(&self, m: &DMatrix<f64>, j: usize, z: f64) -> f64 {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        self.grid.interpolate_unchecked(&col, z)
    }

    /// Evaluate all three curve families for every component at each query
    /// point. Returns (pi, mean, variance), each len(queries) x k.
    pub fn evaluate_all(&self, queries: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let k = self.n_components();
        let n = queries.len();
        let mut pi = DMatrix::zeros(n, k);
        let mut mean = DMatrix::zeros(n, k);
        let mut var = DMatrix::zeros(n, k);
        for j in 0..k {
            let pc: Vec<f64> = self.proportions.column(j).iter().copied().collect();
            let mc: Vec<f64> = if self.means.nrows() == self.grid.len() {
                self.means.column(j).iter().copied().collect()
            } else {
                Vec::new()
            };
            let vc: Vec<f64> = if self.variances.nrows() == self.grid.len() {
                self.variances.column(j).iter().copied().collect()
            } else {
                Vec::new()
            };
            for (i, &q) in queries.iter().enumerate() {
                pi[(i, j)] = self.grid.interpolate_unchecked(&pc, q);
                if !mc.is_empty() {
                    mean[(i, j)] = self.grid.interpolate_unchecked(&mc, q);
                }
                if !vc.is_empty() {
                    var[(i, j)] = self.grid.interpolate_unchecked(&vc, q);
                }
            }
        }
        (pi, mean, var)
    }
}

/// Precomputed kernel weight matrix K_h(z_i - u_t), n x N. The weights are
/// constant across EM iterations for a fixed index and bandwidth, so the
/// drivers compute them once.
pub(crate) fn kernel_weight_matrix(
    index_values: &[f64],
    grid: &Grid,
    h: f64,
    kernel: Kernel,
) -> Result<DMatrix<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(SimixError::InvalidBandwidth(h));
    }
    let n = index_values.len();
    let pts = grid.points();
    let mut w = DMatrix::zeros(n, pts.len());
    for (t, &u) in pts.iter().enumerate() {
        for (i, &z) in index_values.iter().enumerate() {
            w[(i, t)] = kernel.density((z - u) / h) / h;
        }
    }
    Ok(w)
}
