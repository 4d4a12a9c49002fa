//! Sliced inverse regression for the initial index estimate, plus the
//! identifiability normalization applied to every index vector: unit norm
//! with a positive first nonzero element.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimixError};

const NONZERO_TOL: f64 = 1e-12;
const EIGEN_FLOOR_RATIO: f64 = 1e-10;

/// A unit-norm p-vector whose first nonzero element is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexVector(DVector<f64>);

impl IndexVector {
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    /// z_i = alpha^T x_i for every row of `x`.
    pub fn project(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.0
    }

    /// Euclidean distance to another index vector.
    pub fn distance(&self, other: &IndexVector) -> f64 {
        (&self.0 - &other.0).norm()
    }

    /// Angle in degrees between the two directions (sign-insensitive).
    pub fn angle_degrees(&self, other: &IndexVector) -> f64 {
        let c = self.0.dot(&other.0).abs().min(1.0);
        c.acos().to_degrees()
    }
}

/// Scale to unit norm and flip the global sign so the first element with
/// magnitude above 1e-12 is positive.
pub fn normalize_index(raw: &DVector<f64>) -> Result<IndexVector> {
    let norm = raw.norm();
    if !norm.is_finite() || norm <= NONZERO_TOL {
        return Err(SimixError::DegenerateIndex(norm));
    }
    let mut v = raw / norm;
    if let Some(first) = v.iter().find(|e| e.abs() > NONZERO_TOL) {
        if *first < 0.0 {
            v = -v;
        }
    }
    Ok(IndexVector(v))
}

/// Inverse square root of the sample covariance of `x`, with an explicit
/// rank check. Returns (column means, Sigma^{-1/2}).
fn standardizer(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let p = x.ncols();
    if n < 2 {
        return Err(SimixError::EmptyData("need at least two observations"));
    }
    let mean = DVector::from_iterator(p, (0..p).map(|c| x.column(c).sum() / n as f64));
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..n {
        let d = x.row(i).transpose() - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    let eig = cov.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let floor = EIGEN_FLOOR_RATIO * max_ev;
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(min_ev.is_finite()) || min_ev < floor {
        return Err(SimixError::RankDeficient {
            min: min_ev,
            floor,
        });
    }
    let inv_sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let inv_sqrt = &eig.eigenvectors * inv_sqrt_d * eig.eigenvectors.transpose();
    Ok((mean, inv_sqrt))
}

/// Leading SIR direction from slice groups given as index lists.
fn sir_core(x: &DMatrix<f64>, groups: &[Vec<usize>]) -> Result<IndexVector> {
    let n = x.nrows();
    let p = x.ncols();
    let (mean, inv_sqrt) = standardizer(x)?;

    // covariance of slice means of the standardized predictors, weighted by
    // slice proportions
    let mut m = DMatrix::zeros(p, p);
    for g in groups {
        if g.is_empty() {
            return Err(SimixError::Slicing("empty slice group".into()));
        }
        let mut gm = DVector::zeros(p);
        for &i in g {
            gm += &inv_sqrt * (x.row(i).transpose() - &mean);
        }
        gm /= g.len() as f64;
        let w = g.len() as f64 / n as f64;
        m += w * &gm * gm.transpose();
    }

    let eig = m.symmetric_eigen();
    let mut best = 0;
    for i in 1..p {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best).into_owned();
    // back-transform to the original predictor scale
    let raw = &inv_sqrt * v;
    normalize_index(&raw)
}

/// SIR with slices formed by y-order quantiles. Ties in y keep the stable
/// order by observation index.
pub fn sir_direction(x: &DMatrix<f64>, y: &DVector<f64>, n_slices: usize) -> Result<IndexVector> {
    let n = x.nrows();
    if y.len() != n {
        return Err(SimixError::Shape(format!(
            "x rows ({n}) != y length ({})",
            y.len()
        )));
    }
    if n_slices < 2 {
        return Err(SimixError::Slicing("need at least two slices".into()));
    }
    if n < n_slices {
        return Err(SimixError::Slicing(format!(
            "fewer observations ({n}) than slices ({n_slices})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap().then(a.cmp(&b)));
    let groups: Vec<Vec<usize>> = (0..n_slices)
        .map(|s| {
            let lo = s * n / n_slices;
            let hi = (s + 1) * n / n_slices;
            order[lo..hi].to_vec()
        })
        .collect();
    sir_core(x, &groups)
}

/// SIR with slices defined by component labels in {0, .., k-1}.
pub fn sir_from_labels(x: &DMatrix<f64>, labels: &[usize], k: usize) -> Result<IndexVector> {
    if labels.len() != x.nrows() {
        return Err(SimixError::Shape(format!(
            "x rows ({}) != labels length ({})",
            x.nrows(),
            labels.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(SimixError::Slicing(format!("label {l} out of range 0..{k}")));
        }
        groups[l].push(i);
    }
    let nonempty: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(SimixError::Slicing(
            "need at least two nonempty label groups".into(),
        ));
    }
    sir_core(x, &nonempty)
}
