//! Classical EM for finite mixtures of linear regressions. Serves both as
//! the MixLinReg baseline and as the initializer for the semiparametric
//! fits.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimixError};
use crate::stats::{log_normal_pdf, log_sum_exp, softmax_in_place};

/// Relative variance floor: sigma_j^2 is clamped to this fraction of the
/// sample variance of y, blocking the unbounded-likelihood degeneracy.
const VARIANCE_FLOOR_RATIO: f64 = 1e-8;

/// Per-component regression coefficients, variances, and (for the baseline)
/// constant mixing proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearMixtureParams {
    /// k x q; q = p or p + 1 when an intercept column is prepended.
    pub coefficients: DMatrix<f64>,
    /// k-vector of component variances, all > 0.
    pub variances: DVector<f64>,
    /// k-vector of constant mixing proportions; unused by MRSIP.
    pub proportions: DVector<f64>,
    /// Whether the design includes a leading intercept column.
    pub intercept: bool,
}

impl LinearMixtureParams {
    pub fn n_components(&self) -> usize {
        self.coefficients.nrows()
    }
}

/// n x k responsibilities; rows sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorMatrix(DMatrix<f64>);

impl PosteriorMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        for i in 0..m.nrows() {
            let mut row_sum = 0.0;
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(SimixError::Shape(format!(
                        "responsibility ({i},{j}) = {v} outside [0,1]"
                    )));
                }
                row_sum += v;
            }
            if (row_sum - 1.0).abs() > 1e-10 {
                return Err(SimixError::Shape(format!(
                    "responsibility row {i} sums to {row_sum}"
                )));
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    /// argmax responsibility per row.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.0.nrows())
            .map(|i| {
                let mut best = 0;
                for j in 1..self.0.ncols() {
                    if self.0[(i, j)] > self.0[(i, best)] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Options for [`fit_mixlinreg`].
#[derive(Debug, Clone)]
pub struct MixlinOptions {
    pub starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub intercept: bool,
    pub seed: u64,
}

impl Default for MixlinOptions {
    fn default() -> Self {
        Self {
            starts: 10,
            max_iter: 1000,
            tol: 1e-8,
            intercept: true,
            seed: 0,
        }
    }
}

/// Result of a mixture-of-linear-regressions fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixlinFit {
    pub params: LinearMixtureParams,
    pub posteriors: PosteriorMatrix,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn design_matrix(x: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if intercept {
        let n = x.nrows();
        let mut d = DMatrix::zeros(n, x.ncols() + 1);
        for i in 0..n {
            d[(i, 0)] = 1.0;
            for c in 0..x.ncols() {
                d[(i, c + 1)] = x[(i, c)];
            }
        }
        d
    } else {
        x.clone()
    }
}

/// Observed-data log-likelihood sum_i log sum_j pi_j phi(y_i | x_i^T beta_j, sigma_j^2).
pub fn loglik_mixlin(
    params: &LinearMixtureParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let design = design_matrix(x, params.intercept);
    loglik_mixlin_design(params, &design, y)
}

pub(crate) fn loglik_mixlin_design(
    params: &LinearMixtureParams,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let k = params.n_components();
    if design.ncols() != params.coefficients.ncols() {
        return Err(SimixError::Shape(format!(
            "design has {} columns but coefficients expect {}",
            design.ncols(),
            params.coefficients.ncols()
        )));
    }
    for j in 0..k {
        if params.variances[j] <= 0.0 {
            return Err(SimixError::Estimation {
                stage: "loglik_mixlin",
                message: format!("nonpositive variance in component {j}"),
            });
        }
    }
    let means = design * params.coefficients.transpose(); // n x k
    let mut total = 0.0;
    let mut logterms = vec![0.0; k];
    for i in 0..design.nrows() {
        for j in 0..k {
            logterms[j] =
                params.proportions[j].ln() + log_normal_pdf(y[i], means[(i, j)], params.variances[j]);
        }
        total += log_sum_exp(&logterms);
    }
    Ok(total)
}

fn weighted_least_squares(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &[f64],
    component: usize,
) -> Result<DVector<f64>> {
    let q = design.ncols();
    let mut gram = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for i in 0..design.nrows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let row = design.row(i);
        for a in 0..q {
            rhs[a] += w * row[a] * y[i];
            for b in a..q {
                gram[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram.clone().lu().solve(&rhs).ok_or_else(|| {
        SimixError::ComponentCollapse {
            component,
            weight: weights.iter().sum(),
            needed: q,
        }
    })
}

fn em_from_start(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
    mut params: LinearMixtureParams,
    opts: &MixlinOptions,
    var_floor: f64,
) -> Result<MixlinFit> {
    let n = design.nrows();
    let q = design.ncols();
    let mut post = DMatrix::zeros(n, k);
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        // E-step
        let means = design * params.coefficients.transpose();
        let mut logterms = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                logterms[j] = params.proportions[j].ln()
                    + log_normal_pdf(y[i], means[(i, j)], params.variances[j]);
            }
            softmax_in_place(&mut logterms);
            for j in 0..k {
                post[(i, j)] = logterms[j];
            }
        }

        // M-step
        for j in 0..k {
            let weights: Vec<f64> = (0..n).map(|i| post[(i, j)]).collect();
            let wsum: f64 = weights.iter().sum();
            if wsum < q as f64 {
                return Err(SimixError::ComponentCollapse {
                    component: j,
                    weight: wsum,
                    needed: q,
                });
            }
            let beta = weighted_least_squares(design, y, &weights, j)?;
            let mut rss = 0.0;
            for i in 0..n {
                let fit = design.row(i).transpose().dot(&beta);
                rss += weights[i] * (y[i] - fit).powi(2);
            }
            let mut var = rss / wsum;
            if var < var_floor {
                log::warn!("mixlin component {j} variance {var:.3e} clamped to floor {var_floor:.3e}");
                var = var_floor;
            }
            params.coefficients.set_row(j, &beta.transpose());
            params.variances[j] = var;
            params.proportions[j] = wsum / n as f64;
        }

        let ll = loglik_mixlin_design(&params, design, y)?;
        if ll + 1e-9 < prev_ll {
            log::warn!("mixlin log-likelihood decreased: {prev_ll} -> {ll}");
        }
        if prev_ll.is_finite() && (ll - prev_ll).abs() < opts.tol * (1.0 + prev_ll.abs()) {
            prev_ll = ll;
            converged = true;
            break;
        }
        prev_ll = ll;
    }

    Ok(MixlinFit {
        posteriors: PosteriorMatrix::new(renormalize_rows(post))?,
        params,
        loglik: prev_ll,
        iterations,
        converged,
    })
}

fn renormalize_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).sum();
        if s > 0.0 {
            for j in 0..m.ncols() {
                m[(i, j)] /= s;
            }
        }
    }
    m
}

fn random_partition_start(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
    var_floor: f64,
    intercept: bool,
) -> Result<LinearMixtureParams> {
    let n = design.nrows();
    let q = design.ncols();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut coefficients = DMatrix::zeros(k, q);
    let mut variances = DVector::zeros(k);
    let mut proportions = DVector::zeros(k);
    for j in 0..k {
        let lo = j * n / k;
        let hi = (j + 1) * n / k;
        let group = &idx[lo..hi];
        let mut weights = vec![0.0; n];
        for &i in group {
            weights[i] = 1.0;
        }
        let beta = weighted_least_squares(design, y, &weights, j)?;
        let mut rss = 0.0;
        for &i in group {
            let fit = design.row(i).transpose().dot(&beta);
            rss += (y[i] - fit).powi(2);
        }
        coefficients.set_row(j, &beta.transpose());
        variances[j] = (rss / group.len() as f64).max(var_floor);
        proportions[j] = group.len() as f64 / n as f64;
    }
    Ok(LinearMixtureParams {
        coefficients,
        variances,
        proportions,
        intercept,
    })
}

/// EM fit of a k-component mixture of linear regressions, best of
/// `opts.starts` random-partition initializations by final log-likelihood.
pub fn fit_mixlinreg(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
    opts: &MixlinOptions,
) -> Result<MixlinFit> {
    if k == 0 {
        return Err(SimixError::EmptyData("k must be at least 1"));
    }
    let design = design_matrix(x, opts.intercept);
    let n = design.nrows();
    let q = design.ncols();
    if n <= k * q {
        return Err(SimixError::EmptyData("need n > k * q observations"));
    }
    let y_mean = y.sum() / n as f64;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let var_floor = (VARIANCE_FLOOR_RATIO * y_var).max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<MixlinFit> = None;
    let mut last_err = None;
    for _ in 0..opts.starts.max(1) {
        let start = match random_partition_start(&design, y, k, &mut rng, var_floor, opts.intercept)
        {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match em_from_start(&design, y, k, start, opts, var_floor) {
            Ok(fit) => {
                if best.as_ref().map_or(true, |b| fit.loglik > b.loglik) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or(SimixError::Estimation {
            stage: "fit_mixlinreg",
            message: "all starts failed".into(),
        })
    })
}
