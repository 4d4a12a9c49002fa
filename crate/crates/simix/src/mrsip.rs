//! Mixture of regressions with varying single-index proportions: backfitting
//! between nonparametric proportion curves and the global regression
//! parameters (alpha, beta, sigma^2).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimixError};
use crate::mixlin::{design_matrix, fit_mixlinreg, LinearMixtureParams, MixlinOptions, PosteriorMatrix};
use crate::msim::{profile_on_sphere, ProfiledIndex};
use crate::sir::{normalize_index, sir_direction, sir_from_labels, IndexVector};
use crate::smoothing::{
    build_grid, kernel_weight_matrix, trimmed_span, CurveSet, Grid, Kernel, DEFAULT_GRID_N,
    DEFAULT_GRID_TRIM, STARVED_MASS,
};
use crate::stats::{log_normal_pdf, log_sum_exp, softmax_in_place};

/// Proportion curves are clamped to [PI_FLOOR, 1 - PI_FLOOR] and
/// renormalized before any likelihood evaluation.
pub const PI_FLOOR: f64 = 1e-6;

const VARIANCE_FLOOR_RATIO: f64 = 1e-8;

/// Options for [`fit_mrsip`].
#[derive(Debug, Clone)]
pub struct MrsipOptions {
    pub grid_n: usize,
    /// Quantile fraction trimmed from each tail of the index values before
    /// the fitting grid is built (see [`crate::smoothing::trimmed_span`]).
    pub grid_trim: f64,
    pub intercept: bool,
    /// Initial index; when absent it is derived from the hard clustering of
    /// a mixture-of-linear-regressions fit.
    pub init_index: Option<IndexVector>,
    pub curve_max_iter: usize,
    pub curve_tol: f64,
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    pub outer_rounds: usize,
    pub outer_tol: f64,
    pub seed: u64,
    pub kernel: Kernel,
}

impl Default for MrsipOptions {
    fn default() -> Self {
        Self {
            grid_n: DEFAULT_GRID_N,
            grid_trim: DEFAULT_GRID_TRIM,
            intercept: true,
            init_index: None,
            curve_max_iter: 200,
            curve_tol: 1e-6,
            inner_max_iter: 50,
            inner_tol: 1e-6,
            outer_rounds: 20,
            outer_tol: 1e-6,
            seed: 0,
            kernel: Kernel::Gaussian,
        }
    }
}

/// A fitted MRSIP model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrsipFit {
    pub index: IndexVector,
    /// Proportion curves only; the mean/variance slots are empty.
    pub proportion_curves: CurveSet,
    /// Component coefficients and variances; the proportions slot holds the
    /// mean responsibilities for reference, not model structure.
    pub linear: LinearMixtureParams,
    pub posteriors: PosteriorMatrix,
    pub loglik: f64,
    pub bandwidth: f64,
    pub iterations: MrsipIterations,
    pub converged: bool,
    pub kernel: Kernel,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MrsipIterations {
    pub curve_iterations: usize,
    pub inner_iterations: usize,
    pub outer_rounds: usize,
}

/// Clamp a proportion row into [PI_FLOOR, 1 - PI_FLOOR] and renormalize.
pub fn floor_proportions(row: &mut [f64]) {
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = v.clamp(PI_FLOOR, 1.0 - PI_FLOOR);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// E-step: responsibilities proportional to pi_j(z_i) phi(y_i | x_i^T beta_j, sigma_j^2).
pub fn estep_mrsip(
    pi_at_obs: &DMatrix<f64>,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    linear: &LinearMixtureParams,
) -> Result<PosteriorMatrix> {
    let n = y.len();
    let k = pi_at_obs.ncols();
    if pi_at_obs.nrows() != n || design.nrows() != n {
        return Err(SimixError::Shape("pi_at_obs and design must have n rows".into()));
    }
    if linear.coefficients.ncols() != design.ncols() || linear.n_components() != k {
        return Err(SimixError::Shape(
            "linear params shape does not match design/pi".into(),
        ));
    }
    let means = design * linear.coefficients.transpose();
    let mut post = DMatrix::zeros(n, k);
    let mut logw = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            logw[j] = pi_at_obs[(i, j)].ln()
                + log_normal_pdf(y[i], means[(i, j)], linear.variances[j]);
        }
        softmax_in_place(&mut logw);
        for j in 0..k {
            post[(i, j)] = logw[j];
        }
    }
    PosteriorMatrix::new(post)
}

/// M-step for the proportion curves: kernel-weighted responsibility averages
/// at each grid point. The denominator is shared across components, so rows
/// sum to 1 exactly.
pub fn mstep_pi(
    posteriors: &PosteriorMatrix,
    index_values: &[f64],
    grid: &Grid,
    h: f64,
    kernel: Kernel,
) -> Result<DMatrix<f64>> {
    let weights = kernel_weight_matrix(index_values, grid, h, kernel)?;
    mstep_pi_with_weights(posteriors, &weights, grid)
}

pub(crate) fn mstep_pi_with_weights(
    posteriors: &PosteriorMatrix,
    weights: &DMatrix<f64>,
    grid: &Grid,
) -> Result<DMatrix<f64>> {
    let n = posteriors.n();
    let k = posteriors.k();
    let big_n = grid.len();
    if weights.nrows() != n || weights.ncols() != big_n {
        return Err(SimixError::Shape("weight matrix must be n x N".into()));
    }
    let post = posteriors.matrix();
    let mut pi = DMatrix::zeros(big_n, k);
    for t in 0..big_n {
        let mut total = 0.0;
        for i in 0..n {
            total += weights[(i, t)];
        }
        if total < STARVED_MASS {
            return Err(SimixError::StarvedNeighborhood {
                grid_point: grid.points()[t],
                mass: total,
            });
        }
        for j in 0..k {
            let mut mass = 0.0;
            for i in 0..n {
                mass += post[(i, j)] * weights[(i, t)];
            }
            pi[(t, j)] = mass / total;
        }
    }
    Ok(pi)
}

/// M-step for the regression parameters: responsibility-weighted least
/// squares per component and the weighted residual variance.
pub fn update_beta_sigma(
    posteriors: &PosteriorMatrix,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
) -> Result<LinearMixtureParams> {
    let n = design.nrows();
    let q = design.ncols();
    let k = posteriors.k();
    if posteriors.n() != n || y.len() != n {
        return Err(SimixError::Shape("posteriors/design/y row mismatch".into()));
    }
    let y_mean = y.sum() / n as f64;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let var_floor = (VARIANCE_FLOOR_RATIO * y_var).max(f64::MIN_POSITIVE);

    let post = posteriors.matrix();
    let mut coefficients = DMatrix::zeros(k, q);
    let mut variances = DVector::zeros(k);
    let mut proportions = DVector::zeros(k);
    for j in 0..k {
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        let mut wsum = 0.0;
        for i in 0..n {
            let w = post[(i, j)];
            wsum += w;
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
        let beta = gram.lu().solve(&rhs).ok_or(SimixError::ComponentCollapse {
            component: j,
            weight: wsum,
            needed: q,
        })?;
        let mut rss = 0.0;
        for i in 0..n {
            let fit = design.row(i).transpose().dot(&beta);
            rss += post[(i, j)] * (y[i] - fit).powi(2);
        }
        let mut var = rss / wsum;
        if var < var_floor {
            log::warn!("mrsip component {j} variance {var:.3e} clamped to floor {var_floor:.3e}");
            var = var_floor;
        }
        coefficients.set_row(j, &beta.transpose());
        variances[j] = var;
        proportions[j] = wsum / n as f64;
    }
    Ok(LinearMixtureParams {
        coefficients,
        variances,
        proportions,
        intercept,
    })
}

/// Evaluate floored proportion curves at the given index values.
pub fn proportions_at(curves: &CurveSet, queries: &[f64]) -> DMatrix<f64> {
    let k = curves.n_components();
    let mut pi = DMatrix::zeros(queries.len(), k);
    let mut row = vec![0.0; k];
    for (i, &q) in queries.iter().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = curves.pi_at(j, q);
        }
        floor_proportions(&mut row);
        for j in 0..k {
            pi[(i, j)] = row[j];
        }
    }
    pi
}

/// Observed-data log-likelihood of the MRSIP.
pub fn loglik_mrsip(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    curves: &CurveSet,
    linear: &LinearMixtureParams,
    index: &IndexVector,
) -> f64 {
    let design = design_matrix(x, linear.intercept);
    let z: Vec<f64> = index.project(x).iter().copied().collect();
    let pi = proportions_at(curves, &z);
    let means = &design * linear.coefficients.transpose();
    let k = linear.n_components();
    let mut logw = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..y.len() {
        for j in 0..k {
            logw[j] = pi[(i, j)].ln() + log_normal_pdf(y[i], means[(i, j)], linear.variances[j]);
        }
        total += log_sum_exp(&logw);
    }
    total
}

/// Maximize the index log-likelihood with the proportion curves and linear
/// parameters held fixed.
pub fn profile_index_mrsip(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    curves: &CurveSet,
    linear: &LinearMixtureParams,
    start: &IndexVector,
) -> Result<ProfiledIndex> {
    profile_on_sphere(start, |alpha| -loglik_mrsip(x, y, curves, linear, alpha))
}

fn constant_pi_curves(grid: &Grid, proportions: &DVector<f64>) -> CurveSet {
    let k = proportions.len();
    let big_n = grid.len();
    let mut pi = DMatrix::zeros(big_n, k);
    for t in 0..big_n {
        for j in 0..k {
            pi[(t, j)] = proportions[j];
        }
    }
    CurveSet {
        grid: grid.clone(),
        proportions: pi,
        means: DMatrix::zeros(0, k),
        variances: DMatrix::zeros(0, k),
    }
}

fn curves_from_pi(grid: &Grid, pi: DMatrix<f64>) -> CurveSet {
    let k = pi.ncols();
    CurveSet {
        grid: grid.clone(),
        proportions: pi,
        means: DMatrix::zeros(0, k),
        variances: DMatrix::zeros(0, k),
    }
}

/// Fit the MRSIP by the backfitting algorithm: initialize from a mixture of
/// linear regressions and SIR on its hard clustering, then alternate curve
/// estimation with parameter updates until the log-likelihood stabilizes.
pub fn fit_mrsip(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
    h: f64,
    opts: &MrsipOptions,
) -> Result<MrsipFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n <= p + 1 {
        return Err(SimixError::EmptyData("need n > p + 1 observations"));
    }
    if k == 0 {
        return Err(SimixError::EmptyData("k must be at least 1"));
    }

    // Step 1: (beta, sigma^2) from a linear mixture; alpha from SIR on its
    // hard clustering
    let mixlin_opts = MixlinOptions {
        intercept: opts.intercept,
        seed: opts.seed.wrapping_add(0x517cc1b7),
        ..Default::default()
    };
    let base = fit_mixlinreg(x, y, k, &mixlin_opts)?;
    let mut linear = base.params.clone();
    let mut index = match &opts.init_index {
        Some(i) => i.clone(),
        None => {
            if p == 1 {
                normalize_index(&DVector::from_vec(vec![1.0]))?
            } else {
                let labels = base.posteriors.hard_labels();
                sir_from_labels(x, &labels, k)
                    .or_else(|_| sir_direction(x, y, 10))
                    .map_err(|e| SimixError::Estimation {
                        stage: "fit_mrsip",
                        message: format!("index initialization failed: {e}"),
                    })?
            }
        }
    };

    let design = design_matrix(x, opts.intercept);
    let mut iterations = MrsipIterations::default();
    let mut curves: Option<CurveSet> = None;
    let mut posteriors = base.posteriors.clone();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;

    for round in 0..opts.outer_rounds {
        iterations.outer_rounds = round + 1;

        // Step 2: estimate the proportion curves with (alpha, beta, sigma^2)
        // fixed, alternating E and M until the curves stabilize
        let z: Vec<f64> = index.project(x).iter().copied().collect();
        let grid = build_grid(&trimmed_span(&z, opts.grid_trim)?, opts.grid_n)?;
        let weights = kernel_weight_matrix(&z, &grid, h, opts.kernel)?;
        let mut cur = match &curves {
            // carry the previous round's curves onto the new grid
            Some(c) => curves_from_pi(&grid, proportions_at(c, grid.points())),
            None => constant_pi_curves(&grid, &linear.proportions),
        };
        for it in 0..opts.curve_max_iter {
            iterations.curve_iterations += 1;
            let pi_obs = proportions_at(&cur, &z);
            posteriors = estep_mrsip(&pi_obs, &design, y, &linear)?;
            let pi_new = mstep_pi_with_weights(&posteriors, &weights, &grid)?;
            let delta = pi_new
                .iter()
                .zip(cur.proportions.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            cur = curves_from_pi(&grid, pi_new);
            if delta < opts.curve_tol && it > 0 {
                break;
            }
        }

        // Step 3: alternate (beta, sigma^2) updates with index profiling,
        // holding the curves fixed
        for _ in 0..opts.inner_max_iter {
            iterations.inner_iterations += 1;
            let z_cur: Vec<f64> = index.project(x).iter().copied().collect();
            let pi_obs = proportions_at(&cur, &z_cur);
            let post = estep_mrsip(&pi_obs, &design, y, &linear)?;
            let new_linear = update_beta_sigma(&post, &design, y, opts.intercept)?;
            let profiled = profile_index_mrsip(x, y, &cur, &new_linear, &index)?;
            let param_delta = (&new_linear.coefficients - &linear.coefficients)
                .iter()
                .chain((&new_linear.variances - &linear.variances).iter())
                .map(|v| v.abs())
                .fold(0.0f64, f64::max)
                .max(profiled.index.distance(&index));
            linear = new_linear;
            index = profiled.index;
            posteriors = post;
            if param_delta < opts.inner_tol {
                break;
            }
        }

        let ll = loglik_mrsip(x, y, &cur, &linear, &index);
        curves = Some(cur);
        if prev_ll.is_finite() && (ll - prev_ll).abs() < opts.outer_tol * (1.0 + prev_ll.abs()) {
            prev_ll = ll;
            converged = true;
            break;
        }
        prev_ll = ll;
    }

    let curves = curves.expect("outer_rounds must be at least 1");
    Ok(MrsipFit {
        index,
        proportion_curves: curves,
        linear,
        posteriors,
        loglik: prev_ll,
        bandwidth: h,
        iterations,
        converged,
        kernel: opts.kernel,
    })
}

/// Predictions, responsibilities, and hard labels for new data. With `y`
/// supplied the responsibilities use the observed response (the CV
/// construction); otherwise the proportion-weighted mean is returned.
pub fn predict_mrsip(
    fit: &MrsipFit,
    x_new: &DMatrix<f64>,
    y_new: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, PosteriorMatrix, Vec<usize>)> {
    if x_new.ncols() != fit.index.len() {
        return Err(SimixError::Shape(format!(
            "new data has {} columns, fit expects {}",
            x_new.ncols(),
            fit.index.len()
        )));
    }
    let design = design_matrix(x_new, fit.linear.intercept);
    let z: Vec<f64> = fit.index.project(x_new).iter().copied().collect();
    let pi = proportions_at(&fit.proportion_curves, &z);
    let means = &design * fit.linear.coefficients.transpose();
    let n = z.len();
    let k = fit.linear.n_components();

    let posteriors = match y_new {
        Some(y) => {
            if y.len() != n {
                return Err(SimixError::Shape(format!(
                    "y_new length {} != x_new rows {n}",
                    y.len()
                )));
            }
            estep_mrsip(&pi, &design, y, &fit.linear)?
        }
        None => PosteriorMatrix::new(pi.clone())?,
    };

    let mut y_hat = DVector::zeros(n);
    for i in 0..n {
        let mut v = 0.0;
        for j in 0..k {
            v += posteriors.matrix()[(i, j)] * means[(i, j)];
        }
        y_hat[i] = v;
    }
    let labels = posteriors.hard_labels();
    Ok((y_hat, posteriors, labels))
}
