//! Simulation designs, evaluation metrics (RASE, MSE x100), component-label
//! matching, and the seeded replication harness.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, SimixError};
use crate::mixlin::{fit_mixlinreg, MixlinOptions};
use crate::mrsip::{fit_mrsip, MrsipOptions};
use crate::msim::{fit_msim, FitMode, MsimOptions};
use crate::sir::{normalize_index, sir_direction, IndexVector};
use crate::smoothing::{build_grid, CurveSet, DEFAULT_GRID_N};

/// Which simulation design to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExampleId {
    /// Two-component MSIM with smooth proportion, mean, and SD curves.
    Example1,
    /// Two-component MRSIP with linear means and a smooth proportion curve.
    Example2,
}

/// The generating truth attached to a simulated dataset.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub example: ExampleId,
    pub index: IndexVector,
    /// 0-based generating component per observation.
    pub labels: Vec<usize>,
    pub seed: u64,
}

fn true_alpha() -> IndexVector {
    normalize_index(&DVector::from_vec(vec![1.0, 1.0, 1.0])).unwrap()
}

/// pi_1(z) = 0.5 + 0.3 sin(pi z) for the MSIM design.
pub fn example1_pi1(z: f64) -> f64 {
    0.5 + 0.3 * (std::f64::consts::PI * z).sin()
}

/// Component mean curves of the MSIM design.
pub fn example1_means(z: f64) -> [f64; 2] {
    [
        3.0 - (2.0 * std::f64::consts::PI * z / 3f64.sqrt()).sin(),
        (3f64.sqrt() * std::f64::consts::PI * z).cos(),
    ]
}

/// Component SD curves of the MSIM design.
pub fn example1_sds(z: f64) -> [f64; 2] {
    [
        0.7 + (3.0 * std::f64::consts::PI * z).sin() / 15.0,
        0.3 + (1.3 * std::f64::consts::PI * z).cos() / 10.0,
    ]
}

/// pi_1(z) = 0.5 - 0.35 sin(pi z) for the MRSIP design.
pub fn example2_pi1(z: f64) -> f64 {
    0.5 - 0.35 * (std::f64::consts::PI * z).sin()
}

/// Coefficients (with intercept) of the MRSIP design: rows (1,0,3,0) and
/// (-1,2,0,3).
pub fn example2_betas() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 3.0, 0.0, -1.0, 2.0, 0.0, 3.0])
}

/// Component variances of the MRSIP design.
pub fn example2_variances() -> [f64; 2] {
    [0.7, 0.6]
}

impl SyntheticTruth {
    /// True proportion vector at an index value.
    pub fn pi(&self, z: f64) -> Vec<f64> {
        let p1 = match self.example {
            ExampleId::Example1 => example1_pi1(z),
            ExampleId::Example2 => example2_pi1(z),
        };
        vec![p1, 1.0 - p1]
    }

    /// True mean curves at an index value (MSIM design only).
    pub fn means(&self, z: f64) -> Vec<f64> {
        match self.example {
            ExampleId::Example1 => example1_means(z).to_vec(),
            ExampleId::Example2 => panic!("Example 2 means are linear in x, not curves in z"),
        }
    }

    /// True variance curves at an index value.
    pub fn variances(&self, z: f64) -> Vec<f64> {
        match self.example {
            ExampleId::Example1 => example1_sds(z).iter().map(|s| s * s).collect(),
            ExampleId::Example2 => example2_variances().to_vec(),
        }
    }
}

/// Draw from the two-component MSIM design.
pub fn gen_example1(n: usize, seed: u64) -> (Dataset, SyntheticTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = true_alpha();
    let x = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
    let z = alpha.project(&x);
    let mut y = DVector::zeros(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = if rng.gen::<f64>() < example1_pi1(z[i]) { 0 } else { 1 };
        let m = example1_means(z[i])[c];
        let s = example1_sds(z[i])[c];
        y[i] = Normal::new(m, s).unwrap().sample(&mut rng);
        labels.push(c);
    }
    (
        Dataset { x, y },
        SyntheticTruth {
            example: ExampleId::Example1,
            index: alpha,
            labels,
            seed,
        },
    )
}

/// Draw from the two-component MRSIP design.
pub fn gen_example2(n: usize, seed: u64) -> (Dataset, SyntheticTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = true_alpha();
    let betas = example2_betas();
    let vars = example2_variances();
    let x = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
    let z = alpha.project(&x);
    let mut y = DVector::zeros(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = if rng.gen::<f64>() < example2_pi1(z[i]) { 0 } else { 1 };
        let m = betas[(c, 0)]
            + betas[(c, 1)] * x[(i, 0)]
            + betas[(c, 2)] * x[(i, 1)]
            + betas[(c, 3)] * x[(i, 2)];
        y[i] = Normal::new(m, vars[c].sqrt()).unwrap().sample(&mut rng);
        labels.push(c);
    }
    (
        Dataset { x, y },
        SyntheticTruth {
            example: ExampleId::Example2,
            index: alpha,
            labels,
            seed,
        },
    )
}

/// Which curve family a RASE compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFamily {
    Proportions,
    Means,
    Variances,
}

/// RASE over the estimate's own grid:
/// RASE^2 = N^-1 sum_j sum_t (g_hat_j(u_t) - g_j(u_t))^2.
/// `truth` returns the k true values at a grid point; components must
/// already be matched.
pub fn rase<F: Fn(f64) -> Vec<f64>>(
    estimated: &CurveSet,
    family: CurveFamily,
    truth: F,
) -> Result<f64> {
    let grid = &estimated.grid;
    let m = match family {
        CurveFamily::Proportions => &estimated.proportions,
        CurveFamily::Means => &estimated.means,
        CurveFamily::Variances => &estimated.variances,
    };
    if m.nrows() != grid.len() {
        return Err(SimixError::Shape(format!(
            "{} curve rows for a {}-point grid",
            m.nrows(),
            grid.len()
        )));
    }
    let k = m.ncols();
    let big_n = grid.len();
    let mut total = 0.0;
    for (t, &u) in grid.points().iter().enumerate() {
        let tv = truth(u);
        if tv.len() != k {
            return Err(SimixError::Shape(format!(
                "truth returned {} components, estimate has {k}",
                tv.len()
            )));
        }
        for j in 0..k {
            total += (m[(t, j)] - tv[j]).powi(2);
        }
    }
    Ok((total / big_n as f64).sqrt())
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    assert!(k <= 6, "exhaustive matching limited to k <= 6");
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    heap_permute(&mut cur, k, &mut out);
    out
}

fn heap_permute(v: &mut Vec<usize>, m: usize, out: &mut Vec<Vec<usize>>) {
    if m == 1 {
        out.push(v.clone());
        return;
    }
    for i in 0..m {
        heap_permute(v, m - 1, out);
        if m % 2 == 0 {
            v.swap(i, m - 1);
        } else {
            v.swap(0, m - 1);
        }
    }
}

/// Permutation `perm` such that estimated component perm[j] corresponds to
/// true component j, minimizing the total squared curve error over all
/// three families on the estimate's grid.
pub fn match_components_curves<F: Fn(f64) -> (Vec<f64>, Vec<f64>, Vec<f64>)>(
    estimated: &CurveSet,
    truth: F,
) -> Vec<usize> {
    let k = estimated.n_components();
    let grid = estimated.grid.points();
    let mut best_perm = (0..k).collect::<Vec<_>>();
    let mut best_cost = f64::INFINITY;
    let truths: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = grid.iter().map(|&u| truth(u)).collect();
    for perm in permutations(k) {
        let mut cost = 0.0;
        for (t, (tp, tm, tv)) in truths.iter().enumerate() {
            for j in 0..k {
                let e = perm[j];
                cost += (estimated.proportions[(t, e)] - tp[j]).powi(2);
                if estimated.means.nrows() == grid.len() {
                    cost += (estimated.means[(t, e)] - tm[j]).powi(2);
                }
                if estimated.variances.nrows() == grid.len() {
                    cost += (estimated.variances[(t, e)] - tv[j]).powi(2);
                }
            }
        }
        if cost < best_cost {
            best_cost = cost;
            best_perm = perm;
        }
    }
    best_perm
}

/// Permutation minimizing the total squared coefficient difference between
/// estimated and true component coefficient rows.
pub fn match_components_beta(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<usize> {
    let k = truth.nrows();
    let mut best_perm = (0..k).collect::<Vec<_>>();
    let mut best_cost = f64::INFINITY;
    for perm in permutations(k) {
        let mut cost = 0.0;
        for j in 0..k {
            for c in 0..truth.ncols() {
                cost += (estimated[(perm[j], c)] - truth[(j, c)]).powi(2);
            }
        }
        if cost < best_cost {
            best_cost = cost;
            best_perm = perm;
        }
    }
    best_perm
}

/// Estimators the replication harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    /// SIR index only (Example 1).
    Sir,
    /// One-step MSIM curve estimate from the SIR index.
    OneStep,
    /// Fully iterative backfitting MSIM, SIR start.
    FibSir,
    /// Fully iterative backfitting MSIM, true-index start.
    FibTrue,
    /// MRSIP backfitting, data-driven start.
    MrsipSir,
    /// MRSIP backfitting, true-index start.
    MrsipTrue,
    /// Mixture of linear regressions baseline.
    MixLin,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Sir => "sir",
            Estimator::OneStep => "os",
            Estimator::FibSir => "fib",
            Estimator::FibTrue => "fib_t",
            Estimator::MrsipSir => "mrsip",
            Estimator::MrsipTrue => "mrsip_t",
            Estimator::MixLin => "mixlin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sir" => Estimator::Sir,
            "os" | "onestep" | "one-step" => Estimator::OneStep,
            "fib" | "fib_s" => Estimator::FibSir,
            "fib_t" => Estimator::FibTrue,
            "mrsip" | "mrsip_s" => Estimator::MrsipSir,
            "mrsip_t" => Estimator::MrsipTrue,
            "mixlin" | "mixlinreg" => Estimator::MixLin,
            _ => return None,
        })
    }
}

/// Appropriate bandwidths from the simulation studies, by design and sample
/// size; other n values scale by the n^(-1/5) rate from the nearest anchor.
pub fn default_bandwidth(example: ExampleId, estimator: Estimator, n: usize) -> f64 {
    let anchors: &[(usize, f64)] = match (example, estimator) {
        (ExampleId::Example1, Estimator::OneStep) => {
            &[(200, 0.125), (400, 0.108), (800, 0.094)]
        }
        (ExampleId::Example1, _) => &[(200, 0.109), (400, 0.100), (800, 0.091)],
        (ExampleId::Example2, _) => &[(200, 0.131), (400, 0.103), (800, 0.080)],
    };
    if let Some(&(_, h)) = anchors.iter().find(|&&(an, _)| an == n) {
        return h;
    }
    // nearest anchor, rate-scaled
    let (an, ah) = anchors
        .iter()
        .min_by_key(|&&(an, _)| (an as i64 - n as i64).abs())
        .copied()
        .unwrap();
    ah * (n as f64 / an as f64).powf(-0.2)
}

/// Replication harness configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub example: ExampleId,
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    /// Bandwidth for the backfitting / MRSIP fits; defaults per design when
    /// absent.
    pub bandwidth: Option<f64>,
    /// Bandwidth for the one-step estimate, configurable separately.
    pub os_bandwidth: Option<f64>,
    pub grid_n: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            example: ExampleId::Example1,
            n_values: vec![200, 400, 800],
            replications: 100,
            estimators: vec![Estimator::Sir, Estimator::OneStep, Estimator::FibSir],
            bandwidth: None,
            os_bandwidth: None,
            grid_n: DEFAULT_GRID_N,
            seed: 0,
            workers: 1,
        }
    }
}

/// One aggregated table cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableCell {
    pub n: usize,
    pub estimator: String,
    pub quantity: String,
    pub mean: f64,
    /// Absent when only one replication contributed.
    pub sd: Option<f64>,
    pub count: usize,
}

/// A failed replication, kept for reproduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub estimator: String,
    pub message: String,
}

/// Aggregated replication results shaped like the simulation tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationTable {
    pub example: ExampleId,
    pub replications: usize,
    pub cells: Vec<TableCell>,
    pub failures: Vec<FailureRecord>,
    /// Cumulative fit wall-clock per estimator name, in seconds.
    pub fit_seconds: BTreeMap<String, f64>,
}

impl ReplicationTable {
    pub fn cell(&self, n: usize, estimator: &str, quantity: &str) -> Option<&TableCell> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.estimator == estimator && c.quantity == quantity)
    }

    /// CSV rows: n,estimator,quantity,mean,sd,count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,estimator,quantity,mean,sd,count\n");
        for c in &self.cells {
            let sd = c.sd.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.6},{},{}\n",
                c.n, c.estimator, c.quantity, c.mean, sd, c.count
            ));
        }
        out
    }

    pub fn to_pretty_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:<10} {:<18} {:>12} {:>12} {:>6}\n",
            "n", "estimator", "quantity", "mean", "sd", "count"
        ));
        for c in &self.cells {
            let sd = c.sd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:>6} {:<10} {:<18} {:>12.4} {:>12} {:>6}\n",
                c.n, c.estimator, c.quantity, c.mean, sd, c.count
            ));
        }
        out
    }
}

/// One replication's records: (estimator name, quantity, value).
type RepRecords = Vec<(&'static str, String, f64)>;

fn run_one_replication(
    cfg: &ReplicationConfig,
    n: usize,
    rep: usize,
) -> (RepRecords, Vec<(String, String)>, BTreeMap<String, f64>) {
    // per-replication substream: worker count cannot change the draw
    let rep_seed = cfg
        .seed
        .wrapping_mul(0x100000001b3)
        .wrapping_add((n as u64) << 32)
        .wrapping_add(rep as u64);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut seconds: BTreeMap<String, f64> = BTreeMap::new();

    match cfg.example {
        ExampleId::Example1 => run_example1_rep(cfg, n, rep_seed, &mut records, &mut failures, &mut seconds),
        ExampleId::Example2 => run_example2_rep(cfg, n, rep_seed, &mut records, &mut failures, &mut seconds),
    }
    (records, failures, seconds)
}

fn alpha_sq_errors(est: &IndexVector, truth: &IndexVector) -> Vec<f64> {
    est.coefficients()
        .iter()
        .zip(truth.coefficients().iter())
        .map(|(a, b)| (a - b).powi(2) * 100.0)
        .collect()
}

fn run_example1_rep(
    cfg: &ReplicationConfig,
    n: usize,
    rep_seed: u64,
    records: &mut RepRecords,
    failures: &mut Vec<(String, String)>,
    seconds: &mut BTreeMap<String, f64>,
) {
    let (data, truth) = gen_example1(n, rep_seed);
    let wants = |e: Estimator| cfg.estimators.contains(&e);

    let sir_index = if wants(Estimator::Sir) || wants(Estimator::OneStep) || wants(Estimator::FibSir)
    {
        match sir_direction(&data.x, &data.y, 10) {
            Ok(a) => Some(a),
            Err(e) => {
                failures.push(("sir".into(), e.to_string()));
                None
            }
        }
    } else {
        None
    };

    if wants(Estimator::Sir) {
        if let Some(a) = &sir_index {
            for (c, v) in alpha_sq_errors(a, &truth.index).into_iter().enumerate() {
                records.push(("sir", format!("alpha{}_mse_x100", c + 1), v));
            }
        }
    }

    let run_msim = |mode: FitMode,
                    init: Option<IndexVector>,
                    h: f64,
                    name: &'static str,
                    records: &mut RepRecords,
                    failures: &mut Vec<(String, String)>,
                    seconds: &mut BTreeMap<String, f64>| {
        let opts = MsimOptions {
            mode,
            grid_n: cfg.grid_n,
            init_index: init,
            seed: rep_seed,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        match fit_msim(&data.x, &data.y, 2, h, &opts) {
            Ok(fit) => {
                *seconds.entry(name.to_string()).or_insert(0.0) +=
                    t0.elapsed().as_secs_f64();
                let perm = match_components_curves(&fit.curves, |u| {
                    (truth.pi(u), truth.means(u), truth.variances(u))
                });
                let permuted = permute_curves(&fit.curves, &perm);
                if mode == FitMode::Fib {
                    for (c, v) in alpha_sq_errors(&fit.index, &truth.index).into_iter().enumerate()
                    {
                        records.push((name, format!("alpha{}_mse_x100", c + 1), v));
                    }
                }
                let rp = rase(&permuted, CurveFamily::Proportions, |u| truth.pi(u)).unwrap();
                let rm = rase(&permuted, CurveFamily::Means, |u| truth.means(u)).unwrap();
                let rv = rase(&permuted, CurveFamily::Variances, |u| truth.variances(u)).unwrap();
                records.push((name, "rase_pi".into(), rp));
                records.push((name, "rase_m".into(), rm));
                records.push((name, "rase_sigma2".into(), rv));
            }
            Err(e) => failures.push((name.into(), e.to_string())),
        }
    };

    let h_fit = cfg
        .bandwidth
        .unwrap_or_else(|| default_bandwidth(ExampleId::Example1, Estimator::FibSir, n));
    let h_os = cfg
        .os_bandwidth
        .unwrap_or_else(|| default_bandwidth(ExampleId::Example1, Estimator::OneStep, n));

    if wants(Estimator::OneStep) {
        if let Some(a) = &sir_index {
            run_msim(FitMode::OneStep, Some(a.clone()), h_os, "os", records, failures, seconds);
        }
    }
    if wants(Estimator::FibSir) {
        if let Some(a) = &sir_index {
            run_msim(FitMode::Fib, Some(a.clone()), h_fit, "fib", records, failures, seconds);
        }
    }
    if wants(Estimator::FibTrue) {
        run_msim(
            FitMode::Fib,
            Some(truth.index.clone()),
            h_fit,
            "fib_t",
            records,
            failures,
            seconds,
        );
    }
}

fn permute_curves(curves: &CurveSet, perm: &[usize]) -> CurveSet {
    let k = perm.len();
    let n = curves.grid.len();
    let pick = |m: &DMatrix<f64>| -> DMatrix<f64> {
        if m.nrows() != n {
            return m.clone();
        }
        DMatrix::from_fn(n, k, |t, j| m[(t, perm[j])])
    };
    CurveSet {
        grid: curves.grid.clone(),
        proportions: pick(&curves.proportions),
        means: pick(&curves.means),
        variances: pick(&curves.variances),
    }
}

fn run_example2_rep(
    cfg: &ReplicationConfig,
    n: usize,
    rep_seed: u64,
    records: &mut RepRecords,
    failures: &mut Vec<(String, String)>,
    seconds: &mut BTreeMap<String, f64>,
) {
    let (data, truth) = gen_example2(n, rep_seed);
    let wants = |e: Estimator| cfg.estimators.contains(&e);
    let betas = example2_betas();
    let true_vars = example2_variances();
    let h = cfg
        .bandwidth
        .unwrap_or_else(|| default_bandwidth(ExampleId::Example2, Estimator::MrsipSir, n));

    let beta_records = |name: &'static str,
                        coeffs: &DMatrix<f64>,
                        vars: &DVector<f64>,
                        perm: &[usize],
                        records: &mut RepRecords| {
        for j in 0..2 {
            for c in 0..4 {
                let err = (coeffs[(perm[j], c)] - betas[(j, c)]).powi(2) * 100.0;
                records.push((name, format!("beta{}{}_mse_x100", j + 1, c), err));
            }
            let verr = (vars[perm[j]] - true_vars[j]).powi(2) * 100.0;
            records.push((name, format!("sigma2_{}_mse_x100", j + 1), verr));
        }
    };

    if wants(Estimator::MixLin) {
        let t0 = std::time::Instant::now();
        match fit_mixlinreg(&data.x, &data.y, 2, &MixlinOptions { seed: rep_seed, ..Default::default() }) {
            Ok(fit) => {
                *seconds.entry("mixlin".into()).or_insert(0.0) += t0.elapsed().as_secs_f64();
                let perm = match_components_beta(&fit.params.coefficients, &betas);
                beta_records("mixlin", &fit.params.coefficients, &fit.params.variances, &perm, records);
                // constant proportion "curves" evaluated against the true
                // proportion curve over the true-index grid
                let z: Vec<f64> = truth.index.project(&data.x).iter().copied().collect();
                if let Ok(grid) = build_grid(&z, cfg.grid_n) {
                    let pi = DMatrix::from_fn(grid.len(), 2, |_, j| fit.params.proportions[perm[j]]);
                    let curves = CurveSet {
                        grid,
                        proportions: pi,
                        means: DMatrix::zeros(0, 2),
                        variances: DMatrix::zeros(0, 2),
                    };
                    let rp = rase(&curves, CurveFamily::Proportions, |u| truth.pi(u)).unwrap();
                    records.push(("mixlin", "rase_pi_x100".into(), rp * 100.0));
                }
            }
            Err(e) => failures.push(("mixlin".into(), e.to_string())),
        }
    }

    let run_mrsip = |name: &'static str,
                         init: Option<IndexVector>,
                         records: &mut RepRecords,
                         failures: &mut Vec<(String, String)>,
                         seconds: &mut BTreeMap<String, f64>| {
        let opts = MrsipOptions {
            grid_n: cfg.grid_n,
            init_index: init,
            seed: rep_seed,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        match fit_mrsip(&data.x, &data.y, 2, h, &opts) {
            Ok(fit) => {
                *seconds.entry(name.to_string()).or_insert(0.0) += t0.elapsed().as_secs_f64();
                let perm = match_components_beta(&fit.linear.coefficients, &betas);
                for (c, v) in alpha_sq_errors(&fit.index, &truth.index).into_iter().enumerate() {
                    records.push((name, format!("alpha{}_mse_x100", c + 1), v));
                }
                beta_records(name, &fit.linear.coefficients, &fit.linear.variances, &perm, records);
                let permuted = permute_curves(&fit.proportion_curves, &perm);
                let rp = rase(&permuted, CurveFamily::Proportions, |u| truth.pi(u)).unwrap();
                records.push((name, "rase_pi_x100".into(), rp * 100.0));
            }
            Err(e) => failures.push((name.into(), e.to_string())),
        }
    };

    if wants(Estimator::MrsipSir) {
        match sir_direction(&data.x, &data.y, 10) {
            Ok(a) => run_mrsip("mrsip", Some(a), records, failures, seconds),
            Err(e) => failures.push(("mrsip".into(), format!("SIR initialization failed: {e}"))),
        }
    }
    if wants(Estimator::MrsipTrue) {
        run_mrsip("mrsip_t", Some(truth.index.clone()), records, failures, seconds);
    }
}

/// Run the replication study described by `cfg`. Replications are
/// distributed over a worker pool; per-replication RNG substreams and
/// sequential aggregation keep the output independent of the worker count.
pub fn run_replications(cfg: &ReplicationConfig) -> Result<ReplicationTable> {
    if cfg.replications == 0 {
        return Err(SimixError::EmptyData("need at least one replication"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| SimixError::Estimation {
            stage: "run_replications",
            message: e.to_string(),
        })?;

    let mut values: BTreeMap<(usize, String, String), Vec<f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut fit_seconds: BTreeMap<String, f64> = BTreeMap::new();
    let mut total_jobs = 0usize;
    let mut failed_jobs = 0usize;

    for &n in &cfg.n_values {
        let results: Vec<_> = pool.install(|| {
            (0..cfg.replications)
                .into_par_iter()
                .map(|rep| run_one_replication(cfg, n, rep))
                .collect()
        });
        for (rep, (records, fails, secs)) in results.into_iter().enumerate() {
            total_jobs += 1;
            if !fails.is_empty() {
                failed_jobs += 1;
            }
            for (estimator, message) in fails {
                let rep_seed = cfg
                    .seed
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add((n as u64) << 32)
                    .wrapping_add(rep as u64);
                failures.push(FailureRecord {
                    n,
                    replication: rep,
                    seed: rep_seed,
                    estimator,
                    message,
                });
            }
            for (estimator, quantity, value) in records {
                values
                    .entry((n, estimator.to_string(), quantity))
                    .or_default()
                    .push(value);
            }
            for (name, s) in secs {
                *fit_seconds.entry(name).or_insert(0.0) += s;
            }
        }
    }

    if failed_jobs * 10 > total_jobs {
        return Err(SimixError::Estimation {
            stage: "run_replications",
            message: format!("{failed_jobs}/{total_jobs} replications failed"),
        });
    }

    let cells = values
        .into_iter()
        .map(|((n, estimator, quantity), vals)| {
            let count = vals.len();
            let mean = vals.iter().sum::<f64>() / count as f64;
            let sd = if count > 1 {
                Some(
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count as f64 - 1.0))
                        .sqrt(),
                )
            } else {
                None
            };
            TableCell {
                n,
                estimator,
                quantity,
                mean,
                sd,
                count,
            }
        })
        .collect();

    Ok(ReplicationTable {
        example: cfg.example,
        replications: cfg.replications,
        cells,
        failures,
        fit_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn example1_formulas_at_zero() {
        assert_relative_eq!(example1_pi1(0.0), 0.5);
        let m = example1_means(0.0);
        assert_relative_eq!(m[0], 3.0);
        assert_relative_eq!(m[1], 1.0);
        let s = example1_sds(0.0);
        assert_relative_eq!(s[0], 0.7);
        assert_relative_eq!(s[1], 0.4);
    }

    #[test]
    fn example2_formulas_at_corners() {
        assert_relative_eq!(example2_pi1(0.0), 0.5);
        let b = example2_betas();
        // x = (0,0,0): means are the intercepts
        assert_relative_eq!(b[(0, 0)], 1.0);
        assert_relative_eq!(b[(1, 0)], -1.0);
        // x = (1,1,1): means cross at 4
        let m1: f64 = b.row(0).iter().sum();
        let m2: f64 = b.row(1).iter().sum();
        assert_relative_eq!(m1, 4.0);
        assert_relative_eq!(m2, 4.0);
    }

    #[test]
    fn generators_deterministic() {
        let (d1, t1) = gen_example1(50, 99);
        let (d2, t2) = gen_example1(50, 99);
        assert_eq!(d1.x, d2.x);
        assert_eq!(d1.y, d2.y);
        assert_eq!(t1.labels, t2.labels);
        let (e1, _) = gen_example2(50, 7);
        let (e2, _) = gen_example2(50, 7);
        assert_eq!(e1.y, e2.y);
    }

    #[test]
    fn example1_component_frequency_matches_quadrature() {
        // E[pi_1(Z)] where Z = (U1+U2+U3)/sqrt(3): integrate pi_1(s/sqrt 3)
        // against the Irwin-Hall(3) density by Simpson's rule.
        fn irwin_hall3(s: f64) -> f64 {
            if !(0.0..=3.0).contains(&s) {
                return 0.0;
            }
            let t1 = s * s;
            let t2 = if s > 1.0 { -3.0 * (s - 1.0).powi(2) } else { 0.0 };
            let t3 = if s > 2.0 { 3.0 * (s - 2.0).powi(2) } else { 0.0 };
            0.5 * (t1 + t2 + t3)
        }
        let m = 30_000;
        let step = 3.0 / m as f64;
        let mut integral = 0.0;
        for i in 0..=m {
            let s = step * i as f64;
            let f = example1_pi1(s / 3f64.sqrt()) * irwin_hall3(s);
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            integral += w * f;
        }
        integral *= step / 3.0;

        let n = 100_000;
        let (_, truth) = gen_example1(n, 12345);
        let freq = truth.labels.iter().filter(|&&c| c == 0).count() as f64 / n as f64;
        let se = (integral * (1.0 - integral) / n as f64).sqrt();
        assert!(
            (freq - integral).abs() < 3.0 * se,
            "freq {freq} vs E[pi1(Z)] {integral} (3 se = {})",
            3.0 * se
        );
    }

    #[test]
    fn example2_component1_regression_recovers_truth() {
        // within component 1 the regression of y on x is exactly
        // beta_1 = (1, 0, 3, 0) with residual variance 0.7
        let n = 100_000;
        let (data, truth) = gen_example2(n, 4242);
        let rows: Vec<usize> = (0..n).filter(|&i| truth.labels[i] == 0).collect();
        let sub = data.select(&rows);
        let fit = crate::mixlin::fit_mixlinreg(
            &sub.x,
            &sub.y,
            1,
            &crate::mixlin::MixlinOptions::default(),
        )
        .unwrap();
        let expected = [1.0, 0.0, 3.0, 0.0];
        for c in 0..4 {
            assert!(
                (fit.params.coefficients[(0, c)] - expected[c]).abs() < 0.03,
                "coefficient {c}: {}",
                fit.params.coefficients[(0, c)]
            );
        }
        assert!(
            (fit.params.variances[0] - 0.7).abs() < 0.02,
            "residual variance {}",
            fit.params.variances[0]
        );
    }

    #[test]
    fn rase_zero_on_perfect_fit() {
        let grid = build_grid(&[0.0, 1.0], 5).unwrap();
        let pi = DMatrix::from_fn(5, 2, |t, j| {
            let u = grid.points()[t];
            if j == 0 {
                example1_pi1(u)
            } else {
                1.0 - example1_pi1(u)
            }
        });
        let curves = CurveSet {
            grid,
            proportions: pi,
            means: DMatrix::zeros(0, 2),
            variances: DMatrix::zeros(0, 2),
        };
        let r = rase(&curves, CurveFamily::Proportions, |u| {
            vec![example1_pi1(u), 1.0 - example1_pi1(u)]
        })
        .unwrap();
        assert_relative_eq!(r, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rase_constant_offset_is_delta() {
        let grid = build_grid(&[0.0, 1.0], 10).unwrap();
        let delta = 0.37;
        let means = DMatrix::from_fn(10, 2, |_, j| if j == 0 { 1.0 + delta } else { 2.0 });
        let curves = CurveSet {
            grid,
            proportions: DMatrix::from_element(10, 2, 0.5),
            means,
            variances: DMatrix::from_element(10, 2, 1.0),
        };
        let r = rase(&curves, CurveFamily::Means, |_| vec![1.0, 2.0]).unwrap();
        assert_relative_eq!(r, delta, epsilon = 1e-12);
    }

    #[test]
    fn rase_matches_direct_summation_oracle() {
        let grid = crate::smoothing::Grid::from_points(vec![0.0, 0.5, 1.0]).unwrap();
        let means = DMatrix::from_row_slice(3, 2, &[0.3, 1.1, -0.4, 2.0, 0.9, 1.7]);
        let curves = CurveSet {
            grid: grid.clone(),
            proportions: DMatrix::from_element(3, 2, 0.5),
            means: means.clone(),
            variances: DMatrix::from_element(3, 2, 1.0),
        };
        let truth = |u: f64| vec![u, 2.0 - u];
        let mut total = 0.0;
        for (t, &u) in grid.points().iter().enumerate() {
            let tv = truth(u);
            for j in 0..2 {
                total += (means[(t, j)] - tv[j]).powi(2);
            }
        }
        let oracle = (total / 3.0).sqrt();
        let r = rase(&curves, CurveFamily::Means, truth).unwrap();
        assert_relative_eq!(r, oracle, epsilon = 1e-12);
    }

    #[test]
    fn match_swapped_labels() {
        let grid = build_grid(&[0.0, 1.0], 6).unwrap();
        // estimated curves equal the truth with components swapped
        let pi = DMatrix::from_fn(6, 2, |t, j| {
            let u = grid.points()[t];
            let p1 = example1_pi1(u);
            if j == 0 {
                1.0 - p1
            } else {
                p1
            }
        });
        let means = DMatrix::from_fn(6, 2, |t, j| example1_means(grid.points()[t])[1 - j]);
        let vars = DMatrix::from_fn(6, 2, |t, j| {
            let s = example1_sds(grid.points()[t])[1 - j];
            s * s
        });
        let curves = CurveSet {
            grid,
            proportions: pi,
            means,
            variances: vars,
        };
        let perm = match_components_curves(&curves, |u| {
            (
                vec![example1_pi1(u), 1.0 - example1_pi1(u)],
                example1_means(u).to_vec(),
                example1_sds(u).iter().map(|s| s * s).collect(),
            )
        });
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn match_identity() {
        let est = example2_betas();
        let perm = match_components_beta(&est, &example2_betas());
        assert_eq!(perm, vec![0, 1]);
        let swapped = DMatrix::from_fn(2, 4, |j, c| est[(1 - j, c)]);
        assert_eq!(match_components_beta(&swapped, &example2_betas()), vec![1, 0]);
    }

    #[test]
    fn match_k3_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>());
        let est = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>());
        let perm = match_components_beta(&est, &truth);
        // brute force over all 6 permutations
        let mut best = f64::INFINITY;
        let mut best_perm = vec![0, 1, 2];
        for p in permutations(3) {
            let cost: f64 = (0..3)
                .flat_map(|j| (0..2).map(move |c| (j, c)))
                .map(|(j, c)| (est[(p[j], c)] - truth[(j, c)]).powi(2))
                .sum();
            if cost < best {
                best = cost;
                best_perm = p;
            }
        }
        assert_eq!(perm, best_perm);
        // returned permutation is a bijection
        let mut seen = [false; 3];
        for &e in &perm {
            assert!(!seen[e]);
            seen[e] = true;
        }
    }

    #[test]
    fn single_replication_has_no_sd() {
        let cfg = ReplicationConfig {
            example: ExampleId::Example1,
            n_values: vec![200],
            replications: 1,
            estimators: vec![Estimator::Sir],
            seed: 5,
            ..Default::default()
        };
        let table = run_replications(&cfg).unwrap();
        for c in &table.cells {
            assert!(c.sd.is_none());
            assert_eq!(c.count, 1);
        }
        assert!(table.cell(200, "sir", "alpha1_mse_x100").is_some());
    }
}
