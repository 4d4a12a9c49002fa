//! Randomized invariant checks for the numerical building blocks.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use simix::mrsip::{estep_mrsip, floor_proportions};
use simix::selection::smoothing_policy;
use simix::smoothing::weighted_local_average;
use simix::{build_grid, normalize_index, trimmed_span, Kernel, LinearMixtureParams};

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #[test]
    fn kernel_densities_are_nonnegative_and_symmetric(u in -20.0f64..20.0) {
        for kernel in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let d = kernel.density(u);
            prop_assert!(d >= 0.0);
            prop_assert!((d - kernel.density(-u)).abs() <= 1e-15);
        }
    }

    #[test]
    fn kernel_weight_scales_with_bandwidth(u in -5.0f64..5.0, h in 0.01f64..3.0) {
        for kernel in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let w = kernel.weight(u, h).unwrap();
            prop_assert!((w - kernel.density(u / h) / h).abs() <= 1e-12);
        }
    }

    #[test]
    fn built_grid_spans_inputs(values in finite_vec(2..60), n_points in 2usize..40) {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi > lo);
        let grid = build_grid(&values, n_points).unwrap();
        let pts = grid.points();
        prop_assert_eq!(pts.len(), n_points);
        prop_assert!((pts[0] - lo).abs() <= 1e-12);
        prop_assert!((pts[n_points - 1] - hi).abs() <= 1e-12);
        prop_assert!(pts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn trimmed_span_is_nested_in_full_span(values in finite_vec(10..80), trim in 0.0f64..0.3) {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi > lo);
        match trimmed_span(&values, trim) {
            Ok([a, b]) => {
                prop_assert!(lo <= a && a < b && b <= hi);
                prop_assert!(values.iter().any(|&v| v == a));
                prop_assert!(values.iter().any(|&v| v == b));
            }
            // heavy trimming of nearly-tied samples can collapse the span
            Err(_) => prop_assert!(trim > 0.0),
        }
        let [a0, b0] = trimmed_span(&values, 0.0).unwrap();
        prop_assert_eq!(a0, lo);
        prop_assert_eq!(b0, hi);
    }

    #[test]
    fn interpolation_stays_in_value_range(
        values in finite_vec(2..30),
        query in -100.0f64..100.0,
    ) {
        let n = values.len();
        let grid = build_grid(&(0..n).map(|i| i as f64).collect::<Vec<_>>(), n.max(2)).unwrap();
        let vals: Vec<f64> = (0..grid.len()).map(|i| values[i % n]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let y = grid.interpolate(&vals, query).unwrap();
        prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        // clamping outside the span
        let first = grid.points()[0];
        let last = *grid.points().last().unwrap();
        prop_assert_eq!(grid.interpolate(&vals, first - 10.0).unwrap(), vals[0]);
        prop_assert_eq!(grid.interpolate(&vals, last + 10.0).unwrap(), *vals.last().unwrap());
    }

    #[test]
    fn normalized_index_is_canonical(raw in prop::collection::vec(-5.0f64..5.0, 2..6)) {
        prop_assume!(raw.iter().any(|v| v.abs() > 1e-6));
        let v = DVector::from_vec(raw.clone());
        let a = normalize_index(&v).unwrap();
        let c = a.coefficients();
        prop_assert!((c.norm() - 1.0).abs() <= 1e-12);
        let first = c.iter().find(|x| x.abs() > 1e-12).copied().unwrap();
        prop_assert!(first > 0.0);
        // scale and sign invariance
        for s in [3.0f64, -0.5] {
            let b = normalize_index(&(&v * s)).unwrap();
            prop_assert!((b.coefficients() - c).norm() <= 1e-10);
        }
    }

    #[test]
    fn floored_proportions_form_a_probability_vector(
        raw in prop::collection::vec(0.0f64..1.0, 2..5),
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
        floor_proportions(&mut row);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn smoothing_policy_brackets_the_selected_bandwidth(
        h in 0.01f64..1.0,
        n in 50usize..5000,
    ) {
        let (low, mid, high) = smoothing_policy(h, n);
        prop_assert!(low < mid && mid < high);
        prop_assert_eq!(mid, h);
        prop_assert!((high - 1.5 * h).abs() <= 1e-12);
        prop_assert!((low - h * (n as f64).powf(-2.0 / 15.0)).abs() <= 1e-12);
    }

    #[test]
    fn local_average_reproduces_constants_and_stays_in_range(
        values in finite_vec(5..40),
        z in -2.0f64..3.0,
        h in 0.05f64..2.0,
        c in -10.0f64..10.0,
    ) {
        let n = values.len();
        let centers: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let weights = vec![1.0; n];
        for kernel in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let constant = vec![c; n];
            if let Ok(avg) = weighted_local_average(&centers, &constant, &weights, z, h, kernel) {
                prop_assert!((avg - c).abs() <= 1e-9);
            }
            if let Ok(avg) = weighted_local_average(&centers, &values, &weights, z, h, kernel) {
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg >= lo - 1e-9 && avg <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn posterior_rows_are_probability_vectors(
        seed_vals in prop::collection::vec(-3.0f64..3.0, 30),
        s1 in 0.1f64..2.0,
        s2 in 0.1f64..2.0,
        p in 0.05f64..0.95,
    ) {
        let n = seed_vals.len();
        let design = DMatrix::from_fn(n, 2, |i, c| {
            if c == 0 { 1.0 } else { seed_vals[i] }
        });
        let y = DVector::from_fn(n, |i, _| seed_vals[(i + 7) % n]);
        let linear = LinearMixtureParams {
            coefficients: DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.5, -1.0]),
            variances: DVector::from_vec(vec![s1, s2]),
            proportions: DVector::from_vec(vec![p, 1.0 - p]),
            intercept: true,
        };
        let pi_obs = DMatrix::from_fn(n, 2, |_, j| if j == 0 { p } else { 1.0 - p });
        let post = estep_mrsip(&pi_obs, &design, &y, &linear).unwrap();
        for i in 0..n {
            let row = post.matrix().row(i);
            prop_assert!((row.sum() - 1.0).abs() <= 1e-10);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
