//! Derivative-free Nelder-Mead simplex minimizer used for the index
//! profiling steps. The profiled objectives are piecewise smooth (linear
//! interpolation of curve estimates), so a simplex search is a better fit
//! than gradient methods.

pub(crate) struct NelderMeadOptions {
    pub initial_step: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.05,
            tol: 1e-10,
            max_iter: 2000,
        }
    }
}

/// Minimize `f` starting from `x0`. Returns (argmin, min value).
pub(crate) fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64) {
    let d = x0.len();
    if d == 0 {
        let v = f(x0);
        return (x0.to_vec(), v);
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    simplex.push(x0.to_vec());
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1e-8 {
            opts.initial_step * v[i].abs().max(0.1)
        } else {
            opts.initial_step
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for _ in 0..opts.max_iter {
        // order best..worst
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let best = order[0];
        let worst = order[d];
        let second_worst = order[d - 1];

        if (values[worst] - values[best]).abs()
            < opts.tol * (1.0 + values[best].abs())
        {
            break;
        }

        // centroid of all but worst
        let mut centroid = vec![0.0; d];
        for &i in order.iter().take(d) {
            for c in 0..d {
                centroid[c] += simplex[i][c] / d as f64;
            }
        }

        let reflect: Vec<f64> = (0..d)
            .map(|c| centroid[c] + alpha * (centroid[c] - simplex[worst][c]))
            .collect();
        let fr = f(&reflect);

        if fr < values[best] {
            let expand: Vec<f64> = (0..d)
                .map(|c| centroid[c] + gamma * (reflect[c] - centroid[c]))
                .collect();
            let fe = f(&expand);
            if fe < fr {
                simplex[worst] = expand;
                values[worst] = fe;
            } else {
                simplex[worst] = reflect;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflect;
            values[worst] = fr;
        } else {
            let contract: Vec<f64> = (0..d)
                .map(|c| centroid[c] + rho * (simplex[worst][c] - centroid[c]))
                .collect();
            let fc = f(&contract);
            if fc < values[worst] {
                simplex[worst] = contract;
                values[worst] = fc;
            } else {
                // shrink toward best
                let b = simplex[best].clone();
                for i in 0..=d {
                    if i == best {
                        continue;
                    }
                    for c in 0..d {
                        simplex[i][c] = b[c] + sigma * (simplex[i][c] - b[c]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=d {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let (x, v) = nelder_mead(
            |p| (p[0] - 3.0).powi(2) + 2.0 * (p[1] + 1.0).powi(2),
            &[0.0, 0.0],
            &NelderMeadOptions::default(),
        );
        assert!((x[0] - 3.0).abs() < 1e-4, "{x:?}");
        assert!((x[1] + 1.0).abs() < 1e-4, "{x:?}");
        assert!(v < 1e-7);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let (x, _) = nelder_mead(
            |p| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2),
            &[-1.2, 1.0],
            &NelderMeadOptions {
                max_iter: 5000,
                ..Default::default()
            },
        );
        assert!((x[0] - 1.0).abs() < 1e-3, "{x:?}");
        assert!((x[1] - 1.0).abs() < 1e-3, "{x:?}");
    }
}
