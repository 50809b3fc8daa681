//! Small dense optimizers used by the calibration routines.
//!
//! Problems here have at most five unknowns, so both solvers work on plain
//! `Vec<f64>` and finite-difference Jacobians.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Stop once the spread of objective values across the simplex is below this.
    pub f_tol: f64,
    /// Stop once the simplex diameter is below this.
    pub x_tol: f64,
    pub max_iter: usize,
    /// Initial simplex edge, per coordinate (absolute).
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            f_tol: 1e-8,
            x_tol: 1e-10,
            max_iter: 2000,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder–Mead simplex minimization with standard coefficients
/// (reflection 1, expansion 2, contraction ½, shrink ½).
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        let h = if v[i].abs() > 1e-8 {
            opts.initial_step * v[i].abs().max(0.25)
        } else {
            opts.initial_step
        };
        v[i] += h;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        // Stable ordering keeps runs reproducible when values tie.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (spread <= opts.f_tol * (1.0 + values[0].abs()) && diameter <= opts.x_tol)
            || diameter <= 1e-15
        {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(2.0);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    values[i] = eval(&shrunk);
                    simplex[i] = shrunk;
                }
            }
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LevenbergMarquardtOptions {
    pub max_iter: usize,
    /// Relative decrease of the squared residual norm below which we stop.
    pub tol: f64,
}

impl Default for LevenbergMarquardtOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-15,
        }
    }
}

/// Levenberg–Marquardt on a residual vector with a central-difference Jacobian.
///
/// Returns the parameters and the final sum of squared residuals. Non-finite
/// residuals are treated as rejected steps.
pub fn levenberg_marquardt<F>(residuals: F, x0: &[f64], opts: &LevenbergMarquardtOptions) -> Minimum
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let sse = |r: &[f64]| -> f64 {
        let s: f64 = r.iter().map(|v| v * v).sum();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    };
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let mut cost = sse(&r);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    if !cost.is_finite() {
        return Minimum {
            x,
            value: cost,
            iterations,
            converged,
        };
    }

    while iterations < opts.max_iter {
        iterations += 1;
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1e-3);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let rp = residuals(&xp);
            let rm = residuals(&xm);
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &rv;
        if jtr.amax() < 1e-300 {
            converged = true;
            break;
        }

        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&(-&jtr)),
                None => match a.svd(true, true).solve(&(-&jtr), 1e-14) {
                    Ok(s) => s,
                    Err(_) => break,
                },
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = residuals(&trial);
            let ct = sse(&rt);
            if ct < cost {
                let rel = (cost - ct) / cost.max(1e-300);
                x = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < opts.tol || cost < 1e-30 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !improved {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Minimum {
        x,
        value: cost,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let opts = NelderMeadOptions {
            f_tol: 1e-14,
            x_tol: 1e-10,
            max_iter: 5000,
            initial_step: 0.5,
        };
        let m = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-5, "{:?}", m);
        assert!((m.x[1] - 1.0).abs() < 1e-5, "{:?}", m);
    }

    #[test]
    fn nelder_mead_never_worse_than_start() {
        let x0 = [0.3, -0.7];
        let m = nelder_mead(rosenbrock, &x0, &NelderMeadOptions::default());
        assert!(m.value <= rosenbrock(&x0));
    }

    #[test]
    fn levenberg_marquardt_solves_exponential_fit() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.0 * (-1.5 * t).exp()).collect();
        let res = |p: &[f64]| -> Vec<f64> {
            ts.iter()
                .zip(&ys)
                .map(|(t, y)| p[0] * (p[1] * t).exp() - y)
                .collect()
        };
        let m = levenberg_marquardt(res, &[1.0, -0.5], &LevenbergMarquardtOptions::default());
        assert!((m.x[0] - 2.0).abs() < 1e-8);
        assert!((m.x[1] + 1.5).abs() < 1e-8);
    }
}
