//! Derivative-free minimizers: a box-projected Nelder–Mead simplex and a
//! golden-section line search.

use alloc::vec;
use alloc::vec::Vec;

use crate::num;

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    /// Stop once the spread of simplex values is below this.
    pub f_tol: f64,
    /// ...and the simplex fits inside a cube of this half-width.
    pub x_tol: f64,
    pub max_iterations: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            f_tol: 1e-8,
            x_tol: 1e-7,
            max_iterations: 2000,
            initial_step: 0.1,
        }
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// Trial points are clamped onto the box. Coefficients follow the
/// dimension-adaptive scheme of Gao and Han, which keeps the simplex from
/// collapsing prematurely when the dimension exceeds a handful. On
/// convergence the simplex is rebuilt once around the best vertex; the run
/// only counts as converged if the rebuilt simplex does not improve on it.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n);
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut start = x0.to_vec();
    project(&mut start, lower, upper);
    if n == 0 {
        let value = eval(&start);
        return Minimum {
            x: start,
            value,
            iterations: 0,
            evaluations: 1,
            converged: true,
        };
    }

    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = if n > 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut iterations = 0usize;
    let mut best_x = start.clone();
    let mut best_f = eval(&best_x);
    let mut rebuilt = false;
    let mut converged = false;

    'outer: loop {
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut values: Vec<f64> = Vec::with_capacity(n + 1);
        simplex.push(best_x.clone());
        values.push(best_f);
        for i in 0..n {
            let mut v = best_x.clone();
            let step = opts.initial_step * (upper[i] - lower[i]).max(1e-12);
            v[i] = if v[i] + step <= upper[i] { v[i] + step } else { v[i] - step };
            project(&mut v, lower, upper);
            let fv = eval(&v);
            simplex.push(v);
            values.push(fv);
        }

        loop {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let f_spread = values[n] - values[0];
            let x_spread = simplex[1..]
                .iter()
                .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| num::abs(a - b)))
                .fold(0.0, f64::max);
            if (f_spread <= opts.f_tol * (1.0 + num::abs(values[0])) && x_spread <= opts.x_tol)
                || x_spread <= 1e-14
            {
                break;
            }
            if iterations >= opts.max_iterations {
                best_x = simplex[0].clone();
                best_f = values[0];
                break 'outer;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / nf;
                }
            }
            let along = |t: f64| {
                let mut p: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect();
                project(&mut p, lower, upper);
                p
            };

            let xr = along(alpha);
            let fr = eval(&xr);
            if fr < values[0] {
                let xe = along(alpha * gamma);
                let fe = eval(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
                continue;
            }
            let (xc, fc) = if fr < values[n] {
                let xc = along(alpha * rho);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
            for i in 1..=n {
                let shrunk: Vec<f64> = simplex[0]
                    .iter()
                    .zip(&simplex[i])
                    .map(|(b, x)| b + sigma * (x - b))
                    .collect();
                values[i] = eval(&shrunk);
                simplex[i] = shrunk;
            }
        }

        let improved = values[0] < best_f - opts.f_tol * (1.0 + num::abs(best_f));
        if values[0] <= best_f {
            best_x = simplex[0].clone();
            best_f = values[0];
        }
        if rebuilt && !improved {
            converged = true;
            break;
        }
        rebuilt = true;
    }

    Minimum {
        x: best_x,
        value: best_f,
        iterations,
        evaluations,
        converged,
    }
}

/// Golden-section search for a minimum of a unimodal `f` on `[a, b]`.
pub fn golden_section<F>(mut f: F, mut a: f64, mut b: f64, x_tol: f64, max_iterations: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (num::sqrt(5.0) - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iterations {
        if num::abs(b - a) <= x_tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_interior_minimum() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + 2.0 * (x[1] - 0.6).powi(2) + 0.1 * x[0] * x[1];
        let m = nelder_mead(f, &[0.9, 0.1], &[0.0; 2], &[1.0; 2], &SimplexOptions::default());
        assert!(m.converged);
        // Stationary point of the quadratic, solved by hand.
        let det = 2.0 * 4.0 - 0.01;
        let x = (0.6 * 4.0 - 0.1 * 2.4) / det;
        let y = (2.0 * 2.4 - 0.1 * 0.6) / det;
        assert!((m.x[0] - x).abs() < 1e-3 && (m.x[1] - y).abs() < 1e-3);
    }

    #[test]
    fn minimum_on_boundary() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 2.0).powi(2)).sum::<f64>();
        let m = nelder_mead(f, &[0.5; 5], &[0.0; 5], &[1.0; 5], &SimplexOptions::default());
        for v in &m.x {
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rosenbrock_in_box() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = SimplexOptions {
            f_tol: 1e-14,
            x_tol: 1e-9,
            max_iterations: 5000,
            ..Default::default()
        };
        let m = nelder_mead(f, &[-1.2, 1.0], &[-2.0; 2], &[2.0; 2], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn golden_finds_parabola_vertex() {
        let (x, fx) = golden_section(|t| (t - 1.234).powi(2) + 5.0, -10.0, 10.0, 1e-10, 500);
        assert!((x - 1.234).abs() < 1e-6);
        assert!((fx - 5.0).abs() < 1e-14);
    }
}
