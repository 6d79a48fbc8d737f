//! Box-constrained limited-memory BFGS.
//!
//! Search directions come from the two-loop recursion restricted to the free
//! variables; steps are projected onto the box and accepted by backtracking
//! under an Armijo condition along the projected path. An objective that
//! fails to evaluate (for example a covariance that cannot be factorised) is
//! treated as `+inf`, so the line search backs away from it.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the infinity norm of the projected gradient falls below this.
    pub gtol: f64,
    /// Stop when the relative decrease of the objective falls below this.
    pub ftol: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { max_iter: 300, memory: 10, gtol: 1e-6, ftol: 1e-12, lower: -10.0, upper: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn project(x: &mut [f64], lo: f64, hi: f64) {
    for v in x.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Gradient with components that point out of the box at active bounds zeroed.
fn projected_gradient(x: &[f64], g: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    x.iter().zip(g).map(|(&xi, &gi)| if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) { 0.0 } else { gi }).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimises `f` over the box `[lower, upper]^d`. `f` returns the value and
/// gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (lo, hi) = (opts.lower, opts.upper);
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut pg = projected_gradient(&x, &g, lo, hi);
    let mut converged = inf_norm(&pg) < opts.gtol;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let free: Vec<bool> = pg.iter().map(|v| *v != 0.0).collect();

        // two-loop recursion on the free subspace
        let mut d: Vec<f64> = g.iter().zip(&free).map(|(gi, &fr)| if fr { *gi } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / inf_norm(&pg).max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        for (di, &fr) in d.iter_mut().zip(&free) {
            *di = if fr { -*di } else { 0.0 };
        }
        if dot(&d, &pg) >= 0.0 {
            // not a descent direction; fall back to steepest descent
            history.clear();
            let scale = 1.0 / inf_norm(&pg).max(1.0);
            d = pg.iter().map(|v| -v * scale).collect();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut xn, lo, hi);
            let moved: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            if decrease < 0.0 {
                if let Ok((fnew, gnew)) = f(&xn) {
                    if fnew.is_finite() && fnew <= fx + ARMIJO_C1 * decrease {
                        accepted = Some((xn, fnew, gnew, moved));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew, s)) = accepted else {
            // no progress possible along any direction we can build
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - fnew) / fx.abs().max(fnew.abs()).max(1.0);
        x = xn;
        fx = fnew;
        g = gnew;
        pg = projected_gradient(&x, &g, lo, hi);
        if inf_norm(&pg) < opts.gtol || rel < opts.ftol {
            converged = true;
        }
    }

    Ok(OptimResult { grad_norm: inf_norm(&pg), x, f: fx, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &LbfgsOptions { max_iter: 500, ..Default::default() }).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn respects_bounds() {
        // unconstrained minimum at (-5, 3); box clips the first coordinate
        let quad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok(((x[0] + 5.0).powi(2) + (x[1] - 3.0).powi(2), vec![2.0 * (x[0] + 5.0), 2.0 * (x[1] - 3.0)]))
        };
        let opts = LbfgsOptions { lower: -2.0, upper: 2.0, ..Default::default() };
        let r = minimize(quad, &[0.0, 0.0], &opts).unwrap();
        assert_abs_diff_eq!(r.x[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.x[1], 2.0, epsilon = 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn never_increases_objective() {
        let r = minimize(rosenbrock, &[0.3, -0.4], &LbfgsOptions { max_iter: 3, ..Default::default() }).unwrap();
        assert!(r.f <= rosenbrock(&[0.3, -0.4]).unwrap().0);
    }

    #[test]
    fn failing_region_is_avoided() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] > 1.5 {
                Err(crate::error::Error::invalid("outside domain"))
            } else {
                Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
            }
        };
        let r = minimize(f, &[-3.0], &LbfgsOptions::default()).unwrap();
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-6);
    }
}
