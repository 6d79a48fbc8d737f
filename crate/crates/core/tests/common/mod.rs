//! Dense brute-force oracles for the Gibbs conditionals.
//!
//! Every conditional is recovered from the full joint log density alone:
//! Gaussian blocks by identifying the quadratic from point evaluations,
//! inverse-gamma and beta conditionals by solving for the coefficients of
//! their sufficient statistics, and inclusion rows by enumeration.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgpfactor::gibbs::{
    a_row_conditional, gene_rss, mu_conditional, phi_conditional, pi_conditional, rho_conditional, row_stats,
    sigma_conditional, y_obs_conditional, z_row_log_probs, SigmaCache,
};
use dgpfactor::kcf::{build_sigma_points, FactorKernel};
use dgpfactor::{CovMatrix, Dataset, DgpParams, Hyperparams, ModelState, TimeGrid};

pub struct Instance {
    pub data: Dataset,
    pub hyper: Hyperparams,
    pub sigma: CovMatrix,
    pub state: ModelState,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random instance with `n ≤ 2`, `p ≤ 3`, `k ≤ 2`, `q = 2`; the second
/// subject misses the first pooled time.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1 + (seed % 2) as usize;
    let p = 1 + (seed / 2 % 3) as usize;
    let k = 1 + (seed / 6 % 2) as usize;
    let times = vec![0.0, uniform(&mut rng, 0.5, 2.0)];
    let subjects: Vec<Vec<usize>> = (0..n).map(|i| if i == 0 { vec![0, 1] } else { vec![1] }).collect();
    let grid = TimeGrid::new(times.clone(), subjects.clone()).unwrap();
    let x = subjects.iter().map(|s| DMatrix::from_fn(p, s.len(), |_, _| uniform(&mut rng, -2.0, 3.0))).collect();
    let data = Dataset::new(grid, x).unwrap();
    let params = DgpParams {
        factors: (0..k)
            .map(|_| FactorKernel {
                shared_amp: uniform(&mut rng, 0.2, 1.0),
                shared_prec: uniform(&mut rng, 0.3, 2.0),
                own_amp: uniform(&mut rng, 0.2, 1.0),
                own_prec: uniform(&mut rng, 0.3, 2.0),
            })
            .collect(),
        noise_sd: uniform(&mut rng, 0.2, 0.6),
    };
    let sigma = build_sigma_points(&params, &times, true).unwrap();
    let mut c = || uniform(&mut rng, 0.5, 3.0);
    let hyper = Hyperparams {
        c0: c(),
        d0: c(),
        c1: c(),
        d1: c(),
        c2: c(),
        d2: c(),
        c3: c(),
        d3: c(),
        mu_g: (0..p).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
    };
    let state = ModelState {
        y: (0..n).map(|_| DMatrix::from_fn(k, 2, |_, _| uniform(&mut rng, -1.5, 1.5))).collect(),
        mu: DMatrix::from_fn(n, p, |_, _| uniform(&mut rng, -1.0, 1.0)),
        a: DMatrix::from_fn(p, k, |_, _| uniform(&mut rng, -1.5, 1.5)),
        z: DMatrix::from_fn(p, k, |_, _| rng.random::<bool>()),
        pi: (0..k).map(|_| uniform(&mut rng, 0.2, 0.8)).collect(),
        rho2: (0..k).map(|_| uniform(&mut rng, 0.5, 2.0)).collect(),
        sigma2: (0..p).map(|_| uniform(&mut rng, 0.5, 2.0)).collect(),
        phi2: (0..p).map(|_| uniform(&mut rng, 0.5, 2.0)).collect(),
    };
    Instance { data, hyper, sigma, state }
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

fn ln_inv_gamma_kernel(v: f64, shape: f64, rate: f64) -> f64 {
    -(shape + 1.0) * v.ln() - rate / v
}

/// Unnormalised log joint density of data and every unknown.
pub fn log_joint(data: &Dataset, hyper: &Hyperparams, sigma: &DMatrix<f64>, s: &ModelState) -> f64 {
    let (p, k) = (s.a.nrows(), s.a.ncols());
    let q = data.q();
    let sigma_inv = sigma.clone().cholesky().expect("prior covariance is PD").inverse();
    let mut lp = 0.0;
    for (i, x) in data.x.iter().enumerate() {
        for (jj, &t) in data.grid.subjects[i].iter().enumerate() {
            for g in 0..p {
                let mut signal = 0.0;
                for a in 0..k {
                    if s.z[(g, a)] {
                        signal += s.a[(g, a)] * s.y[i][(a, t)];
                    }
                }
                lp += ln_normal(x[(g, jj)], s.mu[(i, g)] + signal, s.phi2[g]);
            }
        }
        let v = DVector::from_fn(k * q, |r, _| s.y[i][(r / q, r % q)]);
        lp -= 0.5 * (v.transpose() * &sigma_inv * &v)[(0, 0)];
    }
    for g in 0..p {
        for a in 0..k {
            lp += ln_normal(s.a[(g, a)], 0.0, s.rho2[a]);
            lp += if s.z[(g, a)] { s.pi[a].ln() } else { (1.0 - s.pi[a]).ln() };
        }
        for i in 0..data.n() {
            lp += ln_normal(s.mu[(i, g)], hyper.mu_g[g], s.sigma2[g]);
        }
        lp += ln_inv_gamma_kernel(s.sigma2[g], hyper.c2, hyper.d2);
        lp += ln_inv_gamma_kernel(s.phi2[g], hyper.c3, hyper.d3);
    }
    for a in 0..k {
        lp += (hyper.c0 - 1.0) * s.pi[a].ln() + (hyper.d0 - 1.0) * (1.0 - s.pi[a]).ln();
        lp += ln_inv_gamma_kernel(s.rho2[a], hyper.c1, hyper.d1);
    }
    lp
}

/// Precision `P` and linear term `h` of `f(v) = -½ vᵀ P v + hᵀ v + c`.
pub fn identify_quadratic(dim: usize, f: impl Fn(&DVector<f64>) -> f64) -> (DMatrix<f64>, DVector<f64>) {
    let e = |a: usize| DVector::from_fn(dim, |r, _| if r == a { 1.0 } else { 0.0 });
    let f0 = f(&DVector::zeros(dim));
    let plus: Vec<f64> = (0..dim).map(|a| f(&e(a))).collect();
    let minus: Vec<f64> = (0..dim).map(|a| f(&(-e(a)))).collect();
    let mut prec = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        prec[(a, a)] = -(plus[a] + minus[a] - 2.0 * f0);
        for b in 0..a {
            let v = -(f(&(e(a) + e(b))) - plus[a] - plus[b] + f0);
            prec[(a, b)] = v;
            prec[(b, a)] = v;
        }
    }
    let h = DVector::from_fn(dim, |a, _| 0.5 * (plus[a] - minus[a]));
    (prec, h)
}

fn solve3(rows: [[f64; 3]; 3], rhs: [f64; 3]) -> Vector3<f64> {
    let m = Matrix3::from_fn(|r, c| rows[r][c]);
    m.lu().solve(&Vector3::from(rhs)).expect("nonsingular design")
}

/// Shape and rate of an inverse-gamma log kernel.
pub fn identify_inv_gamma(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let vs: [f64; 3] = [0.5, 1.0, 2.0];
    let c = solve3(vs.map(|v| [-v.ln(), -1.0 / v, 1.0]), vs.map(&f));
    (c[0] - 1.0, c[1])
}

/// Parameters of a beta log kernel.
pub fn identify_beta(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let ps: [f64; 3] = [0.2, 0.5, 0.7];
    let c = solve3(ps.map(|p| [p.ln(), (1.0 - p).ln(), 1.0]), ps.map(&f));
    (c[0] + 1.0, c[1] + 1.0)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn max_rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// Largest relative error of each conditional against the dense oracle.
pub fn conjugacy_errors(inst: &Instance) -> Vec<(&'static str, f64)> {
    let Instance { data, hyper, sigma, state } = inst;
    let (n, p, k, q) = (data.n(), state.p(), state.k(), data.q());
    let joint = |s: &ModelState| log_joint(data, hyper, &sigma.matrix, s);
    let cache = SigmaCache::new(sigma.clone(), data).unwrap();
    let stats = row_stats(state, data);
    let mut out = Vec::new();

    let mut y_err: f64 = 0.0;
    let mut y_missing_err: f64 = 0.0;
    for i in 0..n {
        let (prec, h) = identify_quadratic(k * q, |v| {
            let mut s = state.clone();
            s.y[i] = DMatrix::from_fn(k, q, |a, j| v[a * q + j]);
            joint(&s)
        });
        let cov = inv(&prec);
        let mean = &cov * h;
        let obs_t = &data.grid.subjects[i];
        let miss_t = data.grid.missing(i);
        let obs: Vec<usize> = (0..k).flat_map(|a| obs_t.iter().map(move |t| a * q + t)).collect();
        let miss: Vec<usize> = (0..k).flat_map(|a| miss_t.iter().map(move |t| a * q + t)).collect();
        let (impl_prec, impl_rhs) = y_obs_conditional(state, data, &cache, i);
        let impl_cov = inv(&impl_prec);
        let impl_mean = &impl_cov * impl_rhs;
        let brute_mean_o = DVector::from_fn(obs.len(), |r, _| mean[obs[r]]);
        y_err = y_err.max(max_rel_vec(&impl_mean, &brute_mean_o));
        y_err = y_err.max(max_rel_mat(&impl_cov, &select(&cov, &obs, &obs)));
        if let Some(cond) = &cache.subjects[i].missing_conditional {
            let c_oo = select(&cov, &obs, &obs);
            let c_mo = select(&cov, &miss, &obs);
            let gain = &c_mo * inv(&c_oo);
            let c_mm = select(&cov, &miss, &miss) - &gain * c_mo.transpose();
            let brute_mean_m = DVector::from_fn(miss.len(), |r, _| mean[miss[r]]);
            let offset = brute_mean_m - &gain * &brute_mean_o;
            y_missing_err = y_missing_err.max(max_rel_mat(&cond.gain, &gain));
            y_missing_err = y_missing_err.max(max_rel_mat(&cond.cov, &c_mm));
            y_missing_err = y_missing_err.max(offset.amax());
        }
    }
    out.push(("Y observed", y_err));
    out.push(("Y unobserved", y_missing_err));

    let mut z_err: f64 = 0.0;
    let mut a_err: f64 = 0.0;
    for g in 0..p {
        let lp: Vec<f64> = (0..1usize << k)
            .map(|cfg| {
                let mut s = state.clone();
                for a in 0..k {
                    s.z[(g, a)] = cfg >> a & 1 == 1;
                }
                joint(&s)
            })
            .collect();
        let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = lp.iter().map(|v| (v - max).exp()).sum();
        let implied = z_row_log_probs(state, g, &stats).unwrap();
        for (b, m) in lp.iter().zip(&implied) {
            z_err = z_err.max(((b - max).exp() / total - m.exp()).abs());
        }

        let (prec, h) = identify_quadratic(k, |v| {
            let mut s = state.clone();
            for a in 0..k {
                s.a[(g, a)] = v[a];
            }
            joint(&s)
        });
        let (impl_prec, impl_rhs) = a_row_conditional(state, g, &stats);
        let cov = inv(&prec);
        let impl_cov = inv(&impl_prec);
        a_err = a_err.max(max_rel_mat(&impl_cov, &cov));
        a_err = a_err.max(max_rel_vec(&(&impl_cov * impl_rhs), &(&cov * h)));
    }
    out.push(("Z rows", z_err));
    out.push(("A rows", a_err));

    let l = state.loadings();
    let mut mu_err: f64 = 0.0;
    for i in 0..n {
        let obs = &data.grid.subjects[i];
        for g in 0..p {
            let (prec, h) = identify_quadratic(1, |v| {
                let mut s = state.clone();
                s.mu[(i, g)] = v[0];
                joint(&s)
            });
            let r: f64 = obs
                .iter()
                .enumerate()
                .map(|(jj, &t)| data.x[i][(g, jj)] - (0..k).map(|a| l[(g, a)] * state.y[i][(a, t)]).sum::<f64>())
                .sum();
            let (m, v) = mu_conditional(hyper.mu_g[g], state.sigma2[g], state.phi2[g], obs.len(), r);
            mu_err = mu_err.max(rel_err(v, 1.0 / prec[(0, 0)])).max(rel_err(m, h[0] / prec[(0, 0)]));
        }
    }
    out.push(("mu", mu_err));

    let mut pi_err: f64 = 0.0;
    let mut rho_err: f64 = 0.0;
    for a in 0..k {
        let (al, be) = identify_beta(|v| {
            let mut s = state.clone();
            s.pi[a] = v;
            joint(&s)
        });
        let (ia, ib) = pi_conditional(state, hyper, a);
        pi_err = pi_err.max(rel_err(ia, al)).max(rel_err(ib, be));
        let (sh, ra) = identify_inv_gamma(|v| {
            let mut s = state.clone();
            s.rho2[a] = v;
            joint(&s)
        });
        let (is, ir) = rho_conditional(state, hyper, a);
        rho_err = rho_err.max(rel_err(is, sh)).max(rel_err(ir, ra));
    }
    out.push(("pi", pi_err));
    out.push(("rho2", rho_err));

    let rss = gene_rss(state, data);
    let mut sigma_err: f64 = 0.0;
    let mut phi_err: f64 = 0.0;
    for (g, &rss_g) in rss.iter().enumerate() {
        let (sh, ra) = identify_inv_gamma(|v| {
            let mut s = state.clone();
            s.sigma2[g] = v;
            joint(&s)
        });
        let (is, ir) = sigma_conditional(state, hyper, g);
        sigma_err = sigma_err.max(rel_err(is, sh)).max(rel_err(ir, ra));
        let (sh, ra) = identify_inv_gamma(|v| {
            let mut s = state.clone();
            s.phi2[g] = v;
            joint(&s)
        });
        let (is, ir) = phi_conditional(hyper, data.total_observations(), rss_g);
        phi_err = phi_err.max(rel_err(is, sh)).max(rel_err(ir, ra));
    }
    out.push(("sigma2", sigma_err));
    out.push(("phi2", phi_err));
    out
}
