//! Joint-distribution test: moments from forward simulation of the prior and
//! data must match those of a Gibbs chain that resimulates the data after
//! every sweep.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use dgpfactor::gibbs::{sample_inv_gamma, Sampler};
use dgpfactor::kcf::{build_sigma_points, FactorKernel};
use dgpfactor::mcem::batch_means_var;
use dgpfactor::rng::{stream, ChainRng, Stage};
use dgpfactor::{CovMatrix, Dataset, DgpParams, Hyperparams, ModelState, TimeGrid};

const DRAWS: usize = 200_000;
const BATCHES: usize = 50;
const Z_LIMIT: f64 = 4.5;

fn setup() -> (TimeGrid, Hyperparams, CovMatrix) {
    let grid = TimeGrid::new(vec![0.0, 1.0], vec![vec![0, 1], vec![1]]).unwrap();
    let hyper =
        Hyperparams { c0: 2.0, d0: 2.0, c1: 6.0, d1: 5.0, c2: 6.0, d2: 5.0, c3: 6.0, d3: 5.0, mu_g: vec![0.5, -0.5] };
    let params = DgpParams {
        factors: vec![
            FactorKernel { shared_amp: 0.7, shared_prec: 1.0, own_amp: 0.6, own_prec: 0.8 },
            FactorKernel { shared_amp: 0.5, shared_prec: 1.5, own_amp: 0.8, own_prec: 1.2 },
        ],
        noise_sd: 0.4,
    };
    let sigma = build_sigma_points(&params, &grid.times, true).unwrap();
    (grid, hyper, sigma)
}

fn normal(rng: &mut ChainRng) -> f64 {
    rng.sample(StandardNormal)
}

fn sample_x(grid: &TimeGrid, s: &ModelState, rng: &mut ChainRng) -> Vec<DMatrix<f64>> {
    let l = s.loadings();
    grid.subjects
        .iter()
        .enumerate()
        .map(|(i, obs)| {
            DMatrix::from_fn(l.nrows(), obs.len(), |g, jj| {
                let signal: f64 = (0..l.ncols()).map(|a| l[(g, a)] * s.y[i][(a, obs[jj])]).sum();
                s.mu[(i, g)] + signal + s.phi2[g].sqrt() * normal(rng)
            })
        })
        .collect()
}

fn sample_prior(
    grid: &TimeGrid,
    hyper: &Hyperparams,
    sigma: &CovMatrix,
    rng: &mut ChainRng,
) -> (ModelState, Vec<DMatrix<f64>>) {
    let (n, p, k, q) = (grid.subjects.len(), hyper.mu_g.len(), sigma.k, grid.q());
    let beta = Beta::new(hyper.c0, hyper.d0).unwrap();
    let pi: Vec<f64> = (0..k).map(|_| beta.sample(rng)).collect();
    let rho2: Vec<f64> = (0..k).map(|_| sample_inv_gamma(hyper.c1, hyper.d1, rng)).collect();
    let sigma2: Vec<f64> = (0..p).map(|_| sample_inv_gamma(hyper.c2, hyper.d2, rng)).collect();
    let phi2: Vec<f64> = (0..p).map(|_| sample_inv_gamma(hyper.c3, hyper.d3, rng)).collect();
    let z = DMatrix::from_fn(p, k, |_, a| rng.random::<f64>() < pi[a]);
    let a = DMatrix::from_fn(p, k, |_, a| rho2[a].sqrt() * normal(rng));
    let mu = DMatrix::from_fn(n, p, |_, g| hyper.mu_g[g] + sigma2[g].sqrt() * normal(rng));
    let chol = sigma.matrix.clone().cholesky().unwrap();
    let y = (0..n)
        .map(|_| {
            let v = chol.l() * DVector::from_fn(k * q, |_, _| normal(rng));
            DMatrix::from_fn(k, q, |a, j| v[a * q + j])
        })
        .collect();
    let state = ModelState { y, mu, a, z, pi, rho2, sigma2, phi2 };
    let x = sample_x(grid, &state, rng);
    (state, x)
}

const NAMES: [&str; 13] =
    ["pi", "rho2", "sigma2", "phi2", "mu", "a^2", "z", "L^2", "y obs^2", "y obs cross", "y unobserved^2", "x", "x^2"];

fn stats(s: &ModelState, x: &[DMatrix<f64>]) -> [f64; 13] {
    let l = s.loadings();
    [
        s.pi[0],
        s.rho2[1],
        s.sigma2[0],
        s.phi2[1],
        s.mu[(1, 0)],
        s.a[(0, 1)].powi(2),
        if s.z[(1, 0)] { 1.0 } else { 0.0 },
        l[(0, 0)].powi(2),
        s.y[0][(0, 0)].powi(2),
        s.y[0][(0, 1)] * s.y[0][(1, 0)],
        s.y[1][(1, 0)].powi(2),
        x[0][(1, 0)],
        x[1][(0, 0)].powi(2),
    ]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn forward_and_successive_conditional_moments_agree() {
    let (grid, hyper, sigma) = setup();
    let mut rng = stream(2024, Stage::Simulate, 0);
    let mut forward: Vec<Vec<f64>> = vec![Vec::with_capacity(DRAWS); NAMES.len()];
    for _ in 0..DRAWS {
        let (s, x) = sample_prior(&grid, &hyper, &sigma, &mut rng);
        for (col, v) in forward.iter_mut().zip(stats(&s, &x)) {
            col.push(v);
        }
    }

    let mut rng = stream(2024, Stage::FinalChains, 0);
    let (mut state, mut x) = sample_prior(&grid, &hyper, &sigma, &mut rng);
    let mut chain: Vec<Vec<f64>> = vec![Vec::with_capacity(DRAWS); NAMES.len()];
    for _ in 0..DRAWS {
        let data = Dataset::new(grid.clone(), x).unwrap();
        let mut sampler = Sampler::new(&data, &hyper, sigma.clone(), state).unwrap();
        sampler.sweep(&mut rng).unwrap();
        state = sampler.state;
        x = sample_x(&grid, &state, &mut rng);
        for (col, v) in chain.iter_mut().zip(stats(&state, &x)) {
            col.push(v);
        }
    }

    let mut failures = Vec::new();
    for (name, (f, c)) in NAMES.iter().zip(forward.iter().zip(&chain)) {
        let (mf, mc) = (mean(f), mean(c));
        let vf = f.iter().map(|v| (v - mf).powi(2)).sum::<f64>() / (f.len() - 1) as f64;
        let se = (vf / f.len() as f64 + batch_means_var(c, BATCHES).unwrap() / c.len() as f64).sqrt();
        let z = (mf - mc) / se;
        if z.abs() > Z_LIMIT {
            failures.push(format!("{name}: forward {mf:.4} gibbs {mc:.4} z {z:.2}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
