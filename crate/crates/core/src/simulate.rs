//! Synthetic benchmark data.
//!
//! Four preset scenarios cross correlated/uncorrelated factors with small or
//! large factor variability. True factor scores have covariance
//! `Σ_Y = (D C D) ⊗ K`, with `C` the factor cross-correlation, `D` the factor
//! standard deviations and `K` a squared-exponential temporal correlation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcf::TimeGrid;
use crate::linalg::cholesky_jittered;
use crate::mle::unvec_t;
use crate::model::Dataset;
use crate::rng::{stream, Stage};

const SCENARIO_C_JSON: &str = include_str!("../data/scenario_c_correlation.json");
const MAX_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    Correlated,
    Uncorrelated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variability {
    Small,
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub correlation: Correlation,
    pub variability: Variability,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub u1: usize,
    pub u2: usize,
    pub factor_sd: Vec<f64>,
    pub cross_correlation: Vec<Vec<f64>>,
    /// Probability that a gene loads on each factor.
    pub sparsity: Vec<f64>,
    pub loading_mean: f64,
    pub loading_sd: f64,
    pub mu_range: (f64, f64),
    pub sigma_g: f64,
    pub phi_g: f64,
    /// Correlation of a factor with itself one time unit apart.
    pub lag1_correlation: f64,
    pub time_spacing: f64,
    pub seed: u64,
}

#[derive(Deserialize)]
struct MatrixFile {
    matrix: Vec<Vec<f64>>,
}

/// Cross-correlation shipped for the correlated scenarios.
pub fn default_cross_correlation() -> Vec<Vec<f64>> {
    serde_json::from_str::<MatrixFile>(SCENARIO_C_JSON).expect("bundled matrix parses").matrix
}

impl ScenarioSpec {
    /// `CS`, `CL`, `US` or `UL` (case-insensitive).
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let upper = name.to_ascii_uppercase();
        let (correlation, variability) = match upper.as_str() {
            "CS" => (Correlation::Correlated, Variability::Small),
            "CL" => (Correlation::Correlated, Variability::Large),
            "US" => (Correlation::Uncorrelated, Variability::Small),
            "UL" => (Correlation::Uncorrelated, Variability::Large),
            _ => return Err(Error::invalid(format!("unknown scenario '{name}'; expected CS, CL, US or UL"))),
        };
        let k = 4;
        let factor_sd = match variability {
            Variability::Small => vec![0.21, 0.23, 0.21, 0.17],
            Variability::Large => vec![1.0; k],
        };
        let cross_correlation = match correlation {
            Correlation::Correlated => default_cross_correlation(),
            Correlation::Uncorrelated => identity_rows(k),
        };
        Ok(ScenarioSpec {
            name: upper,
            correlation,
            variability,
            n: 17,
            p: 100,
            k,
            u1: 8,
            u2: 2,
            factor_sd,
            cross_correlation,
            sparsity: vec![0.1; k],
            loading_mean: 4.0,
            loading_sd: 1.0,
            mu_range: (4.0, 16.0),
            sigma_g: 0.5,
            phi_g: 0.5,
            lag1_correlation: 0.8,
            time_spacing: 1.0,
            seed,
        })
    }

    pub fn q(&self) -> usize {
        self.u1 + self.u2
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.q()).map(|j| j as f64 * self.time_spacing).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.k == 0 || self.u1 == 0 {
            return Err(Error::invalid("n, p, k and u1 must be positive"));
        }
        if self.factor_sd.len() != self.k || self.sparsity.len() != self.k {
            return Err(Error::dim("factor_sd and sparsity need one entry per factor"));
        }
        if self.cross_correlation.len() != self.k || self.cross_correlation.iter().any(|r| r.len() != self.k) {
            return Err(Error::dim("cross-correlation must be k × k"));
        }
        if self.sparsity.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::invalid("sparsity fractions must lie in (0, 1]"));
        }
        if self.factor_sd.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || !(self.loading_sd.is_finite() && self.loading_sd >= 0.0)
        {
            return Err(Error::invalid("standard deviations must be positive"));
        }
        if !(self.sigma_g >= 0.0 && self.phi_g > 0.0) {
            return Err(Error::invalid("sigma_g must be >= 0 and phi_g > 0"));
        }
        if !(self.lag1_correlation > 0.0 && self.lag1_correlation < 1.0)
            || !(self.time_spacing.is_finite() && self.time_spacing > 0.0)
        {
            return Err(Error::invalid("lag-1 correlation must lie in (0, 1) and spacing must be positive"));
        }
        Ok(())
    }

    /// `Σ_Y = (D C D) ⊗ K`, factor-major over all `u1 + u2` times.
    pub fn sigma_y(&self) -> DMatrix<f64> {
        let times = self.times();
        let q = times.len();
        let b = -4.0 * self.lag1_correlation.ln();
        let temporal = DMatrix::from_fn(q, q, |j, l| (-0.25 * b * (times[j] - times[l]).powi(2)).exp());
        let k = self.k;
        let cov = DMatrix::from_fn(k, k, |a, c| self.factor_sd[a] * self.cross_correlation[a][c] * self.factor_sd[c]);
        cov.kronecker(&temporal)
    }
}

fn identity_rows(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|a| (0..k).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: ScenarioSpec,
    /// `k × (u1 + u2)` per subject.
    pub y: Vec<DMatrix<f64>>,
    pub a: DMatrix<f64>,
    pub z: DMatrix<bool>,
    pub loadings: DMatrix<f64>,
    /// `n × p`.
    pub mu: DMatrix<f64>,
    pub mu_g: Vec<f64>,
    pub sigma_y: DMatrix<f64>,
}

/// Draws `count` factor-score matrices from `N(0, Σ)`.
pub fn sample_factor_scores<R: Rng + ?Sized>(
    sigma: &DMatrix<f64>,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    let d = sigma.nrows();
    if !d.is_multiple_of(k) {
        return Err(Error::dim("covariance size is not a multiple of k"));
    }
    let l = cholesky_jittered(sigma, "simulated factor covariance")?.chol.l();
    Ok((0..count)
        .map(|_| {
            let z = crate::linalg::standard_normal_vec(rng, d);
            unvec_t((&l * z).as_slice(), k, d / k)
        })
        .collect())
}

/// Generates a dataset over all `u1 + u2` times and its ground truth.
pub fn simulate(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stage::Simulate, 0);
    let (n, p, k) = (spec.n, spec.p, spec.k);
    let sigma_y = spec.sigma_y();

    let mut z = DMatrix::from_element(p, k, false);
    let mut attempt = 0;
    loop {
        attempt += 1;
        for a in 0..k {
            let bern = Bernoulli::new(spec.sparsity[a]).expect("validated probability");
            for g in 0..p {
                z[(g, a)] = bern.sample(&mut rng);
            }
        }
        if (0..k).all(|a| z.column(a).iter().any(|v| *v)) {
            break;
        }
        if attempt >= MAX_RETRIES {
            return Err(Error::invalid(format!("no feasible loading pattern after {MAX_RETRIES} draws")));
        }
        log::debug!("simulated loadings left a factor empty; redrawing (attempt {attempt})");
    }
    let coef = Normal::new(spec.loading_mean, spec.loading_sd).expect("validated sd");
    let a = DMatrix::from_fn(p, k, |g, c| if z[(g, c)] { coef.sample(&mut rng) } else { 0.0 });
    let loadings = crate::model::loadings(&a, &z);

    let y = sample_factor_scores(&sigma_y, k, n, &mut rng)?;
    let (lo, hi) = spec.mu_range;
    let mu_g: Vec<f64> = (0..p).map(|g| if p == 1 { lo } else { lo + (hi - lo) * g as f64 / (p - 1) as f64 }).collect();
    let mu = DMatrix::from_fn(n, p, |_, g| mu_g[g] + spec.sigma_g * rng.sample::<f64, _>(StandardNormal));
    let q = spec.q();
    let x: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let mut xi = &loadings * &y[i];
            for g in 0..p {
                for j in 0..q {
                    xi[(g, j)] += mu[(i, g)] + spec.phi_g * rng.sample::<f64, _>(StandardNormal);
                }
            }
            xi
        })
        .collect();
    let grid = TimeGrid::common(spec.times(), n)?;
    let data = Dataset::new(grid, x)?;
    let truth = GroundTruth { spec: spec.clone(), y, a, z, loadings, mu, mu_g, sigma_y };
    Ok((data, truth))
}

/// Held-out expression at the final times of each subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub times: Vec<f64>,
    /// `p × u2` per subject.
    pub x: Vec<DMatrix<f64>>,
}

/// Keeps the first `u1` observed times of each subject for training and
/// returns the last `u2` as held-out data. Every subject must have exactly
/// `u1 + u2` times and share the held-out times.
pub fn split_train_test(data: &Dataset, u1: usize, u2: usize) -> Result<(Dataset, HeldOut)> {
    data.validate()?;
    if u1 == 0 {
        return Err(Error::invalid("training set needs at least one time"));
    }
    if (0..data.n()).any(|i| data.q_i(i) != u1 + u2) {
        return Err(Error::dim(format!("every subject must have exactly {} times", u1 + u2)));
    }
    let test_times: Vec<f64> = data.grid.subjects[0][u1..].iter().map(|&j| data.grid.times[j]).collect();
    for i in 0..data.n() {
        let t: Vec<f64> = data.grid.subjects[i][u1..].iter().map(|&j| data.grid.times[j]).collect();
        if t != test_times {
            return Err(Error::invalid("subjects do not share held-out times"));
        }
    }
    let mut used = vec![false; data.q()];
    for s in &data.grid.subjects {
        for &j in &s[..u1] {
            used[j] = true;
        }
    }
    let remap: Vec<Option<usize>> = {
        let mut next = 0;
        used.iter()
            .map(|u| {
                u.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let times: Vec<f64> = data.grid.times.iter().zip(&used).filter(|(_, u)| **u).map(|(t, _)| *t).collect();
    let subjects: Vec<Vec<usize>> =
        data.grid.subjects.iter().map(|s| s[..u1].iter().map(|&j| remap[j].expect("used")).collect()).collect();
    let train_x = data.x.iter().map(|m| m.columns(0, u1).into_owned()).collect();
    let test_x = data.x.iter().map(|m| m.columns(u1, u2).into_owned()).collect();
    let train = Dataset {
        grid: TimeGrid::new(times, subjects)?,
        x: train_x,
        subject_ids: data.subject_ids.clone(),
        gene_ids: data.gene_ids.clone(),
    };
    train.validate()?;
    Ok((train, HeldOut { times: test_times, x: test_x }))
}
