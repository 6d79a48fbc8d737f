//! Starting values: truncated SVD of the within-subject centered data.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::kcf::{DgpParams, ProcessModel, TimeGrid};
use crate::mle::{fit_mle, MleOptions, MleReport, SampleBank};
use crate::model::{Dataset, Hyperparams, ModelState};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;
/// Floor for the initial per-gene variances.
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Fraction of loadings switched on in each column of `Z⁰`.
pub const INCLUDED_FRACTION: f64 = 0.1;

/// Subtracts each subject-gene time mean.
pub fn center_within_subject(data: &Dataset) -> Dataset {
    let mut out = data.clone();
    for m in out.x.iter_mut() {
        if m.ncols() == 0 {
            continue;
        }
        let q = m.ncols() as f64;
        for mut row in m.row_iter_mut() {
            let mean = row.sum() / q;
            row.add_scalar_mut(-mean);
        }
    }
    out
}

/// Rank-k factorisation of the centered data.
#[derive(Clone, Debug)]
pub struct FactorInit {
    /// Scores per subject, `k × q` on the pooled grid; unobserved columns are 0.
    pub y: Vec<DMatrix<f64>>,
    /// `p × k` loadings.
    pub l: DMatrix<f64>,
    /// All singular values of the stacked matrix, descending.
    pub singular_values: Vec<f64>,
}

/// Columns of all subjects side by side, `p × Σq_i`.
pub fn stack_columns(data: &Dataset) -> DMatrix<f64> {
    let total = data.total_observations();
    let mut out = DMatrix::zeros(data.p(), total);
    let mut c = 0;
    for m in &data.x {
        out.columns_mut(c, m.ncols()).copy_from(m);
        c += m.ncols();
    }
    out
}

/// Truncated SVD of the stacked centered columns.
///
/// Scores are scaled to unit mean square per factor, so `L⁰Y⁰` is the
/// best rank-k approximation of the centered data.
pub fn init_factors(centered: &Dataset, k: usize) -> Result<FactorInit> {
    centered.validate()?;
    let p = centered.p();
    let total = centered.total_observations();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > p.min(total) {
        return Err(Error::invalid(format!("k = {k} exceeds min(p, observed columns) = {}", p.min(total))));
    }
    let stacked = stack_columns(centered);
    let svd = SVD::new(stacked, true, true);
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let top = s.first().copied().unwrap_or(0.0);
    let rank = s.iter().filter(|&&v| top > 0.0 && v > RANK_TOL * top).count();
    if k > rank {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the numerical rank of the centered data; achievable rank is {rank}"
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let root_n = (total as f64).sqrt();

    let mut basis = DMatrix::zeros(p, k);
    let mut svd_scores: DMatrix<f64> = DMatrix::zeros(k, total);
    for j in 0..k {
        for g in 0..p {
            basis[(g, j)] = u[(g, j)] * s[j] / root_n;
        }
        for c in 0..total {
            svd_scores[(j, c)] = v_t[(j, c)] * root_n;
        }
    }

    // rotate within the rank-k subspace towards sparse loadings; keep the
    // unrotated basis if the clustering degenerates
    let (m, inv) = sparse_directions(&basis)
        .and_then(|m| m.clone().try_inverse().map(|inv| (m, inv)))
        .unwrap_or_else(|| (DMatrix::identity(k, k), DMatrix::identity(k, k)));
    let mut l = basis * inv;
    let mut scores = m * svd_scores;
    for j in 0..k {
        let rms = (scores.row(j).norm_squared() / total as f64).sqrt();
        scores.row_mut(j).unscale_mut(rms);
        l.column_mut(j).scale_mut(rms);
        let pivot = l.column(j).iamax();
        if l[(pivot, j)] < 0.0 {
            l.column_mut(j).neg_mut();
            scores.row_mut(j).neg_mut();
        }
    }
    let signs = positive_orientation(&(&scores * scores.transpose()));
    for (j, &sg) in signs.iter().enumerate() {
        if sg < 0.0 {
            l.column_mut(j).neg_mut();
            scores.row_mut(j).neg_mut();
        }
    }

    let q = centered.q();
    let mut y = Vec::with_capacity(centered.n());
    let mut c = 0;
    for times in &centered.grid.subjects {
        let mut yi = DMatrix::zeros(k, q);
        for &t in times {
            yi.set_column(t, &scores.column(c));
            c += 1;
        }
        y.push(yi);
    }
    Ok(FactorInit { y, l, singular_values: s })
}

const CLUSTER_MAX_ITER: usize = 100;

/// Directions of sparse loading structure inside the column space of `l`.
///
/// When each gene loads on few factors, the rows of `l` fall near k lines
/// through the origin. Rows are clustered by the line they sit closest to in
/// angle, and each line is refit as the leading eigenvector of its rows'
/// scatter, so large loadings dominate and near-zero rows barely count.
/// Returns the `k × k` matrix whose rows are the unit directions, or `None`
/// when two directions coincide.
pub fn sparse_directions(l: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (p, k) = l.shape();
    let norms: Vec<f64> = l.row_iter().map(|r| r.norm()).collect();
    let units: Vec<DVector<f64>> =
        (0..p).map(|g| if norms[g] > 0.0 { l.row(g).transpose() / norms[g] } else { DVector::zeros(k) }).collect();
    let closeness = |c: &DVector<f64>, g: usize| c.dot(&units[g]).powi(2);

    // farthest-point seeding, deterministic
    let first = (0..p).max_by(|&a, &b| norms[a].total_cmp(&norms[b]))?;
    let mut centers = vec![units[first].clone()];
    while centers.len() < k {
        let spread = |g: usize| norms[g].powi(2) * (1.0 - centers.iter().map(|c| closeness(c, g)).fold(0.0, f64::max));
        let next = (0..p).max_by(|&a, &b| spread(a).total_cmp(&spread(b)))?;
        centers.push(units[next].clone());
    }

    let mut assign = vec![usize::MAX; p];
    for _ in 0..CLUSTER_MAX_ITER {
        let next: Vec<usize> = (0..p)
            .map(|g| {
                (0..k).max_by(|&a, &b| closeness(&centers[a], g).total_cmp(&closeness(&centers[b], g))).unwrap_or(0)
            })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (a, center) in centers.iter_mut().enumerate() {
            let mut scatter = DMatrix::zeros(k, k);
            for g in (0..p).filter(|&g| assign[g] == a) {
                let r = l.row(g).transpose();
                scatter += &r * r.transpose();
            }
            if scatter.norm() == 0.0 {
                continue;
            }
            let eig = scatter.symmetric_eigen();
            *center = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        }
    }
    let m = DMatrix::from_fn(k, k, |a, b| centers[a][b]);
    let s = m.singular_values();
    (s.min() > 1e-6 * s.max()).then_some(m)
}

/// Largest k for which [`positive_orientation`] searches all sign patterns.
const MAX_ORIENT_K: usize = 20;

/// Sign flips maximising `Σ_{a<b} s_a s_b c_ab` with `s_0 = +1`.
///
/// Shared-kernel amplitudes are non-negative, so the fitted cross-covariances
/// are too; orienting the starting scores this way puts them in a frame the
/// process model can represent. Beyond [`MAX_ORIENT_K`] a greedy pass is used.
pub fn positive_orientation(c: &DMatrix<f64>) -> Vec<f64> {
    let k = c.nrows();
    let score = |s: &[f64]| {
        let mut t = 0.0;
        for a in 0..k {
            for b in a + 1..k {
                t += s[a] * s[b] * c[(a, b)];
            }
        }
        t
    };
    let mut best = vec![1.0; k];
    if k <= 1 {
        return best;
    }
    if k <= MAX_ORIENT_K {
        let mut best_score = score(&best);
        let mut s = vec![1.0; k];
        for mask in 1u32..(1 << (k - 1)) {
            for (j, v) in s.iter_mut().enumerate().skip(1) {
                *v = if mask >> (j - 1) & 1 == 1 { -1.0 } else { 1.0 };
            }
            let t = score(&s);
            if t > best_score {
                best_score = t;
                best.copy_from_slice(&s);
            }
        }
        return best;
    }
    loop {
        let current = score(&best);
        let mut improved = false;
        for j in 1..k {
            best[j] = -best[j];
            if score(&best) > current {
                improved = true;
                break;
            }
            best[j] = -best[j];
        }
        if !improved {
            return best;
        }
    }
}

/// Per-gene mean square of `x^c - L⁰Y⁰` over observed entries.
pub fn residual_variance(centered: &Dataset, fi: &FactorInit) -> Vec<f64> {
    let p = centered.p();
    let mut ss = vec![0.0; p];
    for (i, m) in centered.x.iter().enumerate() {
        for (c, &t) in centered.grid.subjects[i].iter().enumerate() {
            let fitted = &fi.l * fi.y[i].column(t);
            for g in 0..p {
                ss[g] += (m[(g, c)] - fitted[g]).powi(2);
            }
        }
    }
    let total = centered.total_observations() as f64;
    ss.into_iter().map(|v| v / total).collect()
}

/// Type-7 quantile of `|column|`.
fn abs_quantile(col: impl Iterator<Item = f64>, prob: f64) -> f64 {
    let mut v: Vec<f64> = col.map(f64::abs).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    crate::diagnostics::quantile_sorted(&v, prob)
}

/// Full starting point for the sampler.
#[derive(Clone, Debug)]
pub struct Initial {
    pub factors: FactorInit,
    pub state: ModelState,
}

/// Builds `Y⁰`, `L⁰` and a complete [`ModelState`] from raw data.
pub fn initialize(data: &Dataset, k: usize, hyper: &Hyperparams) -> Result<Initial> {
    hyper.validate(data.p())?;
    let centered = center_within_subject(data);
    let factors = init_factors(&centered, k)?;
    let p = data.p();

    let mut z = DMatrix::from_element(p, k, false);
    let mut rho2 = vec![0.0; k];
    for j in 0..k {
        let cut = abs_quantile(factors.l.column(j).iter().copied(), 1.0 - INCLUDED_FRACTION);
        let mut ss = 0.0;
        let mut count = 0usize;
        for g in 0..p {
            if factors.l[(g, j)].abs() >= cut {
                z[(g, j)] = true;
                ss += factors.l[(g, j)].powi(2);
                count += 1;
            }
        }
        rho2[j] = (ss / count.max(1) as f64).max(VARIANCE_FLOOR);
    }

    let mu = DMatrix::from_fn(data.n(), p, |i, g| {
        let row = data.x[i].row(g);
        row.sum() / row.len() as f64
    });
    let resid: Vec<f64> = residual_variance(&centered, &factors).into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
    let pi0 = hyper.c0 / (hyper.c0 + hyper.d0);

    let state = ModelState {
        y: factors.y.clone(),
        mu,
        a: factors.l.clone(),
        z,
        pi: vec![pi0; k],
        rho2,
        sigma2: resid.clone(),
        phi2: resid,
    };
    state.validate(data)?;
    Ok(Initial { factors, state })
}

/// Fits the process hyperparameters to the single draw `Y⁰`.
pub fn init_theta(y0: &[DMatrix<f64>], grid: &TimeGrid, opts: &MleOptions) -> Result<MleReport> {
    let k = y0.first().map(|y| y.nrows()).ok_or_else(|| Error::invalid("no factor scores"))?;
    let bank = SampleBank::new(k, grid.times.clone(), vec![y0.to_vec()])?;
    fit_mle(&bank, &DgpParams::default_start(k, opts.model), opts)
}

/// Convenience for the common case of default optimiser settings.
pub fn init_theta_default(y0: &[DMatrix<f64>], grid: &TimeGrid, model: ProcessModel, seed: u64) -> Result<MleReport> {
    let opts = MleOptions { model, seed, ..Default::default() };
    init_theta(y0, grid, &opts)
}
