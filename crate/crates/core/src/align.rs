//! Sign and label-switching alignment of factor draws.
//!
//! A [`SignedPermutation`] maps new column `c` to `sign[c]` times old column
//! `perm[c]`. Applying the same map to loading columns and score rows leaves
//! every product `L Y_i` unchanged. The best map against a reference is a
//! linear assignment: placing old column `j` at position `c` costs
//! `‖L_j‖² + ‖R_c‖² - 2 |L_j · R_c|`, the sign being that of the inner product.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::Draw;

/// Largest k handled by exact assignment unless the greedy fallback is on.
pub const MAX_EXACT_K: usize = 8;
pub const MAX_ROUNDS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn identity(k: usize) -> Self {
        SignedPermutation { perm: (0..k).collect(), signs: vec![1; k] }
    }

    pub fn new(perm: Vec<usize>, signs: Vec<i8>) -> Result<Self> {
        let k = perm.len();
        if signs.len() != k {
            return Err(Error::dim("permutation and sign vector lengths differ"));
        }
        let mut seen = vec![false; k];
        for &p in &perm {
            if p >= k || seen[p] {
                return Err(Error::invalid("not a permutation"));
            }
            seen[p] = true;
        }
        if signs.iter().any(|s| *s != 1 && *s != -1) {
            return Err(Error::invalid("signs must be +1 or -1"));
        }
        Ok(SignedPermutation { perm, signs })
    }

    pub fn k(&self) -> usize {
        self.perm.len()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(c, p)| c == *p) && self.signs.iter().all(|s| *s == 1)
    }

    pub fn inverse(&self) -> Self {
        let k = self.k();
        let mut perm = vec![0; k];
        let mut signs = vec![1; k];
        for c in 0..k {
            perm[self.perm[c]] = c;
            signs[self.perm[c]] = self.signs[c];
        }
        SignedPermutation { perm, signs }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &SignedPermutation) -> Self {
        let perm = self.perm.iter().map(|&p| first.perm[p]).collect();
        let signs = self.perm.iter().zip(&self.signs).map(|(&p, &s)| s * first.signs[p]).collect();
        SignedPermutation { perm, signs }
    }

    pub fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), self.k(), |r, c| f64::from(self.signs[c]) * m[(r, self.perm[c])])
    }

    /// Permutes columns of an indicator matrix (signs do not apply).
    pub fn apply_columns_bool(&self, m: &DMatrix<bool>) -> DMatrix<bool> {
        DMatrix::from_fn(m.nrows(), self.k(), |r, c| m[(r, self.perm[c])])
    }

    pub fn apply_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.k(), m.ncols(), |c, t| f64::from(self.signs[c]) * m[(self.perm[c], t)])
    }

    /// `P C Pᵀ` for a `k × k` matrix indexed by factors on both sides.
    pub fn apply_symmetric(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |c, d| f64::from(self.signs[c] * self.signs[d]) * m[(self.perm[c], self.perm[d])])
    }

    pub fn apply_vec<T: Clone>(&self, v: &[T]) -> Vec<T> {
        self.perm.iter().map(|&p| v[p].clone()).collect()
    }

    pub fn apply_draw(&self, d: &Draw) -> Draw {
        Draw {
            iteration: d.iteration,
            y: d.y.iter().map(|y| self.apply_rows(y)).collect(),
            a: self.apply_columns(&d.a),
            z: self.apply_columns_bool(&d.z),
            predictions: d.predictions.clone(),
        }
    }

    pub fn apply_state(&self, s: &crate::model::ModelState) -> crate::model::ModelState {
        crate::model::ModelState {
            y: s.y.iter().map(|y| self.apply_rows(y)).collect(),
            mu: s.mu.clone(),
            a: self.apply_columns(&s.a),
            z: self.apply_columns_bool(&s.z),
            pi: self.apply_vec(&s.pi),
            rho2: self.apply_vec(&s.rho2),
            sigma2: s.sigma2.clone(),
            phi2: s.phi2.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignOptions {
    /// Allow k above [`MAX_EXACT_K`] by switching to greedy matching.
    pub greedy_fallback: bool,
}

/// Minimum-cost perfect matching of rows to columns (Hungarian method with
/// potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based arrays as in the classic potential formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn greedy(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    pairs.sort_by(|a, b| cost[*a].total_cmp(&cost[*b]));
    let mut assign = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    for (r, c) in pairs {
        if assign[r] == usize::MAX && !col_used[c] {
            assign[r] = c;
            col_used[c] = true;
        }
    }
    assign
}

/// Signed permutation that best maps `l` onto `reference` in squared
/// Frobenius distance.
pub fn best_transform(l: &DMatrix<f64>, reference: &DMatrix<f64>, opts: AlignOptions) -> Result<SignedPermutation> {
    if l.shape() != reference.shape() {
        return Err(Error::dim("loading matrix and reference differ in shape"));
    }
    let k = l.ncols();
    if k > MAX_EXACT_K && !opts.greedy_fallback {
        return Err(Error::invalid(format!(
            "exact alignment supports k <= {MAX_EXACT_K}; enable the greedy fallback for k = {k}"
        )));
    }
    let ln: Vec<f64> = (0..k).map(|j| l.column(j).norm_squared()).collect();
    let rn: Vec<f64> = (0..k).map(|c| reference.column(c).norm_squared()).collect();
    let inner = reference.transpose() * l; // inner[(c, j)] = R_c · L_j
    let cost = DMatrix::from_fn(k, k, |c, j| ln[j] + rn[c] - 2.0 * inner[(c, j)].abs());
    let assign = if k > MAX_EXACT_K { greedy(&cost) } else { hungarian(&cost) };
    let signs = (0..k).map(|c| if inner[(c, assign[c])] < 0.0 { -1 } else { 1 }).collect();
    Ok(SignedPermutation { perm: assign, signs })
}

/// Aligns one draw against a reference loading matrix.
pub fn align_draw(draw: &Draw, reference: &DMatrix<f64>, opts: AlignOptions) -> Result<(Draw, SignedPermutation)> {
    let t = best_transform(&draw.loadings(), reference, opts)?;
    Ok((t.apply_draw(draw), t))
}

#[derive(Clone, Debug)]
pub struct WithinChainAlignment {
    pub transforms: Vec<SignedPermutation>,
    pub rounds: usize,
    pub converged: bool,
    /// `Σ_r ‖T_r(L_r) - L̄‖²` after each round.
    pub objective: Vec<f64>,
}

fn mean_aligned(loadings: &[DMatrix<f64>], transforms: &[SignedPermutation]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(loadings[0].nrows(), loadings[0].ncols());
    for (l, t) in loadings.iter().zip(transforms) {
        m += t.apply_columns(l);
    }
    m / loadings.len() as f64
}

/// Fixed-point alignment of one chain's loadings. The reference starts at
/// `loadings[start]` and is then the mean of the aligned draws.
pub fn align_within(loadings: &[DMatrix<f64>], start: usize, opts: AlignOptions) -> Result<WithinChainAlignment> {
    if loadings.is_empty() {
        return Err(Error::invalid("cannot align an empty bank"));
    }
    let k = loadings[0].ncols();
    let mut reference = loadings[start].clone();
    let mut transforms = vec![SignedPermutation::identity(k); loadings.len()];
    let mut objective = Vec::new();
    for round in 1..=MAX_ROUNDS {
        let next: Vec<SignedPermutation> =
            loadings.iter().map(|l| best_transform(l, &reference, opts)).collect::<Result<_>>()?;
        let changed = next.iter().zip(&transforms).filter(|(a, b)| a != b).count();
        transforms = next;
        reference = mean_aligned(loadings, &transforms);
        objective.push(
            loadings.iter().zip(&transforms).map(|(l, t)| (t.apply_columns(l) - &reference).norm_squared()).sum(),
        );
        if changed == 0 && round > 1 {
            return Ok(WithinChainAlignment { transforms, rounds: round, converged: true, objective });
        }
        if round == MAX_ROUNDS {
            log::warn!(
                "within-chain alignment did not settle after {MAX_ROUNDS} rounds; {changed} draws still switching"
            );
        }
    }
    Ok(WithinChainAlignment { transforms, rounds: MAX_ROUNDS, converged: false, objective })
}

/// Within-chain alignment of draws in place; returns the per-draw maps.
pub fn align_chain(draws: &mut [Draw], start: usize, opts: AlignOptions) -> Result<WithinChainAlignment> {
    let loadings: Vec<DMatrix<f64>> = draws.iter().map(Draw::loadings).collect();
    let res = align_within(&loadings, start, opts)?;
    for (d, t) in draws.iter_mut().zip(&res.transforms) {
        if !t.is_identity() {
            *d = t.apply_draw(d);
        }
    }
    Ok(res)
}

/// Maps aligning each chain's mean loadings to the first chain's.
pub fn align_across(chain_means: &[DMatrix<f64>], opts: AlignOptions) -> Result<Vec<SignedPermutation>> {
    if chain_means.is_empty() {
        return Err(Error::invalid("no chains to align"));
    }
    chain_means.iter().map(|m| best_transform(m, &chain_means[0], opts)).collect()
}

pub fn mean_loadings(draws: &[Draw]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(draws[0].a.nrows(), draws[0].a.ncols());
    for d in draws {
        m += d.loadings();
    }
    m / draws.len() as f64
}

/// Within-chain then across-chain alignment of several chains in place.
pub fn align_chains(chains: &mut [Vec<Draw>], opts: AlignOptions) -> Result<Vec<SignedPermutation>> {
    for c in chains.iter_mut() {
        let last = c.len().saturating_sub(1);
        align_chain(c, last, opts)?;
    }
    let means: Vec<DMatrix<f64>> = chains.iter().map(|c| mean_loadings(c)).collect();
    let across = align_across(&means, opts)?;
    for (c, t) in chains.iter_mut().zip(&across) {
        if !t.is_identity() {
            for d in c.iter_mut() {
                *d = t.apply_draw(d);
            }
        }
    }
    Ok(across)
}
