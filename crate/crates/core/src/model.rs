//! Observed data, prior constants and the Gibbs state.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcf::TimeGrid;

/// Expression matrices for `n` subjects over a pooled time grid.
///
/// `x[i]` is `p × q_i`; its columns line up with `grid.subjects[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub x: Vec<DMatrix<f64>>,
    #[serde(default)]
    pub subject_ids: Vec<String>,
    #[serde(default)]
    pub gene_ids: Vec<String>,
}

impl Dataset {
    pub fn new(grid: TimeGrid, x: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = x.len();
        let p = x.first().map(|m| m.nrows()).unwrap_or(0);
        let d = Dataset {
            grid,
            x,
            subject_ids: (0..n).map(|i| format!("subject{}", i + 1)).collect(),
            gene_ids: (0..p).map(|g| format!("gene{}", g + 1)).collect(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.x.first().map(|m| m.nrows()).unwrap_or(0)
    }

    pub fn q(&self) -> usize {
        self.grid.q()
    }

    pub fn q_i(&self, i: usize) -> usize {
        self.grid.subjects[i].len()
    }

    pub fn total_observations(&self) -> usize {
        self.grid.subjects.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.x.is_empty() {
            return Err(Error::invalid("dataset has no subjects"));
        }
        if self.x.len() != self.grid.subjects.len() {
            return Err(Error::dim(format!(
                "{} expression matrices but {} subject time sets",
                self.x.len(),
                self.grid.subjects.len()
            )));
        }
        let p = self.p();
        if p == 0 {
            return Err(Error::invalid("dataset has no genes"));
        }
        for (i, m) in self.x.iter().enumerate() {
            if m.nrows() != p {
                return Err(Error::dim(format!("subject {i} has {} genes, expected {p}", m.nrows())));
            }
            if m.ncols() != self.q_i(i) {
                return Err(Error::dim(format!(
                    "subject {i} has {} columns but {} observed times",
                    m.ncols(),
                    self.q_i(i)
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("subject {i} has non-finite expression values")));
            }
        }
        let mut seen = vec![false; self.q()];
        for s in &self.grid.subjects {
            for &j in s {
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("pooled time {} is not observed by any subject", self.grid.times[j])));
        }
        if !self.subject_ids.is_empty() && self.subject_ids.len() != self.n() {
            return Err(Error::dim("subject id count does not match subjects"));
        }
        if !self.gene_ids.is_empty() && self.gene_ids.len() != p {
            return Err(Error::dim("gene id count does not match genes"));
        }
        Ok(())
    }

    /// Mean of each gene over all subjects and observed times.
    pub fn gene_grand_means(&self) -> Vec<f64> {
        let total = self.total_observations() as f64;
        (0..self.p()).map(|g| self.x.iter().map(|m| m.row(g).sum()).sum::<f64>() / total).collect()
    }
}

/// Prior constants. `mu_g` is held fixed at each gene's grand mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub c0: f64,
    pub d0: f64,
    pub c1: f64,
    pub d1: f64,
    pub c2: f64,
    pub d2: f64,
    pub c3: f64,
    pub d3: f64,
    pub mu_g: Vec<f64>,
}

impl Hyperparams {
    /// Defaults: Beta(0.1 p, 0.9 p) on inclusion and IG(0.01, 0.01) on every
    /// variance.
    pub fn default_for(data: &Dataset) -> Self {
        let p = data.p() as f64;
        Hyperparams {
            c0: 0.1 * p,
            d0: 0.9 * p,
            c1: 1e-2,
            d1: 1e-2,
            c2: 1e-2,
            d2: 1e-2,
            c3: 1e-2,
            d3: 1e-2,
            mu_g: data.gene_grand_means(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let consts = [self.c0, self.d0, self.c1, self.d1, self.c2, self.d2, self.c3, self.d3];
        if consts.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::invalid("prior constants must be positive and finite"));
        }
        if self.mu_g.len() != p {
            return Err(Error::dim(format!("mu_g has length {}, expected {p}", self.mu_g.len())));
        }
        if self.mu_g.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mu_g must be finite"));
        }
        Ok(())
    }
}

/// One state of the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Factor scores per subject, `k × q` over the pooled grid.
    pub y: Vec<DMatrix<f64>>,
    /// Subject-gene means, `n × p`.
    pub mu: DMatrix<f64>,
    /// Coefficients, `p × k`.
    pub a: DMatrix<f64>,
    /// Inclusion indicators, `p × k`.
    pub z: DMatrix<bool>,
    pub pi: Vec<f64>,
    pub rho2: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub phi2: Vec<f64>,
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    /// `L = A ∘ Z`.
    pub fn loadings(&self) -> DMatrix<f64> {
        loadings(&self.a, &self.z)
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let (n, p, q) = (data.n(), data.p(), data.q());
        let k = self.k();
        if k == 0 {
            return Err(Error::invalid("state has no factors"));
        }
        if self.a.nrows() != p || self.z.shape() != self.a.shape() {
            return Err(Error::dim("A and Z must both be p × k"));
        }
        if self.y.len() != n || self.y.iter().any(|y| y.shape() != (k, q)) {
            return Err(Error::dim("each Y_i must be k × q"));
        }
        if self.mu.shape() != (n, p) {
            return Err(Error::dim("mu must be n × p"));
        }
        if self.pi.len() != k || self.rho2.len() != k || self.sigma2.len() != p || self.phi2.len() != p {
            return Err(Error::dim("variance/probability vectors have wrong lengths"));
        }
        if self.pi.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::invalid("pi must lie in (0, 1)"));
        }
        let pos = |v: &f64| v.is_finite() && *v > 0.0;
        if !(self.rho2.iter().all(pos) && self.sigma2.iter().all(pos) && self.phi2.iter().all(pos)) {
            return Err(Error::invalid("variances must be positive"));
        }
        Ok(())
    }
}

pub fn loadings(a: &DMatrix<f64>, z: &DMatrix<bool>) -> DMatrix<f64> {
    a.zip_map(z, |v, inc| if inc { v } else { 0.0 })
}
