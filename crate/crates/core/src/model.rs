//! Model parameters, the family covariance matrix and heritability.
//!
//! Shared-environment loadings are stored in the reparameterised form
//! `sigma_bk = gamma_k * sigma_b`, with the sign fixed so that
//! `sigma_b1 >= 0`. `gamma` and `sigma_b` are derived from the loadings.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pedigree::{FamilyRecord, KinshipMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenotypeKind {
    Continuous,
    Binary,
}

impl FromStr for PhenotypeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" | "c" => Ok(PhenotypeKind::Continuous),
            "binary" | "b" => Ok(PhenotypeKind::Binary),
            other => Err(Error::Schema(format!("unknown phenotype kind `{other}`"))),
        }
    }
}

impl fmt::Display for PhenotypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhenotypeKind::Continuous => "continuous",
            PhenotypeKind::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kinds: Vec<PhenotypeKind>,
    /// Number of covariates per phenotype, excluding the intercept.
    pub covariate_dim: Vec<usize>,
}

impl ModelSpec {
    pub fn new(kinds: Vec<PhenotypeKind>, covariate_dim: Vec<usize>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Domain("at least one phenotype required".into()));
        }
        if kinds.len() != covariate_dim.len() {
            return Err(Error::Dimension(format!(
                "{} phenotype kinds but {} covariate dimensions",
                kinds.len(),
                covariate_dim.len()
            )));
        }
        Ok(ModelSpec { kinds, covariate_dim })
    }

    pub fn k(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_binary(&self, k: usize) -> bool {
        self.kinds[k] == PhenotypeKind::Binary
    }

    /// Length of the stacked coefficient vector `(alpha_1, beta_1, ...)`.
    pub fn n_coefficients(&self) -> usize {
        self.covariate_dim.iter().map(|d| d + 1).sum()
    }

    /// Offset of phenotype `k`'s intercept in the stacked coefficients.
    pub fn coefficient_offset(&self, k: usize) -> usize {
        self.covariate_dim[..k].iter().map(|d| d + 1).sum()
    }

    /// Restriction to a subset of phenotypes.
    pub fn select(&self, phenotypes: &[usize]) -> ModelSpec {
        ModelSpec {
            kinds: phenotypes.iter().map(|&k| self.kinds[k]).collect(),
            covariate_dim: phenotypes.iter().map(|&k| self.covariate_dim[k]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeEffects {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl PhenotypeEffects {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.slopes.iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub phenotypes: Vec<PhenotypeEffects>,
}

impl FixedEffects {
    pub fn zeros(spec: &ModelSpec) -> Self {
        FixedEffects {
            phenotypes: spec
                .covariate_dim
                .iter()
                .map(|&d| PhenotypeEffects {
                    intercept: 0.0,
                    slopes: vec![0.0; d],
                })
                .collect(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .phenotypes
            .iter()
            .flat_map(|p| std::iter::once(p.intercept).chain(p.slopes.iter().copied()))
            .collect();
        DVector::from_vec(v)
    }

    pub fn from_vector(spec: &ModelSpec, v: &DVector<f64>) -> Result<Self> {
        if v.len() != spec.n_coefficients() {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, expected {}",
                v.len(),
                spec.n_coefficients()
            )));
        }
        let mut off = 0;
        let phenotypes = spec
            .covariate_dim
            .iter()
            .map(|&d| {
                let p = PhenotypeEffects {
                    intercept: v[off],
                    slopes: v.rows(off + 1, d).iter().copied().collect(),
                };
                off += d + 1;
                p
            })
            .collect();
        Ok(FixedEffects { phenotypes })
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.phenotypes.len() != spec.k()
            || self
                .phenotypes
                .iter()
                .zip(&spec.covariate_dim)
                .any(|(p, &d)| p.slopes.len() != d)
        {
            return Err(Error::Dimension("fixed effects do not match model spec".into()));
        }
        Ok(())
    }
}

/// Covariance parameters of the family model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Shared-environment loadings `gamma_k * sigma_b`, with `[0] >= 0`.
    pub sigma_shared: Vec<f64>,
    /// Additive genetic standard deviations.
    pub sigma_g: Vec<f64>,
    pub sigma_eps: Vec<f64>,
    /// Genetic correlations, symmetric with unit diagonal.
    pub rho: DMatrix<f64>,
}

impl VarianceComponents {
    /// Builds components from `gamma` (with `gamma[0] == 1`) and `sigma_b`.
    pub fn new(gamma: &[f64], sigma_b: f64, sigma_g: Vec<f64>, sigma_eps: Vec<f64>, rho: DMatrix<f64>) -> Result<Self> {
        if gamma.first() != Some(&1.0) {
            return Err(Error::Domain("gamma_1 must equal 1".into()));
        }
        if sigma_b < 0.0 {
            return Err(Error::Domain("sigma_b must be non-negative".into()));
        }
        let theta = VarianceComponents {
            sigma_shared: gamma.iter().map(|g| g * sigma_b).collect(),
            sigma_g,
            sigma_eps,
            rho,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// Builds components from signed shared loadings, canonicalising the
    /// sign so the first loading is non-negative.
    pub fn from_loadings(
        mut sigma_shared: Vec<f64>,
        sigma_g: Vec<f64>,
        sigma_eps: Vec<f64>,
        rho: DMatrix<f64>,
    ) -> Result<Self> {
        if sigma_shared.first().is_some_and(|&s| s < 0.0) {
            for s in &mut sigma_shared {
                *s = -*s;
            }
        }
        let theta = VarianceComponents {
            sigma_shared,
            sigma_g,
            sigma_eps,
            rho,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn k(&self) -> usize {
        self.sigma_g.len()
    }

    pub fn sigma_b(&self) -> f64 {
        self.sigma_shared[0].abs()
    }

    /// `gamma_k`; `None` when `sigma_b` is zero and the loading ratio is
    /// undefined.
    pub fn gamma(&self, k: usize) -> Option<f64> {
        if k == 0 {
            return Some(1.0);
        }
        let b = self.sigma_shared[0];
        if b == 0.0 {
            None
        } else {
            Some(self.sigma_shared[k] / b)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.sigma_g.len();
        if k == 0
            || self.sigma_shared.len() != k
            || self.sigma_eps.len() != k
            || self.rho.nrows() != k
            || self.rho.ncols() != k
        {
            return Err(Error::Dimension("variance components have inconsistent sizes".into()));
        }
        let finite = self
            .sigma_shared
            .iter()
            .chain(&self.sigma_g)
            .chain(&self.sigma_eps)
            .chain(self.rho.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("non-finite variance component".into()));
        }
        if self.sigma_shared[0] < 0.0 {
            return Err(Error::Domain("first shared loading must be non-negative".into()));
        }
        if self.sigma_g.iter().chain(&self.sigma_eps).any(|&s| s < 0.0) {
            return Err(Error::Domain("standard deviations must be non-negative".into()));
        }
        for i in 0..k {
            if self.rho[(i, i)] != 1.0 {
                return Err(Error::Domain("rho must have unit diagonal".into()));
            }
            for j in 0..k {
                let r = self.rho[(i, j)];
                if r.abs() > 1.0 || r != self.rho[(j, i)] {
                    return Err(Error::Domain(format!("invalid genetic correlation rho[{i},{j}] = {r}")));
                }
            }
        }
        if k > 2 {
            let min = self.rho.clone().symmetric_eigen().eigenvalues.min();
            if min < -1e-10 {
                return Err(Error::Domain("rho is not positive semidefinite".into()));
            }
        }
        Ok(())
    }

    /// Genetic covariance matrix `Sigma`.
    pub fn genetic_covariance(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |a, b| self.rho[(a, b)] * (self.sigma_g[a] * self.sigma_g[b]))
    }

    /// Total (marginal) variance of phenotype `k`.
    pub fn total_variance(&self, k: usize) -> f64 {
        self.sigma_shared[k].powi(2) + self.sigma_g[k].powi(2) + self.sigma_eps[k].powi(2)
    }

    /// Model covariance between phenotype `k` of one member and phenotype
    /// `m` of a member at kinship `c` (`same` for the same member).
    pub fn pair_covariance(&self, k: usize, m: usize, c: f64, same: bool) -> f64 {
        let shared = self.sigma_shared[k] * self.sigma_shared[m];
        let genetic = self.rho[(k, m)] * (self.sigma_g[k] * self.sigma_g[m]);
        let noise = if same && k == m { self.sigma_eps[k].powi(2) } else { 0.0 };
        shared + c * genetic + noise
    }

    /// Restriction to a subset of phenotypes. The shared loadings keep
    /// their values, so the first selected phenotype becomes the reference.
    pub fn select(&self, phenotypes: &[usize]) -> Result<Self> {
        let rho = DMatrix::from_fn(phenotypes.len(), phenotypes.len(), |a, b| {
            self.rho[(phenotypes[a], phenotypes[b])]
        });
        VarianceComponents::from_loadings(
            phenotypes.iter().map(|&k| self.sigma_shared[k]).collect(),
            phenotypes.iter().map(|&k| self.sigma_g[k]).collect(),
            phenotypes.iter().map(|&k| self.sigma_eps[k]).collect(),
            rho,
        )
    }

    /// Rescales phenotype `k` by `1 / scale` (its liability-scale
    /// normalisation).
    pub fn rescaled(&self, k: usize, scale: f64) -> Result<Self> {
        let mut t = self.clone();
        t.sigma_shared[k] /= scale;
        t.sigma_g[k] /= scale;
        t.sigma_eps[k] /= scale;
        VarianceComponents::from_loadings(t.sigma_shared, t.sigma_g, t.sigma_eps, t.rho)
    }
}

/// Builds the `(nK) x (nK)` family covariance
/// `sigma_b^2 (gamma gamma^T) (x) J J^T + Sigma (x) C + diag(sigma_eps^2) (x) I`,
/// phenotype-major (all members for phenotype 1 first).
pub fn build_covariance(theta: &VarianceComponents, kinship: &KinshipMatrix) -> Result<DMatrix<f64>> {
    theta.validate()?;
    let n = kinship.len();
    Ok(covariance_with_households(theta, kinship.entries(), &vec![0; n]))
}

/// Covariance for members with an arbitrary relatedness matrix, where the
/// shared-environment term only links members of the same household.
pub fn covariance_with_households(
    theta: &VarianceComponents,
    kinship: &DMatrix<f64>,
    household: &[usize],
) -> DMatrix<f64> {
    let n = kinship.nrows();
    let k = theta.k();
    let sigma = theta.genetic_covariance();
    DMatrix::from_fn(n * k, n * k, |row, col| {
        let (ka, ja) = (row / n, row % n);
        let (kb, jb) = (col / n, col % n);
        let mut v = sigma[(ka, kb)] * kinship[(ja, jb)];
        if household[ja] == household[jb] {
            v += theta.sigma_shared[ka] * theta.sigma_shared[kb];
        }
        if ja == jb && ka == kb {
            v += theta.sigma_eps[ka].powi(2);
        }
        v
    })
}

/// Heritability of phenotype `k` (0-based).
pub fn heritability(theta: &VarianceComponents, k: usize) -> Result<f64> {
    if k >= theta.k() {
        return Err(Error::Domain(format!("phenotype index {k} out of range")));
    }
    let total = theta.total_variance(k);
    if total <= 0.0 {
        return Err(Error::Domain(format!("phenotype {} has zero total variance", k + 1)));
    }
    Ok(theta.sigma_g[k].powi(2) / total)
}

/// Coheritability `rho_km h_k h_m` for `k != m`.
pub fn coheritability(theta: &VarianceComponents, k: usize, m: usize) -> Result<f64> {
    if k == m {
        return Err(Error::Domain("coheritability needs two distinct phenotypes".into()));
    }
    let hk = heritability(theta, k)?.sqrt();
    let hm = heritability(theta, m)?.sqrt();
    Ok(theta.rho[(k, m)] * hk * hm)
}

/// Stacked mean `X beta` over the canonical slots of `family`,
/// phenotype-major with `slots` entries per phenotype. Absent members give
/// zero rows.
pub fn mean_vector(beta: &FixedEffects, family: &FamilyRecord, slots: usize) -> Result<DVector<f64>> {
    let k = beta.phenotypes.len();
    let mut out = DVector::zeros(slots * k);
    for m in family.members.iter().filter(|m| m.present) {
        let j = m.role.slot();
        if j >= slots {
            return Err(Error::Dimension(format!("slot {j} outside {slots} slots")));
        }
        if m.covariates.len() != k {
            return Err(Error::Dimension("covariate blocks do not match phenotypes".into()));
        }
        for (kk, eff) in beta.phenotypes.iter().enumerate() {
            let x = &m.covariates[kk];
            if x.len() != eff.slopes.len() {
                return Err(Error::Dimension(format!(
                    "{} covariates for {} slopes",
                    x.len(),
                    eff.slopes.len()
                )));
            }
            out[kk * slots + j] = eff.linear_predictor(x);
        }
    }
    Ok(out)
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    // restore exact symmetry
    for i in 0..out.nrows() {
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}
