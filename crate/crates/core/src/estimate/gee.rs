use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{project_psd, FixedEffects, ModelSpec};
use crate::pedigree::Cohort;

use super::moments::{chunked, Prepared};

/// Condition number above which a working covariance block is ridged.
const MAX_CONDITION: f64 = 1e12;

/// Inverse of a symmetric positive semidefinite block, flooring the
/// spectrum at `max / MAX_CONDITION`. Returns whether the floor was hit.
fn regularized_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    if top <= 0.0 || !top.is_finite() {
        return (DMatrix::identity(m.nrows(), m.ncols()), true);
    }
    let floor = top / MAX_CONDITION;
    let mut ridged = false;
    let inv = eig.eigenvalues.map(|v| {
        if v < floor {
            ridged = true;
            1.0 / floor
        } else {
            1.0 / v
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&inv) * q.transpose(), ridged)
}

pub(crate) fn coefficient_names(spec: &ModelSpec) -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..spec.k() {
        out.push(format!("alpha{}", k + 1));
        for j in 0..spec.covariate_dim[k] {
            out.push(format!("beta{}_{}", k + 1, j + 1));
        }
    }
    out
}

/// Weighted GLS `beta = (sum w X' V^-1 X)^-1 sum w X' V^-1 y` with each
/// family's working covariance the observed sub-block of `v`. `responses`
/// replaces the observed values when given.
pub(crate) fn gls(
    data: &Prepared,
    v: &DMatrix<f64>,
    responses: Option<&[DVector<f64>]>,
) -> Result<(FixedEffects, bool)> {
    if v.nrows() != data.n_flat || v.ncols() != data.n_flat {
        return Err(Error::Dimension(format!(
            "working covariance is {}x{}, expected {n}x{n}",
            v.nrows(),
            v.ncols(),
            n = data.n_flat
        )));
    }
    if let Some(r) = responses {
        if r.len() != data.len() {
            return Err(Error::Dimension("one response vector per family required".into()));
        }
    }
    let mut cache: BTreeMap<u64, DMatrix<f64>> = BTreeMap::new();
    let mut ridged = false;
    for f in &data.families {
        if f.idx.is_empty() || cache.contains_key(&f.mask) {
            continue;
        }
        let sub = v.select_rows(&f.idx).select_columns(&f.idx);
        let (inv, r) = regularized_inverse(&sub);
        ridged |= r;
        cache.insert(f.mask, inv);
    }
    let p = data.spec.n_coefficients();
    let parts = chunked(data.len(), |range| {
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for i in range {
            let f = &data.families[i];
            if f.idx.is_empty() {
                continue;
            }
            let w = &cache[&f.mask];
            let y = responses.map_or(&f.values, |r| &r[i]);
            let xtw = f.design.transpose() * w;
            a += f.weight * &xtw * &f.design;
            b += f.weight * &xtw * y;
        }
        (a, b)
    });
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (pa, pb) in parts {
        a += pa;
        b += pb;
    }
    let beta = solve_normal(&a, &b, &coefficient_names(&data.spec))?;
    Ok((FixedEffects::from_vector(&data.spec, &beta)?, ridged))
}

/// Solves a symmetric normal system, naming the columns spanned by the
/// null direction when it is singular.
pub(crate) fn solve_normal(a: &DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let eig = a.clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    let low = eig.eigenvalues.imin();
    if top.is_nan() || top <= 0.0 || eig.eigenvalues[low] <= top * 1e-12 {
        let v = eig.eigenvectors.column(low);
        let peak = v.amax();
        let columns = (0..v.len())
            .filter(|&i| v[i].abs() >= 0.1 * peak)
            .map(|i| names.get(i).cloned().unwrap_or_else(|| format!("column{}", i + 1)))
            .collect();
        return Err(Error::RankDeficient { columns });
    }
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::RankDeficient {
            columns: names.to_vec(),
        }),
    }
}

/// Weighted GLS estimate of the fixed effects for working covariance `v`
/// over the canonical phenotype-major slots.
pub fn gee_beta(cohort: &Cohort, v: &DMatrix<f64>, responses: Option<&[DVector<f64>]>) -> Result<FixedEffects> {
    let data = Prepared::new(cohort)?;
    gls(&data, v, responses).map(|(b, _)| b)
}

/// Pairwise-complete weighted residual covariance over the canonical slots,
/// projected onto the PSD cone. Slots without data get unit variance.
pub(crate) fn slot_covariance(data: &Prepared, resid: &[DVector<f64>]) -> DMatrix<f64> {
    let n = data.n_flat;
    let parts = chunked(data.len(), |range| {
        let mut num = DMatrix::<f64>::zeros(n, n);
        let mut den = DMatrix::<f64>::zeros(n, n);
        for i in range {
            let f = &data.families[i];
            let r = &resid[i];
            for (pa, &a) in f.idx.iter().enumerate() {
                for (pb, &b) in f.idx.iter().enumerate().skip(pa) {
                    num[(a, b)] += f.weight * r[pa] * r[pb];
                    den[(a, b)] += f.weight;
                }
            }
        }
        (num, den)
    });
    let mut num = DMatrix::zeros(n, n);
    let mut den = DMatrix::zeros(n, n);
    for (pn, pd) in parts {
        num += pn;
        den += pd;
    }
    let s = DMatrix::from_fn(n, n, |a, b| {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        if den[(a, b)] > 0.0 {
            num[(a, b)] / den[(a, b)]
        } else if a == b {
            1.0
        } else {
            0.0
        }
    });
    project_psd(&s)
}

/// Unstructured residual covariance of the cohort at `beta`.
pub fn unstructured_covariance(cohort: &Cohort, beta: &FixedEffects) -> Result<DMatrix<f64>> {
    beta.check(&cohort.spec)?;
    let data = Prepared::new(cohort)?;
    let resid = data.residuals(beta);
    Ok(slot_covariance(&data, &resid))
}
