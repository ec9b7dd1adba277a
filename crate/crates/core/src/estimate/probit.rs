use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{norm_cdf, norm_pdf};
use crate::model::PhenotypeEffects;
use crate::pedigree::Cohort;

use super::gee::solve_normal;

const MAX_NEWTON: usize = 100;

/// `(log Phi(s * eta), d/d eta)` for the probit contribution of outcome
/// sign `s`.
fn probit_terms(eta: f64, positive: bool) -> (f64, f64) {
    let t = if positive { eta } else { -eta };
    let (logp, ratio) = if t > -35.0 {
        let p = norm_cdf(t);
        (p.ln(), norm_pdf(t) / p)
    } else {
        // Mills-ratio asymptotics
        let ratio = -t + 1.0 / (-t);
        (
            -0.5 * t * t - (-t).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln(),
            ratio,
        )
    };
    (logp, if positive { ratio } else { -ratio })
}

/// Weighted probit log-likelihood, gradient and expected-information
/// Hessian.
fn probit_step(x: &DMatrix<f64>, z: &[bool], w: &[f64], beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let mut ll = 0.0;
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let eta = x * beta;
    for i in 0..x.nrows() {
        let (lp, lam) = probit_terms(eta[i], z[i]);
        ll += w[i] * lp;
        let row = x.row(i);
        g += w[i] * lam * row.transpose();
        let curv = w[i] * lam * (lam + eta[i]);
        h += curv * row.transpose() * row;
    }
    (ll, g, h)
}

/// Fits an independent-observations probit model by damped Newton steps.
pub(crate) fn fit_probit(x: &DMatrix<f64>, z: &[bool], w: &[f64], names: &[String]) -> Result<DVector<f64>> {
    let ones = z.iter().filter(|&&v| v).count();
    if ones == 0 || ones == z.len() {
        return Err(Error::Separation {
            column: names[0].clone(),
        });
    }
    // a single covariate that splits the outcomes exactly
    for (j, name) in names.iter().enumerate().take(x.ncols()).skip(1) {
        let col = x.column(j);
        let (mut lo1, mut hi1, mut lo0, mut hi0) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..x.nrows() {
            if z[i] {
                lo1 = lo1.min(col[i]);
                hi1 = hi1.max(col[i]);
            } else {
                lo0 = lo0.min(col[i]);
                hi0 = hi0.max(col[i]);
            }
        }
        if hi0 < lo1 || hi1 < lo0 {
            return Err(Error::Separation { column: name.clone() });
        }
    }
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let (mut ll, mut g, mut h) = probit_step(x, z, w, &beta);
    for _ in 0..MAX_NEWTON {
        let dir = solve_normal(&h, &g, names)?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + step * &dir;
            let (tl, tg, th) = probit_step(x, z, w, &trial);
            if tl >= ll - 1e-12 * ll.abs() {
                let moved = (step * &dir).amax();
                beta = trial;
                ll = tl;
                g = tg;
                h = th;
                accepted = true;
                if moved < 1e-10 * (1.0 + beta.amax()) {
                    return check_divergence(beta, x, names);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return check_divergence(beta, x, names);
        }
    }
    Err(separation_suspect(&beta, x, names))
}

fn separation_suspect(beta: &DVector<f64>, x: &DMatrix<f64>, names: &[String]) -> Error {
    let mut best = (0, 0.0);
    for j in 0..beta.len() {
        let col = x.column(j);
        let sd = if j == 0 { 1.0 } else { col.variance().sqrt().max(1e-12) };
        let v = beta[j].abs() * sd;
        if v > best.1 {
            best = (j, v);
        }
    }
    Error::Separation {
        column: names[best.0].clone(),
    }
}

fn check_divergence(beta: DVector<f64>, x: &DMatrix<f64>, names: &[String]) -> Result<DVector<f64>> {
    let eta = x * &beta;
    if eta.amax() > 12.0 {
        return Err(separation_suspect(&beta, x, names));
    }
    Ok(beta)
}

/// Probit coefficients for binary phenotype `k` (0-based), treating all
/// observed members as independent on the unit latent scale.
pub fn init_probit(cohort: &Cohort, k: usize) -> Result<PhenotypeEffects> {
    if k >= cohort.spec.k() || !cohort.spec.is_binary(k) {
        return Err(Error::Domain(format!("phenotype {} is not binary", k + 1)));
    }
    let d = cohort.spec.covariate_dim[k];
    let mut rows = Vec::new();
    let mut z = Vec::new();
    let mut w = Vec::new();
    for f in &cohort.families {
        for m in f.members.iter().filter(|m| m.present) {
            if let Some(y) = m.observed(k) {
                rows.push(1.0);
                rows.extend_from_slice(&m.covariates[k]);
                z.push(y > 0.5);
                w.push(f.weight);
            }
        }
    }
    let x = DMatrix::from_row_slice(z.len(), d + 1, &rows);
    let names: Vec<String> = std::iter::once("intercept".to_string())
        .chain((0..d).map(|j| format!("x{}", j + 1)))
        .collect();
    let beta = fit_probit(&x, &z, &w, &names)?;
    Ok(PhenotypeEffects {
        intercept: beta[0],
        slopes: beta.iter().skip(1).copied().collect(),
    })
}
