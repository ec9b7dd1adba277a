//! Latent-liability moments. Binary slots carry `Z = 1{Y > 0}`; products
//! of centred liabilities are replaced by their conditional expectations
//! under the pairwise joint normal law implied by the current `(beta,
//! theta)`, conditioning on at most the two indicators involved.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{trunc_biv_moments, trunc_cross_moments_halfplane, trunc_uni_moments, BivariateParams};
use crate::model::{build_covariance, FixedEffects, PhenotypeKind, VarianceComponents};
use crate::pedigree::{Cohort, KinshipMatrix};

use super::moments::{assemble, plan_equations, MomentSystem, Prepared};
use super::CrossMoment;

/// Conditional variance below which a continuous member determines its
/// binary partner.
const DEGENERATE_VARIANCE: f64 = 1e-12;

pub(crate) struct LatentContext<'a> {
    pub data: &'a Prepared,
    pub means: Vec<DVector<f64>>,
    pub cov: DMatrix<f64>,
    pub mode: CrossMoment,
}

impl<'a> LatentContext<'a> {
    pub fn new(
        data: &'a Prepared,
        template: &KinshipMatrix,
        beta: &FixedEffects,
        theta: &VarianceComponents,
        mode: CrossMoment,
    ) -> Result<Self> {
        Ok(LatentContext {
            data,
            means: data.means(beta),
            cov: build_covariance(theta, template)?,
            mode,
        })
    }

    /// Conditional expectation of the centred product for flat slots
    /// `a`, `b` of family `i`.
    pub fn product(&self, i: usize, a: usize, b: usize) -> Option<f64> {
        let f = &self.data.families[i];
        let (pa, pb) = (f.position(a)?, f.position(b)?);
        let mu = &self.means[i];
        let (ma, mb) = (mu[pa], mu[pb]);
        let (ya, yb) = (f.values[pa], f.values[pb]);
        let (va, vb, vab) = (self.cov[(a, a)], self.cov[(b, b)], self.cov[(a, b)]);
        let (bin_a, bin_b) = (self.data.is_binary_flat(a), self.data.is_binary_flat(b));
        if a == b {
            if !bin_a {
                return Some((ya - ma).powi(2));
            }
            let (e, e2) = trunc_uni_moments(ma, va, ya > 0.5).ok()?;
            return Some(e2 - 2.0 * ma * e + ma * ma);
        }
        match (bin_a, bin_b) {
            (false, false) => Some((ya - ma) * (yb - mb)),
            (true, true) => {
                let p = pair_params(ma, mb, va, vb, vab)?;
                let (e1, e2, e12) = trunc_biv_moments(&p, ya > 0.5, yb > 0.5).ok()?;
                Some(e12 - e1 * mb - e2 * ma + ma * mb)
            }
            _ => {
                // (continuous, binary) ordering
                let (mc, yc, vc, mz, z, vz) = if bin_b {
                    (ma, ya, va, mb, yb > 0.5, vb)
                } else {
                    (mb, yb, vb, ma, ya > 0.5, va)
                };
                match self.mode {
                    CrossMoment::HalfPlane => {
                        let p = pair_params(mc, mz, vc, vz, vab)?;
                        let (e1, e2, e12) = trunc_cross_moments_halfplane(&p, z).ok()?;
                        Some(e12 - e1 * mz - e2 * mc + mc * mz)
                    }
                    CrossMoment::ObservedValue => {
                        if vc <= 0.0 || vz <= 0.0 {
                            return None;
                        }
                        let slope = vab / vc;
                        let m = mz + slope * (yc - mc);
                        let v = vz - slope * vab;
                        let e = if v <= DEGENERATE_VARIANCE * vz {
                            m
                        } else {
                            trunc_uni_moments(m, v, z).ok()?.0
                        };
                        Some((yc - mc) * (e - mz))
                    }
                }
            }
        }
    }

    /// Responses for the mean update: `E(Y | Z)` from the marginal law for
    /// binary slots, observed values otherwise.
    pub fn responses(&self) -> Vec<DVector<f64>> {
        self.data
            .families
            .iter()
            .enumerate()
            .map(|(i, f)| {
                DVector::from_iterator(
                    f.idx.len(),
                    f.idx.iter().enumerate().map(|(p, &a)| {
                        let y = f.values[p];
                        if !self.data.is_binary_flat(a) {
                            return y;
                        }
                        // an underflowing tail puts the liability at the threshold
                        trunc_uni_moments(self.means[i][p], self.cov[(a, a)], y > 0.5).map_or(0.0, |m| m.0)
                    }),
                )
            })
            .collect()
    }
}

fn pair_params(m1: f64, m2: f64, v1: f64, v2: f64, c: f64) -> Option<BivariateParams> {
    if v1 <= 0.0 || v2 <= 0.0 {
        return None;
    }
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    BivariateParams::new(m1, m2, s1, s2, (c / (s1 * s2)).clamp(-1.0, 1.0)).ok()
}

pub(crate) fn latent_moments(
    data: &Prepared,
    template: &KinshipMatrix,
    beta: &FixedEffects,
    theta: &VarianceComponents,
    mode: CrossMoment,
) -> Result<MomentSystem> {
    let ctx = LatentContext::new(data, template, beta, theta, mode)?;
    let plans = plan_equations(template, data.spec.k());
    Ok(assemble(data, &plans, |i, a, b| ctx.product(i, a, b)))
}

fn check_inputs(cohort: &Cohort, beta: &FixedEffects, theta: &VarianceComponents) -> Result<()> {
    beta.check(&cohort.spec)?;
    theta.validate()?;
    if theta.k() != cohort.spec.k() {
        return Err(Error::Dimension("variance components do not match the cohort".into()));
    }
    Ok(())
}

/// Latent moment system for an all-binary cohort.
pub fn latent_cov_binary(cohort: &Cohort, beta: &FixedEffects, theta: &VarianceComponents) -> Result<MomentSystem> {
    if cohort.spec.kinds.iter().any(|k| *k != PhenotypeKind::Binary) {
        return Err(Error::Domain("latent binary covariance needs binary phenotypes".into()));
    }
    check_inputs(cohort, beta, theta)?;
    let data = Prepared::new(cohort)?;
    latent_moments(&data, &cohort.kinship_template, beta, theta, CrossMoment::default())
}

/// Latent moment system for a cohort mixing continuous and binary
/// phenotypes.
pub fn latent_cov_mixed(
    cohort: &Cohort,
    beta: &FixedEffects,
    theta: &VarianceComponents,
    mode: CrossMoment,
) -> Result<MomentSystem> {
    let kinds = &cohort.spec.kinds;
    if !kinds.contains(&PhenotypeKind::Binary) || !kinds.contains(&PhenotypeKind::Continuous) {
        return Err(Error::Domain(
            "mixed latent covariance needs both phenotype kinds".into(),
        ));
    }
    check_inputs(cohort, beta, theta)?;
    let data = Prepared::new(cohort)?;
    latent_moments(&data, &cohort.kinship_template, beta, theta, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, PhenotypeEffects};
    use crate::pedigree::{FamilyRecord, Member, MemberRole};
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn cohort(kinds: Vec<PhenotypeKind>, n: usize, seed: u64) -> Cohort {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let k = kinds.len();
        let spec = ModelSpec::new(kinds.clone(), vec![1; k]).unwrap();
        let families = (0..n)
            .map(|i| {
                let members = MemberRole::ALL
                    .iter()
                    .map(|&role| {
                        let x: f64 = rng.random::<f64>() - 0.5;
                        Member {
                            role,
                            covariates: vec![vec![x]; k],
                            phenotypes: kinds
                                .iter()
                                .map(|kind| match kind {
                                    PhenotypeKind::Binary => Some(if rng.random::<bool>() { 1.0 } else { 0.0 }),
                                    PhenotypeKind::Continuous => Some(rng.random::<f64>() * 2.0 - 1.0),
                                })
                                .collect(),
                            present: true,
                        }
                    })
                    .collect();
                FamilyRecord::new(format!("f{i}"), members, 1.0).unwrap()
            })
            .collect();
        Cohort::new(families, spec).unwrap()
    }

    fn beta(k: usize, a: f64, s: f64) -> FixedEffects {
        FixedEffects {
            phenotypes: vec![
                PhenotypeEffects {
                    intercept: a,
                    slopes: vec![s]
                };
                k
            ],
        }
    }

    fn theta(sb: f64, sg: f64, rho: f64) -> VarianceComponents {
        VarianceComponents::from_loadings(
            vec![sb, 0.5 * sb],
            vec![sg, sg],
            vec![1.0, 1.0],
            DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn independent_latent_scale() {
        let c = cohort(vec![PhenotypeKind::Binary; 2], 40, 1);
        let sys = latent_cov_binary(&c, &beta(2, 0.0, 0.0), &theta(0.0, 0.0, 0.0)).unwrap();
        assert!((sys.equations[0].value - 1.0).abs() < 1e-12);
        assert!((sys.equations[1].value - 1.0).abs() < 1e-12);
        // cross entries factorise into products of half-normal means
        let plans = plan_equations(&c.kinship_template, 2);
        for (e, plan) in sys.equations.iter().zip(&plans).skip(2) {
            let mut acc = 0.0;
            let mut n = 0.0;
            for f in &c.families {
                for &(a, b) in &plan.pairs {
                    let za = f.value(a % 4, a / 4).unwrap();
                    let zb = f.value(b % 4, b / 4).unwrap();
                    acc += (2.0 * za - 1.0) * (2.0 * zb - 1.0) * 2.0 / PI;
                    n += 1.0;
                }
            }
            assert!((e.value - acc / n).abs() < 1e-12);
        }
    }

    #[test]
    fn reflection_leaves_cross_moments_unchanged() {
        let c = cohort(vec![PhenotypeKind::Binary; 2], 30, 2);
        let mut flipped = c.clone();
        for f in &mut flipped.families {
            for m in &mut f.members {
                for y in m.phenotypes.iter_mut().flatten() {
                    *y = 1.0 - *y;
                }
            }
        }
        let t = theta(0.6, 0.8, 0.4);
        let a = latent_cov_binary(&c, &beta(2, 0.3, 0.7), &t).unwrap();
        let b = latent_cov_binary(&flipped, &beta(2, -0.3, -0.7), &t).unwrap();
        for (x, y) in a.equations.iter().zip(&b.equations) {
            assert!((x.value - y.value).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_cross_entries_vanish_without_coupling() {
        let c = cohort(vec![PhenotypeKind::Binary, PhenotypeKind::Continuous], 30, 3);
        let t = VarianceComponents::from_loadings(
            vec![0.0, 0.0],
            vec![0.7, 0.9],
            vec![1.0, 0.8],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let sys = latent_cov_mixed(&c, &beta(2, 0.1, 0.2), &t, CrossMoment::HalfPlane).unwrap();
        for e in sys.equations.iter().filter(|e| e.k != e.m) {
            assert!(e.value.abs() < 1e-15, "{}", e.label());
        }
    }

    #[test]
    fn continuous_entries_match_residual_products() {
        let c = cohort(vec![PhenotypeKind::Continuous, PhenotypeKind::Binary], 25, 4);
        let b = beta(2, 0.2, -0.4);
        let sys = latent_cov_mixed(&c, &b, &theta(0.5, 0.5, 0.2), CrossMoment::HalfPlane).unwrap();
        let cont = c.spec.select(&[0]);
        let sub = Cohort::new(
            c.families
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    for m in &mut f.members {
                        m.covariates.truncate(1);
                        m.phenotypes.truncate(1);
                    }
                    f
                })
                .collect(),
            cont,
        )
        .unwrap();
        let b1 = FixedEffects {
            phenotypes: vec![b.phenotypes[0].clone()],
        };
        let reference = super::super::empirical_cov_continuous(&sub, &b1).unwrap();
        let ours: Vec<f64> = sys
            .equations
            .iter()
            .filter(|e| e.k == 0 && e.m == 0)
            .map(|e| e.value)
            .collect();
        let theirs: Vec<f64> = reference.equations.iter().map(|e| e.value).collect();
        assert_eq!(ours, theirs);
    }
}
