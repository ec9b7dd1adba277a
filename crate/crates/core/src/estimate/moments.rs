use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FixedEffects, ModelSpec, VarianceComponents};
use crate::pedigree::{kinship_classes, Cohort, KinshipMatrix, MAX_MEMBERS};

/// Canonical member slots per family.
pub(crate) const SLOTS: usize = MAX_MEMBERS;
/// Families per work unit; fixed so reductions do not depend on threads.
pub(crate) const CHUNK: usize = 256;
const UNOBSERVED: usize = usize::MAX;

/// Maps `f` over fixed-size family ranges in parallel, returning the
/// results in range order.
pub(crate) fn chunked<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}

/// One family flattened to its observed phenotype slots, phenotype-major.
#[derive(Debug, Clone)]
pub(crate) struct FamilyData {
    pub weight: f64,
    /// Flat indices `k * SLOTS + slot` of observed values, ascending.
    pub idx: Vec<usize>,
    /// Position of each flat index within `idx`, or `UNOBSERVED`.
    pos: Vec<usize>,
    pub design: DMatrix<f64>,
    pub values: DVector<f64>,
    pub mask: u64,
}

impl FamilyData {
    pub fn position(&self, flat: usize) -> Option<usize> {
        match self.pos[flat] {
            UNOBSERVED => None,
            p => Some(p),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub spec: ModelSpec,
    pub n_flat: usize,
    pub families: Vec<FamilyData>,
}

impl Prepared {
    pub fn new(cohort: &Cohort) -> Result<Self> {
        let spec = cohort.spec.clone();
        let k = spec.k();
        let n_flat = k * SLOTS;
        if n_flat > 64 {
            return Err(Error::Dimension(format!(
                "{k} phenotypes exceed the supported maximum of 16"
            )));
        }
        let p = spec.n_coefficients();
        let families = cohort
            .families
            .iter()
            .map(|fam| {
                let mut idx = Vec::new();
                let mut rows: Vec<f64> = Vec::new();
                let mut values = Vec::new();
                for kk in 0..k {
                    let off = spec.coefficient_offset(kk);
                    for slot in 0..SLOTS {
                        let Some(m) = fam.member_at(slot) else { continue };
                        let Some(y) = m.observed(kk) else { continue };
                        idx.push(kk * SLOTS + slot);
                        values.push(y);
                        let mut row = vec![0.0; p];
                        row[off] = 1.0;
                        row[off + 1..off + 1 + spec.covariate_dim[kk]].copy_from_slice(&m.covariates[kk]);
                        rows.extend(row);
                    }
                }
                let mut pos = vec![UNOBSERVED; n_flat];
                let mut mask = 0u64;
                for (i, &a) in idx.iter().enumerate() {
                    pos[a] = i;
                    mask |= 1 << a;
                }
                FamilyData {
                    weight: fam.weight,
                    design: DMatrix::from_row_slice(idx.len(), p, &rows),
                    values: DVector::from_vec(values),
                    idx,
                    pos,
                    mask,
                }
            })
            .collect();
        Ok(Prepared { spec, n_flat, families })
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_binary_flat(&self, flat: usize) -> bool {
        self.spec.is_binary(flat / SLOTS)
    }

    /// Per-family means `X beta` over observed slots.
    pub fn means(&self, beta: &FixedEffects) -> Vec<DVector<f64>> {
        let b = beta.to_vector();
        chunked(self.len(), |r| {
            r.map(|i| &self.families[i].design * &b).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }

    /// Per-family residuals against `values`.
    pub fn residuals(&self, beta: &FixedEffects) -> Vec<DVector<f64>> {
        self.means(beta)
            .into_iter()
            .zip(&self.families)
            .map(|(mu, f)| &f.values - mu)
            .collect()
    }
}

/// Relationship between the two members entering a moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "kinship")]
pub enum PairClass {
    SameMember,
    Kinship(f64),
}

impl PairClass {
    /// Kinship multiplier of the genetic term and whether the error term
    /// enters.
    pub fn coefficients(self) -> (f64, bool) {
        match self {
            PairClass::SameMember => (1.0, true),
            PairClass::Kinship(c) => (c, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEquation {
    /// Phenotype pair, `k <= m`, 0-based.
    pub k: usize,
    pub m: usize,
    pub class: PairClass,
    pub value: f64,
    /// Pairs averaged into `value` per family.
    pub weight: f64,
}

impl MomentEquation {
    pub fn model_value(&self, theta: &VarianceComponents) -> f64 {
        let (c, same) = self.class.coefficients();
        theta.pair_covariance(self.k, self.m, c, same)
    }

    pub fn label(&self) -> String {
        let class = match self.class {
            PairClass::SameMember => "same member".to_string(),
            PairClass::Kinship(c) => format!("kinship {c}"),
        };
        format!("cov(Y{}, Y{}) {class}", self.k + 1, self.m + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentSystem {
    pub equations: Vec<MomentEquation>,
    pub dropped: Vec<String>,
    pub excluded_pairs: usize,
}

impl MomentSystem {
    pub fn len(&self) -> usize {
        self.equations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.equations.is_empty()
    }

    /// Weighted squared distance to the moments implied by `theta`.
    pub fn objective(&self, theta: &VarianceComponents) -> f64 {
        self.equations
            .iter()
            .map(|e| e.weight * (e.model_value(theta) - e.value).powi(2))
            .sum()
    }

    /// Noiseless system implied by `theta` for complete nuclear families.
    pub fn forward(theta: &VarianceComponents, template: &KinshipMatrix) -> Self {
        let equations = plan_equations(template, theta.k())
            .into_iter()
            .map(|p| {
                let mut e = MomentEquation {
                    k: p.k,
                    m: p.m,
                    class: p.class,
                    value: 0.0,
                    weight: p.unit * p.pairs.len() as f64,
                };
                e.value = e.model_value(theta);
                e
            })
            .collect();
        MomentSystem {
            equations,
            dropped: Vec::new(),
            excluded_pairs: 0,
        }
    }
}

/// Flat-index pairs averaged into one moment equation.
#[derive(Debug, Clone)]
pub(crate) struct EquationPlan {
    pub k: usize,
    pub m: usize,
    pub class: PairClass,
    pub pairs: Vec<(usize, usize)>,
    /// Count carried by each pair; both orderings of a cross-phenotype,
    /// cross-member pair are averaged, so each carries one half.
    pub unit: f64,
}

/// Equation order: same-member variances, same-member cross covariances,
/// then kinship classes per phenotype, then per phenotype pair.
pub(crate) fn plan_equations(template: &KinshipMatrix, k: usize) -> Vec<EquationPlan> {
    let n = template.len();
    let classes = kinship_classes(template);
    let mut out = Vec::new();
    let flat = |ph: usize, slot: usize| ph * SLOTS + template.roles()[slot].slot();
    for kk in 0..k {
        out.push(EquationPlan {
            k: kk,
            m: kk,
            class: PairClass::SameMember,
            pairs: (0..n).map(|j| (flat(kk, j), flat(kk, j))).collect(),
            unit: 1.0,
        });
    }
    for kk in 0..k {
        for m in kk + 1..k {
            out.push(EquationPlan {
                k: kk,
                m,
                class: PairClass::SameMember,
                pairs: (0..n).map(|j| (flat(kk, j), flat(m, j))).collect(),
                unit: 1.0,
            });
        }
    }
    for kk in 0..k {
        for c in &classes.classes {
            out.push(EquationPlan {
                k: kk,
                m: kk,
                class: PairClass::Kinship(c.value),
                pairs: c.pairs.iter().map(|&(j, s)| (flat(kk, j), flat(kk, s))).collect(),
                unit: 1.0,
            });
        }
    }
    for kk in 0..k {
        for m in kk + 1..k {
            for c in &classes.classes {
                out.push(EquationPlan {
                    k: kk,
                    m,
                    class: PairClass::Kinship(c.value),
                    pairs: c
                        .pairs
                        .iter()
                        .flat_map(|&(j, s)| [(flat(kk, j), flat(m, s)), (flat(kk, s), flat(m, j))])
                        .collect(),
                    unit: 0.5,
                });
            }
        }
    }
    out
}

/// Averages per-pair products into a moment system. `product(i, a, b)`
/// returns the contribution of flat slots `a`, `b` of family `i`, or
/// `None` when it must be excluded.
pub(crate) fn assemble<F>(data: &Prepared, plans: &[EquationPlan], product: F) -> MomentSystem
where
    F: Fn(usize, usize, usize) -> Option<f64> + Sync,
{
    let t = plans.len();
    struct Acc {
        num: Vec<f64>,
        den: Vec<f64>,
        count: Vec<f64>,
        excluded: usize,
    }
    let parts = chunked(data.len(), |range| {
        let mut acc = Acc {
            num: vec![0.0; t],
            den: vec![0.0; t],
            count: vec![0.0; t],
            excluded: 0,
        };
        for i in range {
            let fam = &data.families[i];
            for (e, plan) in plans.iter().enumerate() {
                for &(a, b) in &plan.pairs {
                    if fam.mask & (1 << a) == 0 || fam.mask & (1 << b) == 0 {
                        continue;
                    }
                    match product(i, a, b) {
                        Some(v) => {
                            acc.num[e] += fam.weight * plan.unit * v;
                            acc.den[e] += fam.weight * plan.unit;
                            acc.count[e] += plan.unit;
                        }
                        None => acc.excluded += 1,
                    }
                }
            }
        }
        acc
    });
    let mut num = vec![0.0; t];
    let mut den = vec![0.0; t];
    let mut count = vec![0.0; t];
    let mut excluded = 0;
    for p in parts {
        for e in 0..t {
            num[e] += p.num[e];
            den[e] += p.den[e];
            count[e] += p.count[e];
        }
        excluded += p.excluded;
    }
    let n = data.len().max(1) as f64;
    let mut system = MomentSystem {
        excluded_pairs: excluded,
        ..MomentSystem::default()
    };
    for (e, plan) in plans.iter().enumerate() {
        let eq = MomentEquation {
            k: plan.k,
            m: plan.m,
            class: plan.class,
            value: 0.0,
            weight: count[e] / n,
        };
        if den[e] > 0.0 {
            system.equations.push(MomentEquation {
                value: num[e] / den[e],
                ..eq
            });
        } else {
            system.dropped.push(eq.label());
        }
    }
    system
}

/// Residual moment system for an all-continuous cohort at `beta`, using
/// pairwise-complete observations and family weights.
pub fn empirical_cov_continuous(cohort: &Cohort, beta: &FixedEffects) -> Result<MomentSystem> {
    if cohort
        .spec
        .kinds
        .iter()
        .any(|k| *k != crate::model::PhenotypeKind::Continuous)
    {
        return Err(Error::Domain("empirical covariance needs continuous phenotypes".into()));
    }
    beta.check(&cohort.spec)?;
    let data = Prepared::new(cohort)?;
    Ok(residual_moments(&data, &cohort.kinship_template, beta))
}

pub(crate) fn residual_moments(data: &Prepared, template: &KinshipMatrix, beta: &FixedEffects) -> MomentSystem {
    let resid = data.residuals(beta);
    let plans = plan_equations(template, data.spec.k());
    assemble(data, &plans, |i, a, b| {
        let f = &data.families[i];
        let r = &resid[i];
        Some(r[f.position(a)?] * r[f.position(b)?])
    })
}
