//! Inverse-probability weights for missing phenotype data.
//!
//! A missingness model gives, for a subject with covariates `x`, the
//! probability of each observation pattern. Categories are indexed from 0;
//! the last category is the reference with linear predictor fixed at zero,
//! so a logistic model's single coefficient vector is the log-odds of
//! category 0 ("observed").
//!
//! Each family is weighted by the reciprocal of the predicted probability of
//! the pattern actually seen for one randomly chosen present parent.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pedigree::{Cohort, Member, MemberRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessKind {
    /// Categories `observed`, `missing`.
    Logistic,
    /// Categories `none_missing`, `one_missing`, `both_missing`.
    Multinomial3,
}

impl MissingnessKind {
    pub fn categories(self) -> &'static [&'static str] {
        match self {
            MissingnessKind::Logistic => &["observed", "missing"],
            MissingnessKind::Multinomial3 => &["none_missing", "one_missing", "both_missing"],
        }
    }

    pub fn n_categories(self) -> usize {
        self.categories().len()
    }

    /// Category of a subject with `missing` unobserved phenotypes.
    pub fn category_for(self, missing: usize) -> usize {
        missing.min(self.n_categories() - 1)
    }

    /// Parses a category label or its index.
    pub fn parse_category(self, s: &str) -> Result<usize> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            if i < self.n_categories() {
                return Ok(i);
            }
        }
        self.categories()
            .iter()
            .position(|c| c.eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Schema(format!("unknown missingness category `{s}`")))
    }
}

impl std::str::FromStr for MissingnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logistic" => Ok(MissingnessKind::Logistic),
            "multinomial" | "multinomial3" => Ok(MissingnessKind::Multinomial3),
            other => Err(Error::Domain(format!("unknown missingness model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessModel {
    pub kind: MissingnessKind,
    /// Design column names, intercept first.
    pub names: Vec<String>,
    /// One vector per non-reference category, aligned with `names`.
    pub coefficients: Vec<Vec<f64>>,
    /// Deviance after each accepted step, starting value first.
    pub deviance_trace: Vec<f64>,
}

impl MissingnessModel {
    /// Category probabilities for covariates `x` (without the intercept).
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() + 1 != self.names.len() {
            return Err(Error::Dimension(format!(
                "missingness model expects {} covariates, got {}",
                self.names.len() - 1,
                x.len()
            )));
        }
        let eta: Vec<f64> = self
            .coefficients
            .iter()
            .map(|b| b[0] + b[1..].iter().zip(x).map(|(b, x)| b * x).sum::<f64>())
            .collect();
        Ok(softmax(&eta))
    }

    pub fn deviance(&self) -> f64 {
        *self.deviance_trace.last().expect("fitted model has a deviance")
    }
}

/// Probabilities from the non-reference predictors; the reference category
/// has predictor zero.
fn softmax(eta: &[f64]) -> Vec<f64> {
    let top = eta.iter().copied().fold(0.0_f64, f64::max);
    let mut p: Vec<f64> = eta.iter().map(|e| (e - top).exp()).collect();
    p.push((-top).exp());
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

const MAX_IRLS: usize = 100;
const MAX_HALVINGS: usize = 40;
/// Linear predictors beyond this size mean fitted probabilities have
/// collapsed to 0 or 1.
const SEPARATION_ETA: f64 = 30.0;

fn with_intercept(design: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    DMatrix::from_fn(
        n,
        design.ncols() + 1,
        |i, j| if j == 0 { 1.0 } else { design[(i, j - 1)] },
    )
}

fn deviance(x: &DMatrix<f64>, y: &[usize], beta: &DVector<f64>, c: usize) -> f64 {
    let p = x.ncols();
    let mut d = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let row = x.row(i);
        let eta: Vec<f64> = (0..c - 1).map(|k| row.dot(&beta.rows(k * p, p).transpose())).collect();
        let top = eta.iter().copied().fold(0.0_f64, f64::max);
        let log_total = top + (eta.iter().map(|e| (e - top).exp()).sum::<f64>() + (-top).exp()).ln();
        let own = if yi + 1 == c { 0.0 } else { eta[yi] };
        d -= 2.0 * (own - log_total);
    }
    d
}

fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let gram = x.transpose() * x;
    let eig = gram.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let tol = top * 1e-10 * x.ncols() as f64;
    let mut columns = Vec::new();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= tol {
            let v = eig.eigenvectors.column(j);
            let vmax = v.amax();
            for (i, name) in names.iter().enumerate() {
                if v[i].abs() > 1e-3 * vmax && !columns.contains(name) {
                    columns.push(name.clone());
                }
            }
        }
    }
    if columns.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns })
    }
}

/// Maximum-likelihood missingness model by Newton-Raphson (iteratively
/// reweighted least squares) with step halving, so the deviance never
/// increases. `design` holds covariates without the intercept; `outcome`
/// holds category indices.
pub fn fit_missingness(
    design: &DMatrix<f64>,
    outcome: &[usize],
    names: &[String],
    kind: MissingnessKind,
) -> Result<MissingnessModel> {
    let n = design.nrows();
    if outcome.len() != n {
        return Err(Error::Dimension(format!(
            "{} outcomes for {n} design rows",
            outcome.len()
        )));
    }
    if names.len() != design.ncols() {
        return Err(Error::Dimension(format!(
            "{} names for {} columns",
            names.len(),
            design.ncols()
        )));
    }
    let c = kind.n_categories();
    if let Some(bad) = outcome.iter().find(|&&y| y >= c) {
        return Err(Error::Domain(format!("category index {bad} out of range")));
    }
    for (k, label) in kind.categories().iter().enumerate() {
        if !outcome.contains(&k) {
            return Err(Error::Domain(format!("category `{label}` never observed")));
        }
    }
    let mut all_names = vec!["intercept".to_string()];
    all_names.extend(names.iter().cloned());
    let x = with_intercept(design);
    check_rank(&x, &all_names)?;
    let p = x.ncols();
    let m = p * (c - 1);

    // intercepts at the marginal log-odds against the reference
    let mut beta = DVector::zeros(m);
    let count = |k: usize| outcome.iter().filter(|&&y| y == k).count() as f64;
    for k in 0..c - 1 {
        beta[k * p] = (count(k) / count(c - 1)).ln();
    }
    let mut dev = deviance(&x, outcome, &beta, c);
    let mut trace = vec![dev];
    let mut converged = false;
    for _ in 0..MAX_IRLS {
        let mut grad = DVector::zeros(m);
        let mut info = DMatrix::zeros(m, m);
        for (i, &yi) in outcome.iter().enumerate() {
            let row = x.row(i).transpose();
            let eta: Vec<f64> = (0..c - 1).map(|k| row.dot(&beta.rows(k * p, p))).collect();
            let prob = softmax(&eta);
            for a in 0..c - 1 {
                let r = f64::from(u8::from(yi == a)) - prob[a];
                grad.rows_mut(a * p, p).axpy(r, &row, 1.0);
                for b in 0..c - 1 {
                    let w = if a == b {
                        prob[a] * (1.0 - prob[a])
                    } else {
                        -prob[a] * prob[b]
                    };
                    let mut block = info.view_mut((a * p, b * p), (p, p));
                    block.ger(w, &row, &row, 1.0);
                }
            }
        }
        let step = info
            .cholesky()
            .ok_or_else(|| Error::RankDeficient {
                columns: all_names.clone(),
            })?
            .solve(&grad);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &beta + t * &step;
            let d = deviance(&x, outcome, &candidate, c);
            if d <= dev {
                accepted = Some((candidate, d));
                break;
            }
            t *= 0.5;
        }
        let Some((next, d)) = accepted else {
            converged = true;
            break;
        };
        let moved = (t * &step).amax();
        let gain = dev - d;
        beta = next;
        dev = d;
        trace.push(dev);
        if moved <= 1e-10 * (1.0 + beta.amax()) || gain <= 1e-14 * (1.0 + dev) {
            converged = true;
            break;
        }
    }
    let max_eta = (0..n)
        .flat_map(|i| {
            let row = x.row(i).transpose();
            (0..c - 1).map(move |k| (k, row.clone()))
        })
        .map(|(k, row)| row.dot(&beta.rows(k * p, p)).abs())
        .fold(0.0_f64, f64::max);
    if max_eta > SEPARATION_ETA || !converged {
        let (j, _) = (0..p)
            .skip(1)
            .map(|j| (j, (0..c - 1).map(|k| beta[k * p + j].abs()).fold(0.0_f64, f64::max)))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        return Err(Error::Separation {
            column: all_names[j].clone(),
        });
    }
    let coefficients = (0..c - 1)
        .map(|k| beta.rows(k * p, p).iter().copied().collect())
        .collect();
    Ok(MissingnessModel {
        kind,
        names: all_names,
        coefficients,
        deviance_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    pub min_weight: f64,
    pub max_weight: f64,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            min_weight: 1.0,
            max_weight: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeight {
    pub family_id: String,
    /// Member whose pattern probability defines the weight.
    pub member: MemberRole,
    /// Set when no parent was present and a child was used.
    pub from_child: bool,
    pub probability: f64,
    pub raw: f64,
    pub clipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAssignment {
    pub options: WeightOptions,
    pub families: Vec<FamilyWeight>,
}

impl WeightAssignment {
    pub fn n_clipped(&self) -> usize {
        self.families.iter().filter(|f| f.raw != f.clipped).count()
    }

    pub fn n_from_child(&self) -> usize {
        self.families.iter().filter(|f| f.from_child).count()
    }

    /// Writes the weights to `cohort`, matching families by identifier.
    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort> {
        apply_weights(cohort, self.families.iter().map(|f| (f.family_id.as_str(), f.clipped)))
    }
}

/// Observation-pattern category of a present member.
pub fn member_category(member: &Member, kind: MissingnessKind) -> usize {
    let missing = (0..member.phenotypes.len())
        .filter(|&k| member.observed(k).is_none())
        .count();
    kind.category_for(missing)
}

/// Missingness design row of a member: its covariates for the first
/// phenotype.
pub fn member_design(member: &Member) -> &[f64] {
    member.covariates.first().map_or(&[], Vec::as_slice)
}

/// Weights each family by `1 / P(pattern)` of one uniformly chosen present
/// parent (a present child when no parent is present), clipped to the
/// configured bounds. Returns the reweighted cohort and the per-family
/// record.
pub fn assign_family_weights<R: Rng + ?Sized>(
    cohort: &Cohort,
    model: &MissingnessModel,
    options: &WeightOptions,
    rng: &mut R,
) -> Result<(Cohort, WeightAssignment)> {
    if !(options.min_weight > 0.0 && options.min_weight <= options.max_weight) {
        return Err(Error::Domain(format!(
            "weight bounds [{}, {}] are not a positive interval",
            options.min_weight, options.max_weight
        )));
    }
    log::info!(
        "clipping family weights to [{}, {}]",
        options.min_weight,
        options.max_weight
    );
    let mut families = Vec::with_capacity(cohort.families.len());
    for f in &cohort.families {
        let parents: Vec<&Member> = f.members.iter().filter(|m| m.present && m.role.is_parent()).collect();
        let (pool, from_child) = if parents.is_empty() {
            (f.members.iter().filter(|m| m.present).collect::<Vec<_>>(), true)
        } else {
            (parents, false)
        };
        let chosen = pool[rng.random_range(0..pool.len())];
        let prob = model.probabilities(member_design(chosen))?[member_category(chosen, model.kind)];
        let raw = 1.0 / prob;
        let clipped = raw.clamp(options.min_weight, options.max_weight);
        if from_child {
            log::warn!(
                "family {}: no parent present, weight taken from {}",
                f.family_id,
                chosen.role
            );
        }
        families.push(FamilyWeight {
            family_id: f.family_id.clone(),
            member: chosen.role,
            from_child,
            probability: prob,
            raw,
            clipped,
        });
    }
    let assignment = WeightAssignment {
        options: *options,
        families,
    };
    let out = assignment.apply(cohort)?;
    Ok((out, assignment))
}

/// Replaces family weights by identifier; every family must be listed.
pub fn apply_weights<'a, I>(cohort: &Cohort, weights: I) -> Result<Cohort>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let map: std::collections::HashMap<&str, f64> = weights.into_iter().collect();
    let mut out = cohort.clone();
    for f in &mut out.families {
        let w = *map
            .get(f.family_id.as_str())
            .ok_or_else(|| Error::Schema(format!("no weight for family {}", f.family_id)))?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Domain(format!(
                "family {}: weight {w} is not positive",
                f.family_id
            )));
        }
        f.weight = w;
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightRow {
    family_id: String,
    weight: f64,
}

/// Two-column CSV `family_id,weight` of the clipped weights.
pub fn write_weights_csv<W: Write>(assignment: &WeightAssignment, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for f in &assignment.families {
        w.serialize(WeightRow {
            family_id: f.family_id.clone(),
            weight: f.clipped,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights_csv<R: Read>(reader: R) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["family_id", "weight"] {
        return Err(Error::Schema("weights header must be family_id,weight".into()));
    }
    r.deserialize::<WeightRow>()
        .map(|row| row.map(|row| (row.family_id, row.weight)).map_err(Error::from))
        .collect()
}
