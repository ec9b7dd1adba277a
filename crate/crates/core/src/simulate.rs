//! Simulation designs: covariates, true parameters hitting target
//! heritabilities, phenotype sampling with optional dichotomization, and
//! RMSE / percent-difference tables over replicates.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, FitOptions};
use crate::model::{
    covariance_with_households, FixedEffects, ModelSpec, PhenotypeEffects, PhenotypeKind, VarianceComponents,
};
use crate::params::{ParamBlock, ParamSet};
use crate::pedigree::{apply_reporting_error, Cohort, FamilyRecord, Member, MemberRole, ReportingErrorMode};
use crate::rng::{derive_seed, stream_rng};

/// Number of simulated covariates per member.
pub const N_COVARIATES: usize = 4;

/// Nuisance draws are redrawn while `sigma_b` falls below this value, which
/// leaves the loadings `gamma_k` practically unidentified.
pub const MIN_SIGMA_B: f64 = 0.2;
/// Nuisance draws are redrawn while a phenotype's error share of its total
/// variance falls below this value; on the liability scale the total
/// variance is the reciprocal of that share.
pub const MIN_ERROR_SHARE: f64 = 0.15;
const MAX_REDRAWS: usize = 10_000;

const TRUTH_STREAM: u64 = 0;
const MISSING_TAG: u64 = 0x4D15;
const REPORTING_TAG: u64 = 0x5245_504f_5254;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SettingLabel {
    HighHighLow,
    HighLowLow,
    LowLowLow,
    HighHighHigh,
}

impl SettingLabel {
    pub const ALL: [SettingLabel; 4] = [
        SettingLabel::HighHighLow,
        SettingLabel::HighLowLow,
        SettingLabel::LowLowLow,
        SettingLabel::HighHighHigh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SettingLabel::HighHighLow => "high,high,low",
            SettingLabel::HighLowLow => "high,low,low",
            SettingLabel::LowLowLow => "low,low,low",
            SettingLabel::HighHighHigh => "high,high,high",
        }
    }

    /// Target `(h1^2, h2^2, rho)`.
    pub fn targets(self) -> (f64, f64, f64) {
        match self {
            SettingLabel::HighHighLow => (0.61, 0.54, 0.3),
            SettingLabel::HighLowLow => (0.54, 0.35, 0.3),
            SettingLabel::LowLowLow => (0.46, 0.35, 0.3),
            SettingLabel::HighHighHigh => (0.61, 0.54, 0.6),
        }
    }
}

impl fmt::Display for SettingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SettingLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && !matches!(c, '(' | ')'))
            .collect::<String>()
            .to_ascii_lowercase()
            .replace(['_', '-'], ",");
        SettingLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == norm)
            .ok_or_else(|| Error::Domain(format!("unknown setting label `{s}`")))
    }
}

impl TryFrom<String> for SettingLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SettingLabel> for String {
    fn from(l: SettingLabel) -> String {
        l.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub label: SettingLabel,
    pub h2: [f64; 2],
    pub rho: f64,
}

impl From<SettingLabel> for SimSetting {
    fn from(label: SettingLabel) -> Self {
        let (h1, h2, rho) = label.targets();
        SimSetting {
            label,
            h2: [h1, h2],
            rho,
        }
    }
}

/// Phenotype types of a two-phenotype analysis. The mixed analysis
/// dichotomizes the first phenotype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Continuous,
    Binary,
    Mixed,
}

impl Analysis {
    pub fn kinds(self) -> Vec<PhenotypeKind> {
        match self {
            Analysis::Continuous => vec![PhenotypeKind::Continuous; 2],
            Analysis::Binary => vec![PhenotypeKind::Binary; 2],
            Analysis::Mixed => vec![PhenotypeKind::Binary, PhenotypeKind::Continuous],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Analysis::Continuous => "continuous",
            Analysis::Binary => "binary",
            Analysis::Mixed => "mixed",
        }
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(Analysis::Continuous),
            "binary" => Ok(Analysis::Binary),
            "mixed" | "mix" => Ok(Analysis::Mixed),
            other => Err(Error::Domain(format!("unknown analysis `{other}`"))),
        }
    }
}

/// Covariate laws: `X1 ~ Bern(p1)`, `X2 ~ Bern(p2)`, `X3 ~ N(0, 1)`,
/// `X4 ~ Exp(rate)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateConfig {
    pub p1: f64,
    pub p2: f64,
    pub rate: f64,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        CovariateConfig {
            p1: 0.5,
            p2: 0.5,
            rate: 1.0,
        }
    }
}

/// Draws an `n x 4` covariate matrix, one member per row.
pub fn gen_covariates<R: Rng + ?Sized>(n: usize, cfg: &CovariateConfig, rng: &mut R) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Domain("at least one member is required".into()));
    }
    let b1 = Bernoulli::new(cfg.p1).map_err(|e| Error::Domain(format!("p1: {e}")))?;
    let b2 = Bernoulli::new(cfg.p2).map_err(|e| Error::Domain(format!("p2: {e}")))?;
    let exp = Exp::new(cfg.rate).map_err(|e| Error::Domain(format!("rate: {e}")))?;
    if !(cfg.rate > 0.0 && cfg.rate.is_finite()) {
        return Err(Error::Domain(format!("exponential rate {} must be positive", cfg.rate)));
    }
    let mut x = DMatrix::zeros(n, N_COVARIATES);
    for i in 0..n {
        x[(i, 0)] = f64::from(u8::from(b1.sample(rng)));
        x[(i, 1)] = f64::from(u8::from(b2.sample(rng)));
        x[(i, 2)] = rng.sample::<f64, _>(StandardNormal);
        x[(i, 3)] = exp.sample(rng);
    }
    Ok(x)
}

/// True parameters for a setting. Coefficients are uniform on (0, 1). The
/// nuisance components `(sigma_b, gamma_2, sigma_eps)` are uniform on (0, 1)
/// conditioned on `sigma_b >= MIN_SIGMA_B` and every error share
/// `>= MIN_ERROR_SHARE` (redrawn until both hold). The genetic SDs are then
/// set so the heritabilities hit the targets exactly.
pub fn target_setting<R: Rng + ?Sized>(
    setting: &SimSetting,
    rng: &mut R,
) -> Result<(FixedEffects, VarianceComponents)> {
    for &h in &setting.h2 {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::Domain(format!("target heritability {h} outside (0, 1)")));
        }
    }
    if !(-1.0..=1.0).contains(&setting.rho) {
        return Err(Error::Domain(format!(
            "target correlation {} outside [-1, 1]",
            setting.rho
        )));
    }
    if setting.h2.iter().any(|h| 1.0 - h < MIN_ERROR_SHARE) {
        return Err(Error::Domain(format!(
            "heritability above {} leaves no admissible error share",
            1.0 - MIN_ERROR_SHARE
        )));
    }
    let mut uniform = || rng.random::<f64>();
    let beta = FixedEffects {
        phenotypes: (0..2)
            .map(|_| PhenotypeEffects {
                intercept: uniform(),
                slopes: (0..N_COVARIATES).map(|_| uniform()).collect(),
            })
            .collect(),
    };
    let mut accepted = None;
    for _ in 0..MAX_REDRAWS {
        let (sigma_b, gamma, sigma_eps) = (uniform(), [1.0, uniform()], [uniform(), uniform()]);
        // error share = (1 - h) * eps^2 / (shared^2 + eps^2)
        let admissible = sigma_b >= MIN_SIGMA_B
            && (0..2).all(|k| {
                let nuisance = (gamma[k] * sigma_b).powi(2) + sigma_eps[k].powi(2);
                (1.0 - setting.h2[k]) * sigma_eps[k].powi(2) >= MIN_ERROR_SHARE * nuisance
            });
        if admissible {
            accepted = Some((sigma_b, gamma, sigma_eps));
            break;
        }
    }
    let (sigma_b, gamma, sigma_eps) =
        accepted.ok_or_else(|| Error::Domain("no admissible nuisance draw for the target setting".into()))?;
    let sigma_g = (0..2)
        .map(|k| {
            let nuisance = (gamma[k] * sigma_b).powi(2) + sigma_eps[k].powi(2);
            let h = setting.h2[k];
            (h / (1.0 - h) * nuisance).sqrt()
        })
        .collect::<Vec<f64>>();
    let sigma_eps = sigma_eps.to_vec();
    let rho = DMatrix::from_row_slice(2, 2, &[1.0, setting.rho, setting.rho, 1.0]);
    let theta = VarianceComponents::new(&gamma, sigma_b, sigma_g, sigma_eps, rho)?;
    Ok((beta, theta))
}

/// Parameters on the scale the estimators report: binary phenotypes are
/// divided by their error SD.
pub fn liability_scale(
    spec: &ModelSpec,
    beta: &FixedEffects,
    theta: &VarianceComponents,
) -> Result<(FixedEffects, VarianceComponents)> {
    let mut beta = beta.clone();
    let mut theta = theta.clone();
    for k in 0..spec.k() {
        if !spec.is_binary(k) {
            continue;
        }
        let s = theta.sigma_eps[k];
        if s <= 0.0 {
            return Err(Error::Domain(format!(
                "binary phenotype {} needs a positive error SD",
                k + 1
            )));
        }
        theta = theta.rescaled(k, s)?;
        let e = &mut beta.phenotypes[k];
        e.intercept /= s;
        for b in &mut e.slopes {
            *b /= s;
        }
    }
    Ok((beta, theta))
}

/// Families of four members with simulated covariates (shared by every
/// phenotype) and no phenotypes yet. With probability `parent_missing` a
/// family loses one randomly chosen parent.
pub fn cohort_template<R: Rng + ?Sized>(
    n_families: usize,
    kinds: &[PhenotypeKind],
    covariates: &CovariateConfig,
    parent_missing: f64,
    rng: &mut R,
) -> Result<Cohort> {
    if !(0.0..=1.0).contains(&parent_missing) {
        return Err(Error::Domain(format!(
            "parent-missing rate {parent_missing} outside [0, 1]"
        )));
    }
    let k = kinds.len();
    let x = gen_covariates(n_families * MemberRole::ALL.len(), covariates, rng)?;
    let mut families = Vec::with_capacity(n_families);
    for i in 0..n_families {
        let dropped = if parent_missing > 0.0 && rng.random::<f64>() < parent_missing {
            Some(if rng.random::<bool>() {
                MemberRole::Parent1
            } else {
                MemberRole::Parent2
            })
        } else {
            None
        };
        let members = MemberRole::ALL
            .iter()
            .enumerate()
            .map(|(j, &role)| {
                let row: Vec<f64> = x.row(i * MemberRole::ALL.len() + j).iter().copied().collect();
                Member {
                    role,
                    covariates: vec![row; k],
                    phenotypes: vec![None; k],
                    present: dropped != Some(role),
                }
            })
            .collect();
        families.push(FamilyRecord::new(format!("F{:06}", i + 1), members, 1.0)?);
    }
    Cohort::new(families, ModelSpec::new(kinds.to_vec(), vec![N_COVARIATES; k])?)
}

/// Lower factor `L` with `L L' = v`; falls back to a symmetric square root
/// for singular PSD matrices.
fn factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = v.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = v.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.min() < -1e-10 * scale {
        return Err(Error::Domain(
            "generative covariance is not positive semidefinite".into(),
        ));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Draws phenotypes for every present member of `template` from
/// `N(X beta, V(theta))` over its generative kinship blocks, dichotomizing
/// binary phenotypes at zero.
pub fn gen_phenotypes<R: Rng + ?Sized>(
    template: &Cohort,
    beta: &FixedEffects,
    theta: &VarianceComponents,
    rng: &mut R,
) -> Result<Cohort> {
    let spec = &template.spec;
    beta.check(spec)?;
    theta.validate()?;
    if theta.k() != spec.k() {
        return Err(Error::Dimension("variance components do not match the cohort".into()));
    }
    let k = spec.k();
    let mut out = template.clone();
    let mut factors: HashMap<Vec<u64>, DMatrix<f64>> = HashMap::new();
    for block in template.generative_blocks() {
        let n = block.members.len();
        if n == 0 {
            continue;
        }
        let household: Vec<usize> = block.members.iter().map(|&(f, _)| f).collect();
        let key: Vec<u64> = household
            .iter()
            .map(|&f| (f - household[0]) as u64)
            .chain(block.kinship.iter().map(|v| v.to_bits()))
            .collect();
        let l = match factors.get(&key) {
            Some(l) => l,
            None => {
                let v = covariance_with_households(theta, &block.kinship, &household);
                factors.entry(key).or_insert(factor(&v)?)
            }
        };
        let mut mu = DVector::zeros(n * k);
        for (j, &(f, slot)) in block.members.iter().enumerate() {
            let m = template.families[f]
                .member_at(slot)
                .ok_or_else(|| Error::InvalidPedigree("generative block names an absent member".into()))?;
            for kk in 0..k {
                mu[kk * n + j] = beta.phenotypes[kk].linear_predictor(&m.covariates[kk]);
            }
        }
        let z = DVector::from_iterator(n * k, (0..n * k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = mu + l * z;
        for (j, &(f, slot)) in block.members.iter().enumerate() {
            let fam = &mut out.families[f];
            let member = fam
                .members
                .iter_mut()
                .find(|m| m.present && m.role.slot() == slot)
                .expect("member located above");
            for kk in 0..k {
                let v = y[kk * n + j];
                member.phenotypes[kk] = Some(if spec.is_binary(kk) {
                    f64::from(u8::from(v > 0.0))
                } else {
                    v
                });
            }
        }
    }
    Ok(out)
}

/// A simulation study: one setting, one analysis, one cohort size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub setting: SettingLabel,
    /// Genetic correlation replacing the setting's target.
    pub rho: Option<f64>,
    pub analysis: Analysis,
    pub n_families: usize,
    pub replicates: usize,
    pub seed: u64,
    pub covariates: CovariateConfig,
    pub parent_missing: f64,
    /// Baseline probability that a present member's continuous phenotype
    /// is unrecorded; the log-odds rise by `MISSING_SLOPE` per unit of the
    /// third covariate.
    pub phenotype_missing: f64,
    pub fit: FitOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            setting: SettingLabel::HighHighLow,
            rho: None,
            analysis: Analysis::Continuous,
            n_families: 1000,
            replicates: 100,
            seed: 20240501,
            covariates: CovariateConfig::default(),
            parent_missing: 0.0,
            phenotype_missing: 0.0,
            fit: FitOptions::default(),
        }
    }
}

/// A misreported-relationship scenario for sensitivity runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportingScenario {
    pub rate: f64,
    pub mode: ReportingErrorMode,
}

impl SimConfig {
    /// Generative parameters, a function of the master seed only.
    pub fn truth(&self) -> Result<(FixedEffects, VarianceComponents)> {
        let mut setting = SimSetting::from(self.setting);
        if let Some(rho) = self.rho {
            setting.rho = rho;
        }
        target_setting(&setting, &mut stream_rng(self.seed, TRUTH_STREAM))
    }

    /// Parameters on the reporting scale of the configured analysis.
    pub fn reported_truth(&self) -> Result<ParamSet> {
        let (beta, theta) = self.truth()?;
        let spec = ModelSpec::new(self.analysis.kinds(), vec![N_COVARIATES; 2])?;
        let (beta, theta) = liability_scale(&spec, &beta, &theta)?;
        ParamSet::from_model(&spec, &beta, &theta)
    }

    fn replicate_stream(&self, r: usize) -> u64 {
        derive_seed(r as u64 + 1, self.n_families as u64)
    }

    /// Cohort for replicate `r`, optionally with reporting errors applied
    /// before phenotypes are drawn.
    pub fn replicate(&self, r: usize, reporting: Option<&ReportingScenario>) -> Result<Cohort> {
        let (beta, theta) = self.truth()?;
        let mut rng = stream_rng(self.seed, self.replicate_stream(r));
        let mut template = cohort_template(
            self.n_families,
            &self.analysis.kinds(),
            &self.covariates,
            self.parent_missing,
            &mut rng,
        )?;
        if let Some(s) = reporting {
            let mut err_rng = stream_rng(derive_seed(self.seed, REPORTING_TAG), self.replicate_stream(r));
            template = apply_reporting_error(&template, s.rate, s.mode, &mut err_rng)?;
        }
        let mut cohort = gen_phenotypes(&template, &beta, &theta, &mut rng)?;
        if self.phenotype_missing > 0.0 {
            let mut miss_rng = stream_rng(derive_seed(self.seed, MISSING_TAG), self.replicate_stream(r));
            mask_phenotypes(&mut cohort, self.phenotype_missing, &mut miss_rng)?;
        }
        Ok(cohort)
    }
}

/// Log-odds increase of a missing phenotype per unit of the third
/// covariate.
pub const MISSING_SLOPE: f64 = 0.8;

/// Removes continuous phenotype values of present members with
/// probability `logistic(logit(rate) + MISSING_SLOPE * x3)`.
pub fn mask_phenotypes<R: Rng + ?Sized>(cohort: &mut Cohort, rate: f64, rng: &mut R) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("missing rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(());
    }
    let base = (rate / (1.0 - rate)).ln();
    let kinds = cohort.spec.kinds.clone();
    for fam in &mut cohort.families {
        for m in fam.members.iter_mut().filter(|m| m.present) {
            for (k, kind) in kinds.iter().enumerate() {
                if *kind != PhenotypeKind::Continuous {
                    continue;
                }
                let x3 = m.covariates[k].get(2).copied().unwrap_or(0.0);
                let p = 1.0 / (1.0 + (-(base + MISSING_SLOPE * x3)).exp());
                if rng.random::<f64>() < p {
                    m.phenotypes[k] = None;
                }
            }
        }
    }
    Ok(())
}

/// How each replicate cohort is analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// Both phenotypes fitted jointly.
    Joint,
    /// Each phenotype fitted on its own.
    Separate,
}

/// Fits the phenotypes of `cohort` one at a time, relabelling the
/// single-phenotype parameters with their index in the joint model. The
/// shared-environment SD of phenotype `k > 1` appears as `sigma_b{k}`.
pub fn fit_separately(cohort: &Cohort, opts: &FitOptions) -> Result<ParamSet> {
    let mut out = ParamSet::default();
    for k in 0..cohort.spec.k() {
        let sub = cohort.select_phenotypes(&[k])?;
        let est = fit(&sub, opts)?;
        for mut p in est.params()?.params {
            let label = k + 1;
            p.name = match p.name.as_str() {
                "alpha1" => format!("alpha{label}"),
                "sigma1" => format!("sigma{label}"),
                "sigma_eps1" => format!("sigma_eps{label}"),
                "h2_1" => format!("h2_{label}"),
                "sigma_b" if k > 0 => format!("sigma_b{label}"),
                "sigma_b" => "sigma_b".to_string(),
                name => match name.strip_prefix("beta1_") {
                    Some(j) => format!("beta{label}_{j}"),
                    None => continue,
                },
            };
            out.params.push(p);
        }
    }
    Ok(out)
}

/// Outcome of one replicate.
#[derive(Debug, Clone)]
pub enum ReplicateOutcome {
    Fitted(ParamSet),
    Failed(String),
}

/// Runs every replicate of `cfg` in parallel. Results are ordered by
/// replicate index and independent of the worker count.
pub fn run_replicates(cfg: &SimConfig, mode: FitMode, reporting: Option<&ReportingScenario>) -> Vec<ReplicateOutcome> {
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let result = cfg.replicate(r, reporting).and_then(|c| match mode {
                FitMode::Joint => fit(&c, &cfg.fit)?.params(),
                FitMode::Separate => fit_separately(&c, &cfg.fit),
            });
            match result {
                Ok(p) => ReplicateOutcome::Fitted(p),
                Err(e) => {
                    log::warn!("replicate {r} failed: {e}");
                    ReplicateOutcome::Failed(e.to_string())
                }
            }
        })
        .collect()
}

/// Per-parameter simulation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub block: ParamBlock,
    pub truth: f64,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Replicates with a finite estimate.
    pub n: usize,
}

impl ParamSummary {
    /// Large-sample standard error of the median.
    pub fn median_se(&self) -> f64 {
        (std::f64::consts::PI / 2.0).sqrt() * self.sd / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    /// Replicate-major estimates, one row per successful replicate.
    pub estimates: Vec<Vec<f64>>,
    pub summaries: Vec<ParamSummary>,
    pub failures: Vec<String>,
}

/// Lower-median of a finite sample.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-column summaries of replicate-major `rows`; non-finite entries are
/// skipped.
fn summarize(names: &[String], blocks: &[ParamBlock], truth: &[f64], rows: &[Vec<f64>]) -> Vec<ParamSummary> {
    (0..names.len())
        .map(|j| {
            let vals: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| v.is_finite()).collect();
            let n = vals.len();
            let (mean, sd, rmse, med) = if n == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                let mse = vals.iter().map(|v| (v - truth[j]).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt(), mse.sqrt(), median(&vals))
            };
            ParamSummary {
                name: names[j].clone(),
                block: blocks[j],
                truth: truth[j],
                median: med,
                mean,
                sd,
                rmse,
                n,
            }
        })
        .collect()
}

/// RMSE and location summaries of replicate estimates against the truth.
/// Parameters pinned by the model are skipped.
pub fn rmse_table(truth: &ParamSet, estimates: &[ParamSet]) -> Result<SimReport> {
    let tracked: Vec<_> = truth.params.iter().filter(|p| !p.fixed).collect();
    let names: Vec<String> = tracked.iter().map(|p| p.name.clone()).collect();
    let mut rows = Vec::with_capacity(estimates.len());
    for est in estimates {
        let row = names
            .iter()
            .map(|n| {
                est.get(n)
                    .ok_or_else(|| Error::Dimension(format!("estimate lacks parameter `{n}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let truth_values: Vec<f64> = tracked.iter().map(|p| p.value).collect();
    let blocks: Vec<ParamBlock> = tracked.iter().map(|p| p.block).collect();
    let summaries = summarize(&names, &blocks, &truth_values, &rows);
    Ok(SimReport {
        truth: truth_values,
        names,
        estimates: rows,
        summaries,
        failures: Vec::new(),
    })
}

/// Fits all replicates of `cfg` and tabulates them against the truth.
pub fn run_simulation(cfg: &SimConfig, mode: FitMode, reporting: Option<&ReportingScenario>) -> Result<SimReport> {
    let truth = cfg.reported_truth()?;
    let mut fitted = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in run_replicates(cfg, mode, reporting).into_iter().enumerate() {
        match o {
            ReplicateOutcome::Fitted(p) => fitted.push(p),
            ReplicateOutcome::Failed(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    let truth = match mode {
        FitMode::Joint => truth,
        FitMode::Separate => {
            // keep the parameters a single-phenotype fit reports
            let names: Vec<String> = fitted
                .first()
                .map(|p| p.params.iter().map(|q| q.name.clone()).collect())
                .unwrap_or_default();
            ParamSet {
                params: truth.params.into_iter().filter(|p| names.contains(&p.name)).collect(),
            }
        }
    };
    let mut report = rmse_table(&truth, &fitted)?;
    report.failures = failures;
    Ok(report)
}

/// Percent RMSE differences `100 (a - b) / a` per shared parameter, with
/// block and overall averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentDifference {
    pub rows: Vec<(String, ParamBlock, f64)>,
    pub blocks: Vec<(ParamBlock, f64)>,
    pub average: f64,
}

impl PercentDifference {
    pub fn block(&self, block: ParamBlock) -> Option<f64> {
        self.blocks.iter().find(|(b, _)| *b == block).map(|(_, v)| *v)
    }
}

pub fn percent_difference(a: &SimReport, b: &SimReport) -> PercentDifference {
    let mut rows = Vec::new();
    for sa in &a.summaries {
        let Some(sb) = b.summaries.iter().find(|s| s.name == sa.name) else {
            continue;
        };
        if sa.rmse > 0.0 && sa.rmse.is_finite() && sb.rmse.is_finite() {
            rows.push((sa.name.clone(), sa.block, 100.0 * (sa.rmse - sb.rmse) / sa.rmse));
        }
    }
    let mean = |it: Vec<f64>| {
        if it.is_empty() {
            f64::NAN
        } else {
            it.iter().sum::<f64>() / it.len() as f64
        }
    };
    let blocks = [ParamBlock::Beta, ParamBlock::Theta, ParamBlock::Heritability]
        .into_iter()
        .filter_map(|blk| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.1 == blk).map(|r| r.2).collect();
            (!vals.is_empty()).then(|| (blk, mean(vals)))
        })
        .collect();
    let average = mean(rows.iter().map(|r| r.2).collect());
    PercentDifference { rows, blocks, average }
}

fn is_secondary_loading(name: &str) -> bool {
    name.strip_prefix("sigma_b")
        .is_some_and(|k| !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()))
}

/// `report` with the shared-environment loadings after the first replaced
/// by their magnitudes, the scale a single-phenotype fit identifies.
pub fn loading_magnitudes(report: &SimReport) -> SimReport {
    let signed: Vec<bool> = report.names.iter().map(|n| is_secondary_loading(n)).collect();
    let fold = |row: &Vec<f64>| -> Vec<f64> {
        row.iter()
            .zip(&signed)
            .map(|(v, s)| if *s { v.abs() } else { *v })
            .collect()
    };
    let estimates: Vec<Vec<f64>> = report.estimates.iter().map(fold).collect();
    let truth = fold(&report.truth);
    let blocks: Vec<ParamBlock> = report.summaries.iter().map(|s| s.block).collect();
    SimReport {
        summaries: summarize(&report.names, &blocks, &truth, &estimates),
        names: report.names.clone(),
        truth,
        estimates,
        failures: report.failures.clone(),
    }
}

/// RMSE gain of the joint fit over single-phenotype fits, on the scale both
/// identify.
pub fn integrated_vs_separated(joint: &SimReport, separate: &SimReport) -> PercentDifference {
    percent_difference(separate, &loading_magnitudes(joint))
}

/// Clean-versus-perturbed comparison: identical replicate cohorts, with the
/// perturbed ones generated under misreported relationships.
pub fn sensitivity(cfg: &SimConfig, scenario: &ReportingScenario) -> Result<(SimReport, SimReport, PercentDifference)> {
    let clean = run_simulation(cfg, FitMode::Joint, None)?;
    let perturbed = run_simulation(cfg, FitMode::Joint, Some(scenario))?;
    let diff = percent_difference(&clean, &perturbed);
    Ok((clean, perturbed, diff))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.10e}")
}

/// `parameter, block, truth, median, mean, sd, rmse, n`.
pub fn write_report_csv<W: Write>(report: &SimReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "block", "truth", "median", "mean", "sd", "rmse", "n"])?;
    for s in &report.summaries {
        w.write_record([
            s.name.clone(),
            s.block.label().to_string(),
            fmt_f64(s.truth),
            fmt_f64(s.median),
            fmt_f64(s.mean),
            fmt_f64(s.sd),
            fmt_f64(s.rmse),
            s.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `replicate, <parameter>...`, one row per successful replicate.
pub fn write_estimates_csv<W: Write>(report: &SimReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once("replicate".to_string()).chain(report.names.iter().cloned()))?;
    for (r, row) in report.estimates.iter().enumerate() {
        w.write_record(std::iter::once(r.to_string()).chain(row.iter().map(|v| fmt_f64(*v))))?;
    }
    w.flush()?;
    Ok(())
}

/// `row, block, percent_difference` with the per-block and overall
/// averages appended as `Beta`, `Theta`, `Heritability`, `Average` rows.
pub fn write_percent_difference_csv<W: Write>(diff: &PercentDifference, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "block", "percent_difference"])?;
    for (name, block, v) in &diff.rows {
        w.write_record([name.clone(), block.label().to_string(), fmt_f64(*v)])?;
    }
    for (block, v) in &diff.blocks {
        w.write_record([block.label().to_string(), block.label().to_string(), fmt_f64(*v)])?;
    }
    w.write_record(["Average".to_string(), "All".to_string(), fmt_f64(diff.average)])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::heritability;

    #[test]
    fn later_loadings_fold_to_magnitudes() {
        let names: Vec<String> = ["sigma_b", "sigma_b2", "sigma1"].map(String::from).to_vec();
        let blocks = [ParamBlock::Theta; 3];
        let truth = [0.3, 0.2, 1.0];
        let rows = vec![vec![0.3, -0.2, 1.1], vec![0.3, 0.2, 0.9]];
        let report = SimReport {
            summaries: summarize(&names, &blocks, &truth, &rows),
            names,
            truth: truth.to_vec(),
            estimates: rows,
            failures: vec![],
        };
        assert!((report.summaries[1].rmse - 0.08_f64.sqrt()).abs() < 1e-12);
        let folded = loading_magnitudes(&report);
        assert_eq!(folded.summaries[1].rmse, 0.0);
        assert_eq!(folded.summaries[2], report.summaries[2]);
        assert!(
            is_secondary_loading("sigma_b12")
                && !is_secondary_loading("sigma_b")
                && !is_secondary_loading("sigma_eps1")
        );
    }

    #[test]
    fn labels_round_trip() {
        for l in SettingLabel::ALL {
            assert_eq!(l.as_str().parse::<SettingLabel>().unwrap(), l);
        }
        assert_eq!(
            "(High, High, Low)".parse::<SettingLabel>().unwrap(),
            SettingLabel::HighHighLow
        );
        assert!("high,medium,low".parse::<SettingLabel>().is_err());
    }

    #[test]
    fn targets_are_hit_exactly() {
        for l in SettingLabel::ALL {
            let s = SimSetting::from(l);
            let (_, theta) = target_setting(&s, &mut stream_rng(9, 0)).unwrap();
            assert!((heritability(&theta, 0).unwrap() - s.h2[0]).abs() < 1e-12);
            assert!((heritability(&theta, 1).unwrap() - s.h2[1]).abs() < 1e-12);
            assert_eq!(theta.rho[(0, 1)], s.rho);
        }
        let (b1, t1) = target_setting(&SimSetting::from(SettingLabel::HighHighLow), &mut stream_rng(3, 0)).unwrap();
        let (b2, t2) = target_setting(&SimSetting::from(SettingLabel::HighHighLow), &mut stream_rng(3, 0)).unwrap();
        assert_eq!((b1, t1), (b2, t2));
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let mut s = SimSetting::from(SettingLabel::LowLowLow);
        s.h2[0] = 1.0;
        assert!(target_setting(&s, &mut stream_rng(1, 0)).is_err());
        s.h2[0] = 0.3;
        s.rho = 1.5;
        assert!(target_setting(&s, &mut stream_rng(1, 0)).is_err());
    }

    #[test]
    fn covariate_laws() {
        let n = 100_000;
        let x = gen_covariates(n, &CovariateConfig::default(), &mut stream_rng(5, 1)).unwrap();
        let se_bern = (0.25 / n as f64).sqrt();
        assert!((x.column(0).mean() - 0.5).abs() < 4.0 * se_bern);
        assert!((x.column(1).mean() - 0.5).abs() < 4.0 * se_bern);
        assert!(x.column(2).mean().abs() < 4.0 / (n as f64).sqrt());
        assert!((x.column(3).mean() - 1.0).abs() < 4.0 / (n as f64).sqrt());
        let y = gen_covariates(10, &CovariateConfig::default(), &mut stream_rng(5, 1)).unwrap();
        assert_eq!(y.row(3), x.row(3));
        assert!(gen_covariates(0, &CovariateConfig::default(), &mut stream_rng(5, 1)).is_err());
    }

    #[test]
    fn liability_truth_divides_binary_phenotypes() {
        let (beta, theta) =
            target_setting(&SimSetting::from(SettingLabel::HighHighLow), &mut stream_rng(2, 0)).unwrap();
        let spec = ModelSpec::new(Analysis::Mixed.kinds(), vec![4, 4]).unwrap();
        let (b, t) = liability_scale(&spec, &beta, &theta).unwrap();
        assert!((t.sigma_eps[0] - 1.0).abs() < 1e-15);
        assert_eq!(t.sigma_eps[1], theta.sigma_eps[1]);
        assert!((b.phenotypes[0].intercept * theta.sigma_eps[0] - beta.phenotypes[0].intercept).abs() < 1e-14);
        assert!((heritability(&t, 0).unwrap() - 0.61).abs() < 1e-12);
    }

    #[test]
    fn template_drops_at_most_one_parent() {
        let c = cohort_template(
            400,
            &Analysis::Continuous.kinds(),
            &CovariateConfig::default(),
            0.3,
            &mut stream_rng(4, 2),
        )
        .unwrap();
        let missing = c
            .families
            .iter()
            .filter(|f| f.members.iter().any(|m| !m.present))
            .count();
        assert!(missing > 80 && missing < 160);
        for f in &c.families {
            assert!(f.members.iter().filter(|m| !m.present).all(|m| m.role.is_parent()));
            assert!(f.members.iter().filter(|m| !m.present).count() <= 1);
        }
    }

    #[test]
    fn binary_slots_are_indicators() {
        let cfg = SimConfig {
            analysis: Analysis::Mixed,
            n_families: 50,
            ..SimConfig::default()
        };
        let c = cfg.replicate(0, None).unwrap();
        for f in &c.families {
            for m in &f.members {
                let z = m.phenotypes[0].unwrap();
                assert!(z == 0.0 || z == 1.0);
                assert!(m.phenotypes[1].is_some());
            }
        }
        let again = cfg.replicate(0, None).unwrap();
        assert_eq!(c.families, again.families);
    }

    #[test]
    fn perfect_estimates_have_zero_rmse() {
        let truth = SimConfig::default().reported_truth().unwrap();
        let rep = rmse_table(&truth, &[truth.clone(), truth.clone()]).unwrap();
        assert!(rep.summaries.iter().all(|s| s.rmse == 0.0 && s.sd == 0.0));
        let mut shifted = truth.clone();
        for p in &mut shifted.params {
            p.value += 0.5;
        }
        let rep2 = rmse_table(&truth, &[shifted]).unwrap();
        assert!(rep2.summaries.iter().all(|s| (s.rmse - 0.5).abs() < 1e-12));
        let self_diff = percent_difference(&rep2, &rep2);
        assert!(self_diff.rows.iter().all(|r| r.2 == 0.0));
        assert_eq!(self_diff.average, 0.0);
        // halving the error is a 50% decrease in every block
        let mut half = truth.clone();
        for p in &mut half.params {
            p.value += 0.25;
        }
        let d = percent_difference(&rep2, &rmse_table(&truth, &[half]).unwrap());
        assert!((d.average - 50.0).abs() < 1e-9);
        assert!((d.block(ParamBlock::Theta).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn median_of_even_and_odd_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
