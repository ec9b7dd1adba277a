//! Parametric bootstrap intervals and coverage experiments.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, EstimateResult, FitOptions};
use crate::params::{ParamBlock, ParamSet};
use crate::pedigree::Cohort;
use crate::rng::{derive_seed, stream_rng};
use crate::simulate::{gen_phenotypes, SimConfig};

/// Largest tolerated fraction of failed refits.
pub const MAX_FAILURE_RATE: f64 = 0.2;
const BOOTSTRAP_TAG: u64 = 0xB007;
const COVERAGE_TAG: u64 = 0xC0FE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub parameter: String,
    pub block: ParamBlock,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub boot_sd: f64,
    pub n_success: usize,
}

impl BootstrapInterval {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }

    pub fn width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    /// Requested replicate count.
    pub n: usize,
    pub seed: u64,
    pub intervals: Vec<BootstrapInterval>,
    /// Refit estimates in interval order; `None` for failed refits.
    pub replicates: Vec<Option<Vec<f64>>>,
    pub failures: Vec<String>,
}

impl BootstrapReport {
    pub fn n_success(&self) -> usize {
        self.replicates.iter().filter(|r| r.is_some()).count()
    }

    pub fn failure_rate(&self) -> f64 {
        self.failures.len() as f64 / self.n as f64
    }

    pub fn interval(&self, name: &str) -> Option<&BootstrapInterval> {
        self.intervals.iter().find(|i| i.parameter == name)
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (`(n - 1) p` positioning). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws one synthetic cohort from the fitted model: phenotypes are
/// regenerated for every originally observed slot, under the nominal
/// relationships, and binary slots are dichotomized at zero.
pub fn bootstrap_cohort(cohort: &Cohort, fitted: &EstimateResult, stream: u64, seed: u64) -> Result<Cohort> {
    let mut template = cohort.clone();
    template.reporting_errors.clear();
    let mut rng = stream_rng(derive_seed(seed, BOOTSTRAP_TAG), stream);
    let mut out = gen_phenotypes(&template, &fitted.beta, &fitted.theta, &mut rng)?;
    for (fo, fi) in out.families.iter_mut().zip(&cohort.families) {
        for (mo, mi) in fo.members.iter_mut().zip(&fi.members) {
            for (yo, yi) in mo.phenotypes.iter_mut().zip(&mi.phenotypes) {
                if yi.is_none() {
                    *yo = None;
                }
            }
        }
    }
    Ok(out)
}

fn free_params(set: &ParamSet) -> Vec<(String, ParamBlock, f64)> {
    set.params
        .iter()
        .filter(|p| !p.fixed)
        .map(|p| (p.name.clone(), p.block, p.value))
        .collect()
}

fn summarize(point: &[(String, ParamBlock, f64)], replicates: &[Option<Vec<f64>>]) -> Vec<BootstrapInterval> {
    point
        .iter()
        .enumerate()
        .map(|(j, (name, block, estimate))| {
            let mut values: Vec<f64> = replicates
                .iter()
                .flatten()
                .map(|r| r[j])
                .filter(|v| v.is_finite())
                .collect();
            values.sort_by(f64::total_cmp);
            let n = values.len();
            let (ci_lo, ci_hi, boot_sd) = if n == 0 {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = values.iter().sum::<f64>() / n as f64;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
                (quantile(&values, 0.025), quantile(&values, 0.975), var.sqrt())
            };
            BootstrapInterval {
                parameter: name.clone(),
                block: *block,
                estimate: *estimate,
                ci_lo,
                ci_hi,
                boot_sd,
                n_success: n,
            }
        })
        .collect()
}

/// Percentile bootstrap: `n` cohorts drawn from the fitted model, each
/// refitted with `opts`. Replicate `r` uses its own random stream, so the
/// report does not depend on the number of worker threads.
pub fn parametric_bootstrap(
    cohort: &Cohort,
    fitted: &EstimateResult,
    n: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<BootstrapReport> {
    if n < 2 {
        return Err(Error::Domain(format!("bootstrap needs at least 2 replicates, got {n}")));
    }
    if !fitted.converged {
        return Err(Error::Domain("bootstrap needs a converged fit".into()));
    }
    if fitted.spec != cohort.spec {
        return Err(Error::Dimension("fitted model does not match the cohort".into()));
    }
    let point = free_params(&fitted.params()?);
    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let refit = bootstrap_cohort(cohort, fitted, r as u64, seed)
                .and_then(|c| fit(&c, opts))
                .and_then(|f| f.params());
            match refit {
                Ok(set) => {
                    let values = free_params(&set);
                    Ok(point
                        .iter()
                        .map(|(name, _, _)| values.iter().find(|v| &v.0 == name).map_or(f64::NAN, |v| v.2))
                        .collect())
                }
                Err(e) => {
                    log::warn!("bootstrap replicate {r} failed: {e}");
                    Err(format!("replicate {r}: {e}"))
                }
            }
        })
        .collect();
    let mut replicates = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(v) => replicates.push(Some(v)),
            Err(msg) => {
                replicates.push(None);
                failures.push(msg);
            }
        }
    }
    let report = BootstrapReport {
        n,
        seed,
        intervals: summarize(&point, &replicates),
        replicates,
        failures,
    };
    if report.failure_rate() > MAX_FAILURE_RATE {
        return Err(Error::InferenceUnreliable {
            failures: report.failures.len(),
            total: n,
            partial: Box::new(report),
        });
    }
    Ok(report)
}

/// Report CSV: `parameter, estimate, ci_lo, ci_hi, boot_sd, n_success`.
pub fn write_bootstrap_csv<W: Write>(report: &BootstrapReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "estimate", "ci_lo", "ci_hi", "boot_sd", "n_success"])?;
    for i in &report.intervals {
        w.write_record([
            i.parameter.clone(),
            i.estimate.to_string(),
            i.ci_lo.to_string(),
            i.ci_hi.to_string(),
            i.boot_sd.to_string(),
            i.n_success.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub parameter: String,
    pub block: ParamBlock,
    pub truth: f64,
    pub covered: usize,
    /// Outer replicates with an interval for this parameter.
    pub runs: usize,
    pub coverage: f64,
    pub median_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub outer: usize,
    pub bootstrap: usize,
    pub rows: Vec<CoverageRow>,
    pub failures: Vec<String>,
}

impl CoverageTable {
    pub fn row(&self, name: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.parameter == name)
    }
}

/// `cfg.replicates` independent simulate, fit and bootstrap runs; for each
/// parameter, the fraction of percentile intervals containing the truth.
/// Runs whose fit or bootstrap fails are excluded and listed.
pub fn coverage_experiment(cfg: &SimConfig, n_boot: usize) -> Result<CoverageTable> {
    if cfg.replicates == 0 || n_boot == 0 {
        return Err(Error::Domain(
            "coverage needs at least one outer and one bootstrap replicate".into(),
        ));
    }
    let truth = cfg.reported_truth()?;
    let runs: Vec<std::result::Result<BootstrapReport, String>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let run = cfg.replicate(r, None).and_then(|cohort| {
                let fitted = fit(&cohort, &cfg.fit)?;
                parametric_bootstrap(
                    &cohort,
                    &fitted,
                    n_boot.max(2),
                    derive_seed(cfg.seed, COVERAGE_TAG + r as u64),
                    &cfg.fit,
                )
            });
            run.map_err(|e| {
                log::warn!("coverage replicate {r} failed: {e}");
                format!("replicate {r}: {e}")
            })
        })
        .collect();
    let mut failures = Vec::new();
    let reports: Vec<BootstrapReport> = runs
        .into_iter()
        .filter_map(|r| r.map_err(|e| failures.push(e)).ok())
        .collect();
    let rows = truth
        .params
        .iter()
        .filter(|p| !p.fixed)
        .map(|p| {
            let intervals: Vec<&BootstrapInterval> = reports
                .iter()
                .filter_map(|rep| rep.interval(&p.name))
                .filter(|i| i.ci_lo.is_finite() && i.ci_hi.is_finite())
                .collect();
            let covered = intervals.iter().filter(|i| i.covers(p.value)).count();
            let mut widths: Vec<f64> = intervals.iter().map(|i| i.width()).collect();
            widths.sort_by(f64::total_cmp);
            CoverageRow {
                parameter: p.name.clone(),
                block: p.block,
                truth: p.value,
                covered,
                runs: intervals.len(),
                coverage: if intervals.is_empty() {
                    f64::NAN
                } else {
                    covered as f64 / intervals.len() as f64
                },
                median_width: if widths.is_empty() {
                    f64::NAN
                } else {
                    quantile(&widths, 0.5)
                },
            }
        })
        .collect();
    Ok(CoverageTable {
        outer: cfg.replicates,
        bootstrap: n_boot,
        rows,
        failures,
    })
}

pub fn write_coverage_csv<W: Write>(table: &CoverageTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "parameter",
        "block",
        "truth",
        "covered",
        "runs",
        "coverage",
        "median_width",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.parameter.clone(),
            r.block.label().to_string(),
            r.truth.to_string(),
            r.covered.to_string(),
            r.runs.to_string(),
            r.coverage.to_string(),
            r.median_width.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
