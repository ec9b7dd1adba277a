use coherit::estimate::{fit, EstimateResult};
use coherit::inference::{
    coverage_experiment, parametric_bootstrap, write_bootstrap_csv, write_coverage_csv, BootstrapReport,
};
use coherit::pedigree::{read_cohort_csv, write_cohort_csv};
use coherit::rng::{derive_seed, stream_rng};
use coherit::simulate::{
    integrated_vs_separated, percent_difference, run_simulation, sensitivity, write_estimates_csv,
    write_percent_difference_csv, write_report_csv, FitMode, SimReport,
};
use coherit::weights::{
    apply_weights, assign_family_weights, fit_missingness, member_category, member_design, read_weights_csv,
    write_weights_csv,
};
use coherit::{Cohort, Error};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{read_file, Outputs};

const WEIGHTS_TAG: u64 = 0x5745_4947;

/// The cohort analysed by single-cohort commands: the configured input
/// file, or replicate 0 of the simulation.
fn load_cohort(cfg: &RunConfig, out: &mut Outputs) -> CliResult<Cohort> {
    let mut cohort = match &cfg.input {
        Some(path) => {
            let data = read_file(path)?;
            out.record_input(path, &data);
            read_cohort_csv(data.as_slice(), &cfg.kinds())?
        }
        None => cfg.simulation.replicate(0, None)?,
    };
    if let Some(path) = &cfg.weights {
        let data = read_file(path)?;
        out.record_input(path, &data);
        let rows = read_weights_csv(data.as_slice())?;
        cohort = apply_weights(&cohort, rows.iter().map(|(id, w)| (id.as_str(), *w)))?;
    }
    Ok(cohort)
}

pub fn simulate(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let sim = &cfg.simulation;
    let cohorts: Vec<coherit::Result<Vec<u8>>> = (0..sim.replicates)
        .into_par_iter()
        .map(|r| {
            let cohort = sim.replicate(r, None)?;
            let mut buf = Vec::new();
            write_cohort_csv(&cohort, &mut buf)?;
            Ok(buf)
        })
        .collect();
    for (r, data) in cohorts.into_iter().enumerate() {
        out.write(&format!("cohort_{:04}.csv", r + 1), &data?)?;
    }
    out.write_json("truth.json", &sim.reported_truth()?.to_json())?;
    Ok(())
}

fn fitted(cfg: &RunConfig, out: &mut Outputs) -> CliResult<(Cohort, EstimateResult)> {
    let cohort = load_cohort(cfg, out)?;
    let est = fit(&cohort, &cfg.simulation.fit)?;
    out.write_json("estimate.json", &est.to_json()?)?;
    Ok((cohort, est))
}

pub fn fit_cmd(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    fitted(cfg, out).map(|_| ())
}

fn write_bootstrap(out: &mut Outputs, report: &BootstrapReport, json_name: &str) -> CliResult<()> {
    out.write_with("bootstrap.csv", |w| write_bootstrap_csv(report, w))?;
    out.write_json(json_name, report)
}

pub fn bootstrap(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let (cohort, est) = fitted(cfg, out)?;
    match parametric_bootstrap(&cohort, &est, cfg.bootstrap, cfg.simulation.seed, &cfg.simulation.fit) {
        Ok(report) => write_bootstrap(out, &report, "bootstrap.json"),
        Err(Error::InferenceUnreliable {
            failures,
            total,
            partial,
        }) => {
            write_bootstrap(out, &partial, "bootstrap_partial.json")?;
            Err(Error::InferenceUnreliable {
                failures,
                total,
                partial,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn coverage(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let table = coverage_experiment(&cfg.simulation, cfg.bootstrap)?;
    out.write_with("coverage.csv", |w| write_coverage_csv(&table, w))?;
    out.write_json("coverage.json", &table)
}

fn write_sim_report(out: &mut Outputs, stem: &str, report: &SimReport) -> CliResult<()> {
    out.write_with(&format!("{stem}.csv"), |w| write_report_csv(report, w))?;
    out.write_with(&format!("{stem}_estimates.csv"), |w| write_estimates_csv(report, w))
}

pub fn sensitivity_cmd(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let (clean, perturbed, diff) = sensitivity(&cfg.simulation, &cfg.reporting())?;
    write_sim_report(out, "report_clean", &clean)?;
    write_sim_report(out, "report_perturbed", &perturbed)?;
    out.write_with("percent_difference.csv", |w| write_percent_difference_csv(&diff, w))?;
    out.write_json(
        "sensitivity.json",
        &json!({
            "clean_failures": clean.failures,
            "perturbed_failures": perturbed.failures,
            "percent_difference": diff,
        }),
    )
}

#[derive(Serialize)]
struct SizeSummary {
    families: usize,
    joint_failures: Vec<String>,
    separate_failures: Vec<String>,
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> CliResult<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::Core(Error::Io(e.into_error())))
}

/// Simulation tables per cohort size: parameter summaries for joint and
/// separate fits, RMSE change between consecutive sizes, and the joint
/// fit's RMSE gain over separate fits.
pub fn report(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let mut runs = Vec::new();
    for &n in &cfg.families {
        let sim = coherit::simulate::SimConfig {
            n_families: n,
            ..cfg.simulation.clone()
        };
        let joint = run_simulation(&sim, FitMode::Joint, None)?;
        let separate = run_simulation(&sim, FitMode::Separate, None)?;
        runs.push((n, joint, separate));
    }

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        "families",
        "fit",
        "parameter",
        "block",
        "truth",
        "median",
        "mean",
        "sd",
        "rmse",
        "n",
    ])?;
    for (n, joint, separate) in &runs {
        for (label, rep) in [("joint", joint), ("separate", separate)] {
            for s in &rep.summaries {
                table.write_record([
                    n.to_string(),
                    label.to_string(),
                    s.name.clone(),
                    s.block.label().to_string(),
                    s.truth.to_string(),
                    s.median.to_string(),
                    s.mean.to_string(),
                    s.sd.to_string(),
                    s.rmse.to_string(),
                    s.n.to_string(),
                ])?;
            }
        }
    }
    out.write("table1.csv", &finish_csv(table)?)?;

    let mut change = csv::Writer::from_writer(Vec::new());
    change.write_record(["from_families", "to_families", "row", "block", "percent_decrease"])?;
    for pair in runs.windows(2) {
        let diff = percent_difference(&pair[0].1, &pair[1].1);
        let (from, to) = (pair[0].0.to_string(), pair[1].0.to_string());
        for (name, block, v) in &diff.rows {
            change.write_record([&from, &to, name, block.label(), &v.to_string()])?;
        }
        for (block, v) in &diff.blocks {
            change.write_record([&from, &to, block.label(), block.label(), &v.to_string()])?;
        }
        change.write_record([&from, &to, "Average", "All", &diff.average.to_string()])?;
    }
    out.write("rmse_change.csv", &finish_csv(change)?)?;

    let mut gain = csv::Writer::from_writer(Vec::new());
    gain.write_record(["families", "row", "block", "percent_difference"])?;
    for (n, joint, separate) in &runs {
        let diff = integrated_vs_separated(joint, separate);
        let n = n.to_string();
        for (name, block, v) in &diff.rows {
            gain.write_record([&n, name, block.label(), &v.to_string()])?;
        }
        for (block, v) in &diff.blocks {
            gain.write_record([&n, block.label(), block.label(), &v.to_string()])?;
        }
        gain.write_record([&n, "Average", "All", &diff.average.to_string()])?;
    }
    out.write("integrated_vs_separated.csv", &finish_csv(gain)?)?;

    let summary: Vec<SizeSummary> = runs
        .iter()
        .map(|(n, j, s)| SizeSummary {
            families: *n,
            joint_failures: j.failures.clone(),
            separate_failures: s.failures.clone(),
        })
        .collect();
    out.write_json("report.json", &summary)
}

/// Fits the missingness model on every present member, then weights each
/// family by one randomly chosen parent.
pub fn weights(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let cohort = load_cohort(cfg, out)?;
    let members: Vec<_> = cohort
        .families
        .iter()
        .flat_map(|f| f.members.iter().filter(|m| m.present))
        .collect();
    let p = members.first().map_or(0, |m| member_design(m).len());
    let design = DMatrix::from_fn(members.len(), p, |i, j| member_design(members[i])[j]);
    let outcome: Vec<usize> = members.iter().map(|m| member_category(m, cfg.missingness)).collect();
    let names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    let model = fit_missingness(&design, &outcome, &names, cfg.missingness)?;
    let mut rng = stream_rng(derive_seed(cfg.simulation.seed, WEIGHTS_TAG), 0);
    let (weighted, assignment) = assign_family_weights(&cohort, &model, &cfg.clip, &mut rng)?;
    out.write_with("weights.csv", |w| write_weights_csv(&assignment, w))?;
    out.write_with("weighted_cohort.csv", |w| write_cohort_csv(&weighted, w))?;
    out.write_json(
        "weights.json",
        &json!({
            "model": model,
            "clipped_families": assignment.n_clipped(),
            "child_fallback_families": assignment.n_from_child(),
            "assignment": assignment,
        }),
    )
}
