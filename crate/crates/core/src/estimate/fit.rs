use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{build_covariance, FixedEffects, ModelSpec, PhenotypeKind, VarianceComponents};
use crate::pedigree::{Cohort, KinshipMatrix};

use super::gee::{gls, slot_covariance};
use super::latent::{latent_moments, LatentContext};
use super::moments::{residual_moments, MomentSystem, PairClass, Prepared};
use super::probit::init_probit;
use super::solver::{solve_theta_from, theta_from_vector, theta_vector, SolveReport};
use super::{CrossMoment, Diagnostics, EstimateResult, FitOptions};

/// Largest elementwise change relative to the new magnitude.
fn relative_change(old: &DVector<f64>, new: &DVector<f64>) -> f64 {
    old.iter()
        .zip(new.iter())
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

fn record_solve(diag: &mut Diagnostics, rep: &SolveReport) {
    diag.objective_history.push(rep.objective);
    diag.boundary = rep.boundary.clone();
    diag.gamma_unidentified = rep.gamma_unidentified;
}

/// Continuous phenotypes: alternate unstructured covariance and GLS until
/// the mean converges, solve the moment equations, then refit the mean
/// against the structured covariance.
pub fn fit_continuous(cohort: &Cohort, opts: &FitOptions) -> Result<EstimateResult> {
    if cohort.spec.kinds.iter().any(|k| *k != PhenotypeKind::Continuous) {
        return Err(Error::Domain("continuous fit needs continuous phenotypes".into()));
    }
    let data = Prepared::new(cohort)?;
    let mut diag = Diagnostics::default();
    let (mut beta, mut ridged) = gls(&data, &DMatrix::identity(data.n_flat, data.n_flat), None)?;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let resid = data.residuals(&beta);
        let s = slot_covariance(&data, &resid);
        let (next, r) = gls(&data, &s, None)?;
        ridged |= r;
        let change = relative_change(&beta.to_vector(), &next.to_vector());
        beta = next;
        if change <= opts.tolerance {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(Error::NonConvergence {
                iterations,
                best_residual: change,
                detail: "mean-model iteration".into(),
            });
        }
    }
    let system = residual_moments(&data, &cohort.kinship_template, &beta);
    diag.dropped_equations = system.dropped.clone();
    let rep = solve_theta_from(&system, &cohort.spec, None, opts.restarts)?;
    record_solve(&mut diag, &rep);
    let v = build_covariance(&rep.theta, &cohort.kinship_template)?;
    let (beta, r) = gls(&data, &v, None)?;
    diag.ridge_applied = ridged | r;
    Ok(EstimateResult::assemble(
        &cohort.spec,
        beta,
        rep.theta,
        iterations,
        rep.objective,
        diag,
    ))
}

/// Starting values for the latent models: probit (binary) or least squares
/// (continuous) means, and variance components from the indicators treated
/// as continuous, rescaled to the unit-error liability scale.
fn latent_start(cohort: &Cohort, data: &Prepared, opts: &FitOptions) -> Result<(FixedEffects, VarianceComponents)> {
    let spec = &cohort.spec;
    let (linear, _) = gls(data, &DMatrix::identity(data.n_flat, data.n_flat), None)?;
    let as_continuous = ModelSpec::new(vec![PhenotypeKind::Continuous; spec.k()], spec.covariate_dim.clone())?;
    let system = residual_moments(data, &cohort.kinship_template, &linear);
    let raw = solve_theta_from(&system, &as_continuous, None, opts.restarts)?.theta;
    let mut shared = raw.sigma_shared.clone();
    let mut genetic = raw.sigma_g.clone();
    let mut eps = raw.sigma_eps.clone();
    let mut beta = linear;
    for k in 0..spec.k() {
        if !spec.is_binary(k) {
            continue;
        }
        let total = raw.total_variance(k);
        if total > 0.0 {
            let share = raw.sigma_eps[k].powi(2) / total;
            let scale = (1.0 / share.max(0.2) / total).sqrt();
            shared[k] *= scale;
            genetic[k] *= scale;
        }
        eps[k] = 1.0;
        let liability_sd = (shared[k].powi(2) + genetic[k].powi(2) + 1.0).sqrt();
        let probit = init_probit(cohort, k)?;
        beta.phenotypes[k].intercept = probit.intercept * liability_sd;
        beta.phenotypes[k].slopes = probit.slopes.iter().map(|b| b * liability_sd).collect();
    }
    let theta = VarianceComponents::from_loadings(shared, genetic, eps, raw.rho.clone())?;
    Ok((beta, theta))
}

/// Iteration-cap failure, reporting a cycle when the last iterate revisits
/// an earlier one.
fn cap_error(history: &[DVector<f64>], tol: f64, stage: &str, residual: f64) -> Error {
    let last = history.last().expect("non-empty history");
    let period =
        (2..history.len().min(20)).find(|&p| relative_change(&history[history.len() - 1 - p], last) <= 10.0 * tol);
    let detail = match period {
        Some(p) => format!("{stage}: iterates cycle with period {p}"),
        None => format!("{stage}: iteration cap reached"),
    };
    Error::NonConvergence {
        iterations: history.len() - 1,
        best_residual: residual,
        detail,
    }
}

/// Largest extrapolation length tried first; grows by `STEP_GROWTH` each
/// time it binds.
const INITIAL_STEP: f64 = 1.0;
const STEP_GROWTH: f64 = 4.0;

/// Fixed point of `map` by squared polynomial extrapolation. Each cycle
/// takes two plain steps, one extrapolated point and one plain step from
/// it; a cycle counts as one iteration. Converges when a plain step moves
/// the iterate by at most `tol` (relative max-norm).
fn accelerated_fixed_point<F, P>(
    x0: DVector<f64>,
    mut map: F,
    project: P,
    opts: &FitOptions,
    stage: &str,
) -> Result<(DVector<f64>, usize)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    P: Fn(&mut DVector<f64>),
{
    let mut x = x0;
    let mut history = vec![x.clone()];
    let mut step_max = INITIAL_STEP;
    let mut change = f64::INFINITY;
    for cycle in 1..=opts.max_iterations {
        let x1 = map(&x)?;
        change = relative_change(&x, &x1);
        log::debug!("{stage} {cycle}: change {change:.3e}");
        if change <= opts.tolerance {
            return Ok((x1, cycle));
        }
        let x2 = map(&x1)?;
        let step = relative_change(&x1, &x2);
        if step <= opts.tolerance {
            return Ok((x2, cycle));
        }
        let r = &x1 - &x;
        let v = &x2 - &x1 - &r;
        let (rn, vn) = (r.norm(), v.norm());
        let mut alpha = if vn > 0.0 { -rn / vn } else { -1.0 };
        if alpha <= -step_max {
            alpha = -step_max;
            step_max *= STEP_GROWTH;
        }
        let next = if alpha < -1.0 {
            let mut xp = &x - 2.0 * alpha * &r + alpha * alpha * &v;
            project(&mut xp);
            match map(&xp) {
                Ok(xn) if xn.iter().all(|v| v.is_finite()) => xn,
                _ => {
                    step_max = INITIAL_STEP.max(step_max / STEP_GROWTH);
                    x2
                }
            }
        } else {
            x2
        };
        history.push(next.clone());
        x = next;
    }
    Err(cap_error(&history, opts.tolerance, stage, change))
}

/// Latent moments without the binary same-member variances; with the error
/// scale pinned those equal the current total variance and carry no
/// information about `theta`.
fn informative_moments(
    data: &Prepared,
    template: &KinshipMatrix,
    beta: &FixedEffects,
    theta: &VarianceComponents,
    mode: CrossMoment,
) -> Result<MomentSystem> {
    let mut system = latent_moments(data, template, beta, theta, mode)?;
    let spec = &data.spec;
    system
        .equations
        .retain(|e| !(e.k == e.m && e.class == PairClass::SameMember && spec.is_binary(e.k)));
    Ok(system)
}

fn fit_latent(cohort: &Cohort, opts: &FitOptions) -> Result<EstimateResult> {
    let spec = &cohort.spec;
    let template = &cohort.kinship_template;
    let data = Prepared::new(cohort)?;
    let (beta0, theta0) = latent_start(cohort, &data, opts)?;
    let mut diag = Diagnostics::default();
    let n_beta = spec.n_coefficients();
    let clamp_theta = |x: &mut DVector<f64>| {
        if let Ok(t) = theta_from_vector(spec, x) {
            *x = theta_vector(spec, &t);
        }
    };

    // variance components with the mean held fixed
    let (theta_x, theta_cycles) = {
        let beta = &beta0;
        let diag = &mut diag;
        let map = |x: &DVector<f64>| -> Result<DVector<f64>> {
            let theta = theta_from_vector(spec, x)?;
            let system = informative_moments(&data, template, beta, &theta, opts.cross_moment)?;
            let rep = solve_theta_from(&system, spec, Some(&theta), opts.restarts)?;
            record_solve(diag, &rep);
            diag.dropped_equations = system.dropped.clone();
            diag.excluded_pairs = system.excluded_pairs;
            Ok(theta_vector(spec, &rep.theta))
        };
        accelerated_fixed_point(theta_vector(spec, &theta0), map, clamp_theta, opts, "variance stage")?
    };
    diag.theta_stage_iterations = theta_cycles;

    // joint updates
    let stack = |b: &FixedEffects, t: &VarianceComponents| {
        let bv = b.to_vector();
        let tv = theta_vector(spec, t);
        DVector::from_iterator(bv.len() + tv.len(), bv.iter().chain(tv.iter()).copied())
    };
    let split = |x: &DVector<f64>| -> Result<(FixedEffects, VarianceComponents)> {
        let beta = FixedEffects::from_vector(spec, &x.rows(0, n_beta).into_owned())?;
        let theta = theta_from_vector(spec, &x.rows(n_beta, x.len() - n_beta).into_owned())?;
        Ok((beta, theta))
    };
    let start = stack(&beta0, &theta_from_vector(spec, &theta_x)?);
    let (joint_x, joint_cycles) = {
        let diag = &mut diag;
        let data = &data;
        let map = |x: &DVector<f64>| -> Result<DVector<f64>> {
            let (beta, theta) = split(x)?;
            let system = informative_moments(data, template, &beta, &theta, opts.cross_moment)?;
            let rep = solve_theta_from(&system, spec, Some(&theta), opts.restarts)?;
            record_solve(diag, &rep);
            diag.dropped_equations = system.dropped.clone();
            diag.excluded_pairs = system.excluded_pairs;
            let ctx = LatentContext::new(data, template, &beta, &rep.theta, opts.cross_moment)?;
            let responses = ctx.responses();
            let (next, r) = gls(data, &ctx.cov, Some(&responses))?;
            diag.ridge_applied |= r;
            Ok(stack(&next, &rep.theta))
        };
        let project = |x: &mut DVector<f64>| {
            let mut t = x.rows(n_beta, x.len() - n_beta).into_owned();
            clamp_theta(&mut t);
            x.rows_mut(n_beta, t.len()).copy_from(&t);
        };
        accelerated_fixed_point(start, map, project, opts, "joint stage")?
    };
    let (beta, theta) = split(&joint_x)?;
    let objective = informative_moments(&data, template, &beta, &theta, opts.cross_moment)?.objective(&theta);
    let iterations = diag.theta_stage_iterations + joint_cycles;
    Ok(EstimateResult::assemble(spec, beta, theta, iterations, objective, diag))
}

/// Binary phenotypes on the liability scale.
pub fn fit_binary(cohort: &Cohort, opts: &FitOptions) -> Result<EstimateResult> {
    if cohort.spec.kinds.iter().any(|k| *k != PhenotypeKind::Binary) {
        return Err(Error::Domain("binary fit needs binary phenotypes".into()));
    }
    fit_latent(cohort, opts)
}

/// Mixed continuous and binary phenotypes.
pub fn fit_mixed(cohort: &Cohort, opts: &FitOptions) -> Result<EstimateResult> {
    let kinds = &cohort.spec.kinds;
    if !kinds.contains(&PhenotypeKind::Binary) || !kinds.contains(&PhenotypeKind::Continuous) {
        return Err(Error::Domain("mixed fit needs both phenotype kinds".into()));
    }
    fit_latent(cohort, opts)
}

/// Dispatches on the phenotype kinds of the cohort.
pub fn fit(cohort: &Cohort, opts: &FitOptions) -> Result<EstimateResult> {
    let kinds = &cohort.spec.kinds;
    if kinds.iter().all(|k| *k == PhenotypeKind::Continuous) {
        fit_continuous(cohort, opts)
    } else if kinds.iter().all(|k| *k == PhenotypeKind::Binary) {
        fit_binary(cohort, opts)
    } else {
        fit_mixed(cohort, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_finds_linear_fixed_point() {
        // x -> A x + b with spectral radius 0.97
        let a = DMatrix::from_row_slice(2, 2, &[0.97, 0.0, 0.1, 0.5]);
        let b = DVector::from_vec(vec![0.03, 1.0]);
        let want = (DMatrix::identity(2, 2) - &a).try_inverse().unwrap() * &b;
        let opts = FitOptions::default();
        let (x, cycles) =
            accelerated_fixed_point(DVector::zeros(2), |x| Ok(&a * x + &b), |_| {}, &opts, "test").unwrap();
        assert!((x - want).amax() < 1e-5);
        assert!(cycles < 20, "{cycles} cycles");
    }

    #[test]
    fn oscillating_map_reports_cycle() {
        let opts = FitOptions {
            max_iterations: 10,
            ..FitOptions::default()
        };
        // period-two orbit that extrapolation cannot collapse
        let err = accelerated_fixed_point(
            DVector::from_vec(vec![1.0]),
            |x| Ok(DVector::from_vec(vec![if x[0] > 0.0 { -1.0 } else { 1.0 }])),
            |_| {},
            &opts,
            "stage",
        )
        .unwrap_err();
        match err {
            Error::NonConvergence { detail, .. } => assert!(detail.contains("cycle"), "{detail}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn binary_variances_leave_the_latent_system() {
        use crate::pedigree::{FamilyRecord, Member, MemberRole};
        let member = |role, z: f64, y: f64| Member {
            role,
            covariates: vec![vec![], vec![]],
            phenotypes: vec![Some(z), Some(y)],
            present: true,
        };
        let fams = (0..20)
            .map(|i| {
                let z = f64::from(u8::from(i % 3 == 0));
                FamilyRecord::new(
                    format!("f{i}"),
                    vec![
                        member(MemberRole::Parent1, z, i as f64 * 0.1),
                        member(MemberRole::Parent2, 1.0 - z, -0.3),
                        member(MemberRole::Child1, z, 0.5),
                    ],
                    1.0,
                )
                .unwrap()
            })
            .collect();
        let spec = ModelSpec::new(vec![PhenotypeKind::Binary, PhenotypeKind::Continuous], vec![0, 0]).unwrap();
        let cohort = Cohort::new(fams, spec.clone()).unwrap();
        let data = Prepared::new(&cohort).unwrap();
        let beta = FixedEffects::from_vector(&spec, &DVector::from_vec(vec![0.1, 0.0])).unwrap();
        let theta = VarianceComponents::from_loadings(
            vec![0.3, 0.2],
            vec![0.8, 0.6],
            vec![1.0, 0.9],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
        )
        .unwrap();
        let tpl = &cohort.kinship_template;
        let all = latent_moments(&data, tpl, &beta, &theta, CrossMoment::ObservedValue).unwrap();
        let kept = informative_moments(&data, tpl, &beta, &theta, CrossMoment::ObservedValue).unwrap();
        assert_eq!(all.len(), kept.len() + 1);
        assert!(!kept
            .equations
            .iter()
            .any(|e| e.k == 0 && e.m == 0 && e.class == PairClass::SameMember));
        assert!(kept
            .equations
            .iter()
            .any(|e| e.k == 1 && e.m == 1 && e.class == PairClass::SameMember));
    }
}
