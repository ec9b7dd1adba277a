//! Estimators: empirical and latent moment systems, the weighted moment
//! solver, generalized least squares for the mean model, and the
//! continuous and latent-liability fitting loops.

mod fit;
mod gee;
mod latent;
mod moments;
mod probit;
mod solver;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::model::{coheritability, heritability, FixedEffects, ModelSpec, VarianceComponents};
use crate::params::ParamSet;

pub use fit::{fit, fit_binary, fit_continuous, fit_mixed};
pub use gee::{gee_beta, unstructured_covariance};
pub use latent::{latent_cov_binary, latent_cov_mixed};
pub use moments::{empirical_cov_continuous, MomentEquation, MomentSystem, PairClass};
pub use probit::init_probit;
pub use solver::{solve_theta, SolveReport};

/// How the latent moment of a continuous/binary pair is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMoment {
    /// Condition on the observed continuous value and the binary indicator.
    #[default]
    ObservedValue,
    /// Condition on the binary indicator only, integrating the continuous
    /// member over the real line.
    HalfPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative max-norm change that ends an iteration loop.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub cross_moment: CrossMoment,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-6,
            max_iterations: 100,
            restarts: 5,
            cross_moment: CrossMoment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Moment equations without any contributing pair.
    pub dropped_equations: Vec<String>,
    /// Pairs skipped because a conditional moment underflowed.
    pub excluded_pairs: usize,
    /// Parameters that finished on a constraint boundary.
    pub boundary: Vec<String>,
    /// `sigma_b` is zero, so the loadings `gamma_k` are undefined.
    pub gamma_unidentified: bool,
    /// Moment-objective value after each outer iteration.
    pub objective_history: Vec<f64>,
    /// Iterations of the variance-only stage (latent models).
    pub theta_stage_iterations: usize,
    /// Families whose residual covariance needed a ridge.
    pub ridge_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub spec: ModelSpec,
    pub beta: FixedEffects,
    pub theta: VarianceComponents,
    pub h2: Vec<f64>,
    /// Coheritabilities off the diagonal, heritabilities on it.
    pub h2_cross: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_residual: f64,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    pub(crate) fn assemble(
        spec: &ModelSpec,
        beta: FixedEffects,
        theta: VarianceComponents,
        iterations: usize,
        objective_residual: f64,
        diagnostics: Diagnostics,
    ) -> Self {
        let k = spec.k();
        let h2: Vec<f64> = (0..k).map(|i| heritability(&theta, i).unwrap_or(f64::NAN)).collect();
        let h2_cross = DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                h2[a]
            } else {
                coheritability(&theta, a, b).unwrap_or(f64::NAN)
            }
        });
        EstimateResult {
            spec: spec.clone(),
            beta,
            theta,
            h2,
            h2_cross,
            iterations,
            converged: true,
            objective_residual,
            diagnostics,
        }
    }

    pub fn params(&self) -> Result<ParamSet> {
        ParamSet::from_model(&self.spec, &self.beta, &self.theta)
    }

    /// Flat parameter object plus a `diagnostics` block.
    pub fn to_json(&self) -> Result<Value> {
        let mut obj = self.params()?.to_json();
        let map = obj.as_object_mut().expect("parameter set serialises to an object");
        map.insert(
            "diagnostics".into(),
            json!({
                "iterations": self.iterations,
                "converged": self.converged,
                "objective_residual": self.objective_residual,
                "dropped_equations": self.diagnostics.dropped_equations,
                "excluded_pairs": self.diagnostics.excluded_pairs,
                "boundary": self.diagnostics.boundary,
                "gamma_unidentified": self.diagnostics.gamma_unidentified,
                "theta_stage_iterations": self.diagnostics.theta_stage_iterations,
                "ridge_applied": self.diagnostics.ridge_applied,
            }),
        );
        Ok(obj)
    }
}
