//! Moment-based estimation of heritability and coheritability for
//! nuclear-family cohorts with continuous, binary, or mixed phenotype pairs.
//!
//! The crate is organised bottom-up:
//!
//! * [`pedigree`]: family records, kinship matrices, kinship classes and
//!   reporting-error perturbations.
//! * [`model`]: variance components, fixed effects, the family covariance
//!   matrix and the derived heritability quantities.
//! * [`gaussian`]: univariate and bivariate normal numerics used by the
//!   latent-liability estimators.
//! * [`estimate`]: moment systems, the weighted moment solver and the
//!   continuous / binary / mixed fitting loops.
//! * [`weights`]: inverse-probability weights from logistic or
//!   three-category multinomial missingness models.
//! * [`inference`]: parametric bootstrap and coverage experiments.
//! * [`simulate`]: covariate, parameter and phenotype generation plus RMSE
//!   tables for simulation studies.

pub mod error;
pub mod estimate;
pub mod gaussian;
pub mod inference;
pub mod model;
pub mod params;
pub mod pedigree;
pub mod rng;
pub mod simulate;
pub mod weights;

pub use error::{Error, Result};
pub use estimate::{fit, fit_binary, fit_continuous, fit_mixed, EstimateResult, FitOptions};
pub use model::{FixedEffects, ModelSpec, PhenotypeKind, VarianceComponents};
pub use pedigree::{Cohort, FamilyRecord, KinshipMatrix, Member, MemberRole};
