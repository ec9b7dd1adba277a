//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use coherit::pedigree::ReportingErrorMode;
use coherit::simulate::{Analysis, ReportingScenario, SettingLabel, SimConfig};
use coherit::weights::{MissingnessKind, WeightOptions};
use coherit::PhenotypeKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::read_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Setting, analysis, cohort size, replicate count, master seed and
    /// fit options.
    pub simulation: SimConfig,
    /// Cohort CSV analysed by `fit`, `bootstrap` and `weights`; a simulated
    /// replicate is used when absent.
    pub input: Option<PathBuf>,
    /// Phenotype kinds of `input`; defaults to those of the analysis.
    pub kinds: Option<Vec<PhenotypeKind>>,
    /// Family weights CSV applied to `input`.
    pub weights: Option<PathBuf>,
    /// Bootstrap replicates per fitted cohort.
    pub bootstrap: usize,
    pub reporting_rate: f64,
    pub reporting_mode: ReportingErrorMode,
    pub missingness: MissingnessKind,
    pub clip: WeightOptions,
    /// Cohort sizes tabulated by `report`.
    pub families: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            simulation: SimConfig::default(),
            input: None,
            kinds: None,
            weights: None,
            bootstrap: 100,
            reporting_rate: 0.05,
            reporting_mode: ReportingErrorMode::CrossFamilyParent,
            missingness: MissingnessKind::Logistic,
            clip: WeightOptions::default(),
            families: vec![500, 1000],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let data = read_file(path)?;
        serde_json::from_slice(&data).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn reporting(&self) -> ReportingScenario {
        ReportingScenario {
            rate: self.reporting_rate,
            mode: self.reporting_mode,
        }
    }

    pub fn kinds(&self) -> Vec<PhenotypeKind> {
        self.kinds.clone().unwrap_or_else(|| self.simulation.analysis.kinds())
    }

    pub fn validate(&self) -> CliResult<()> {
        let s = &self.simulation;
        let fail = |m: String| Err(CliError::Config(m));
        if s.n_families == 0 {
            return fail("simulation.n_families must be positive".into());
        }
        if s.replicates == 0 {
            return fail("simulation.replicates must be positive".into());
        }
        if !(0.0..1.0).contains(&s.parent_missing) || !(0.0..1.0).contains(&s.phenotype_missing) {
            return fail("missing rates must lie in [0, 1)".into());
        }
        if s.rho.is_some_and(|r| !(-1.0..=1.0).contains(&r)) {
            return fail("rho must lie in [-1, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.reporting_rate) {
            return fail("reporting_rate must lie in [0, 1]".into());
        }
        if self.families.is_empty() || self.families.contains(&0) {
            return fail("families must list positive cohort sizes".into());
        }
        if s.fit.max_iterations == 0 || s.fit.tolerance.is_nan() || s.fit.tolerance <= 0.0 {
            return fail("fit.max_iterations and fit.tolerance must be positive".into());
        }
        Ok(())
    }
}

fn parse_kind(s: &str) -> Result<PhenotypeKind, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "continuous" | "c" => Ok(PhenotypeKind::Continuous),
        "binary" | "b" => Ok(PhenotypeKind::Binary),
        other => Err(format!("unknown phenotype kind `{other}`")),
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for replicate-level parallelism.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Phenotype model: continuous, binary or mixed.
    #[arg(long, value_name = "MODEL")]
    pub model: Option<Analysis>,
    /// Heritability setting, e.g. `high,high,low`.
    #[arg(long, value_name = "LABEL")]
    pub setting: Option<SettingLabel>,
    /// Genetic correlation overriding the setting's target.
    #[arg(long, value_name = "RHO", allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// Families per cohort.
    #[arg(long, value_name = "N")]
    pub families: Option<usize>,
    /// Simulation replicates (outer runs for coverage).
    #[arg(long, value_name = "N")]
    pub reps: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long, value_name = "N")]
    pub boot: Option<usize>,
    /// Cohort CSV to analyse.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Phenotype kinds of the input, comma separated.
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Option<Vec<PhenotypeKind>>,
    /// Family weights CSV applied to the input.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Fraction of families with a misreported relationship.
    #[arg(long, value_name = "RATE")]
    pub rate: Option<f64>,
    /// Misreporting mode: cross_family_parent or unrelated_children.
    #[arg(long, value_name = "MODE")]
    pub mode: Option<ReportingErrorMode>,
    /// Missingness model: logistic or multinomial.
    #[arg(long, value_name = "KIND")]
    pub missingness: Option<MissingnessKind>,
    /// Upper clipping bound for family weights.
    #[arg(long, value_name = "W")]
    pub max_weight: Option<f64>,
    /// Probability that a simulated parent is absent.
    #[arg(long, value_name = "P")]
    pub parent_missing: Option<f64>,
    /// Baseline probability that a simulated continuous phenotype is unrecorded.
    #[arg(long, value_name = "P")]
    pub phenotype_missing: Option<f64>,
    /// Cohort sizes tabulated by `report`, comma separated.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
}

impl CommonArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let s = &mut cfg.simulation;
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.model {
            s.analysis = v;
        }
        if let Some(v) = self.setting {
            s.setting = v;
        }
        if let Some(v) = self.rho {
            s.rho = Some(v);
        }
        if let Some(v) = self.families {
            s.n_families = v;
        }
        if let Some(v) = self.reps {
            s.replicates = v;
        }
        if let Some(v) = self.parent_missing {
            s.parent_missing = v;
        }
        if let Some(v) = self.phenotype_missing {
            s.phenotype_missing = v;
        }
        if let Some(v) = self.boot {
            cfg.bootstrap = v;
        }
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.kinds {
            cfg.kinds = Some(v.clone());
        }
        if let Some(v) = &self.weights {
            cfg.weights = Some(v.clone());
        }
        if let Some(v) = self.rate {
            cfg.reporting_rate = v;
        }
        if let Some(v) = self.mode {
            cfg.reporting_mode = v;
        }
        if let Some(v) = self.missingness {
            cfg.missingness = v;
        }
        if let Some(v) = self.max_weight {
            cfg.clip.max_weight = v;
        }
        if let Some(v) = &self.sizes {
            cfg.families = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"bootstrap": 7, "simulation": {"n_families": 50}}"#).unwrap();
        assert_eq!(cfg.bootstrap, 7);
        assert_eq!(cfg.simulation.n_families, 50);
        assert_eq!(cfg.simulation.replicates, SimConfig::default().replicates);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bootstrapp": 7}"#).is_err());
    }

    #[derive(clap::Parser)]
    struct Probe {
        #[command(flatten)]
        common: CommonArgs,
    }

    #[test]
    fn lists_parse() {
        use clap::Parser;
        let p = Probe::try_parse_from(["x", "--sizes", "500,1000", "--kinds", "binary,c", "--rho", "-0.2"]).unwrap();
        let cfg = p.common.resolve().unwrap();
        assert_eq!(cfg.families, vec![500, 1000]);
        assert_eq!(cfg.kinds(), vec![PhenotypeKind::Binary, PhenotypeKind::Continuous]);
        assert_eq!(cfg.simulation.rho, Some(-0.2));
        assert!(Probe::try_parse_from(["x", "--kinds", "ordinal"]).is_err());
    }

    #[test]
    fn out_of_range_overrides_are_config_errors() {
        use clap::Parser;
        let p = Probe::try_parse_from(["x", "--rho", "1.5"]).unwrap();
        assert_eq!(p.common.resolve().unwrap_err().exit_code(), 3);
    }
}
