//! Flat, named view of `(beta, theta)` plus derived heritabilities, used
//! for JSON output, bootstrap reports and RMSE tables.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{coheritability, heritability, FixedEffects, ModelSpec, VarianceComponents};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBlock {
    Beta,
    Theta,
    Heritability,
}

impl ParamBlock {
    pub fn label(self) -> &'static str {
        match self {
            ParamBlock::Beta => "Beta",
            ParamBlock::Theta => "Theta",
            ParamBlock::Heritability => "Heritability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: f64,
    pub block: ParamBlock,
    /// Pinned by the model (for instance the liability-scale error SD).
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    /// Canonical parameter list: `alpha1, beta1_1.., gamma2.., sigma1..,
    /// sigma_b, sigma_b2.., sigma_eps1.., rho12.., h2_1.., h2_12..`.
    pub fn from_model(spec: &ModelSpec, beta: &FixedEffects, theta: &VarianceComponents) -> Result<Self> {
        let k = spec.k();
        if theta.k() != k || beta.phenotypes.len() != k {
            return Err(Error::Dimension("parameters do not match model spec".into()));
        }
        let mut out = Vec::new();
        let mut push = |name: String, value: f64, block: ParamBlock, fixed: bool| {
            out.push(Param {
                name,
                value,
                block,
                fixed,
            });
        };
        for (i, e) in beta.phenotypes.iter().enumerate() {
            push(format!("alpha{}", i + 1), e.intercept, ParamBlock::Beta, false);
            for (j, s) in e.slopes.iter().enumerate() {
                push(format!("beta{}_{}", i + 1, j + 1), *s, ParamBlock::Beta, false);
            }
        }
        for i in 1..k {
            push(
                format!("gamma{}", i + 1),
                theta.gamma(i).unwrap_or(f64::NAN),
                ParamBlock::Theta,
                false,
            );
        }
        for i in 0..k {
            push(format!("sigma{}", i + 1), theta.sigma_g[i], ParamBlock::Theta, false);
        }
        push("sigma_b".into(), theta.sigma_b(), ParamBlock::Theta, false);
        for i in 1..k {
            push(
                format!("sigma_b{}", i + 1),
                theta.sigma_shared[i],
                ParamBlock::Theta,
                false,
            );
        }
        for i in 0..k {
            push(
                format!("sigma_eps{}", i + 1),
                theta.sigma_eps[i],
                ParamBlock::Theta,
                spec.is_binary(i),
            );
        }
        for i in 0..k {
            for j in (i + 1)..k {
                push(
                    format!("rho{}{}", i + 1, j + 1),
                    theta.rho[(i, j)],
                    ParamBlock::Theta,
                    false,
                );
            }
        }
        for i in 0..k {
            push(
                format!("h2_{}", i + 1),
                heritability(theta, i).unwrap_or(f64::NAN),
                ParamBlock::Heritability,
                false,
            );
        }
        for i in 0..k {
            for j in (i + 1)..k {
                push(
                    format!("h2_{}{}", i + 1, j + 1),
                    coheritability(theta, i, j).unwrap_or(f64::NAN),
                    ParamBlock::Heritability,
                    false,
                );
            }
        }
        Ok(ParamSet { params: out })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// JSON object keyed by parameter name; undefined values become `null`.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for p in &self.params {
            let v = serde_json::Number::from_f64(p.value).map_or(Value::Null, Value::Number);
            map.insert(p.name.clone(), v);
        }
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PhenotypeEffects, PhenotypeKind};
    use nalgebra::DMatrix;

    #[test]
    fn canonical_names_for_two_phenotypes() {
        let spec = ModelSpec::new(vec![PhenotypeKind::Continuous, PhenotypeKind::Binary], vec![1, 1]).unwrap();
        let beta = FixedEffects {
            phenotypes: vec![
                PhenotypeEffects {
                    intercept: 0.1,
                    slopes: vec![0.2],
                },
                PhenotypeEffects {
                    intercept: 0.3,
                    slopes: vec![0.4],
                },
            ],
        };
        let theta = VarianceComponents::new(
            &[1.0, 0.5],
            0.8,
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let set = ParamSet::from_model(&spec, &beta, &theta).unwrap();
        assert_eq!(
            set.names(),
            vec![
                "alpha1",
                "beta1_1",
                "alpha2",
                "beta2_1",
                "gamma2",
                "sigma1",
                "sigma2",
                "sigma_b",
                "sigma_b2",
                "sigma_eps1",
                "sigma_eps2",
                "rho12",
                "h2_1",
                "h2_2",
                "h2_12"
            ]
        );
        assert!((set.get("sigma_b2").unwrap() - 0.4).abs() < 1e-15);
        assert!(set.params.iter().find(|p| p.name == "sigma_eps2").unwrap().fixed);
        let json = set.to_json();
        assert!(json.get("rho12").is_some());
    }
}
