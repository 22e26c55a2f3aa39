//! JSON config files. Every file carries `"schema": 1` and unknown keys are
//! rejected; missing keys take the defaults below.

use std::path::Path;

use jointda_core::cycle::TranslationConfig;
use jointda_core::flow::FlowTrainConfig;
use jointda_core::harness::{hard_shift_spec, RunConfig, SCHEMA_VERSION};
use jointda_core::objectives::{Objective, ObjectiveWeights};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reads and parses a JSON config. A missing file is reported with its path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingConfig(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|source| Error::ConfigParse {
        path: path.to_path_buf(),
        source,
    })
}

fn check_schema(schema: u32) -> Result<()> {
    if schema == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported schema {schema}, expected {SCHEMA_VERSION}")))
    }
}

/// Checks a [`RunConfig`], mapping core validation failures to config errors.
pub fn validate_run(c: &RunConfig) -> Result<()> {
    c.validate().map_err(|e| Error::Config(e.to_string()))
}

/// A hyperparameter grid expanded from one base run.
///
/// `source_only` contributes one grid point, `dann` and `dann_ss` one per
/// `lambda`, and `dann_em` one per `(lambda, gamma)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub schema: u32,
    pub base: RunConfig,
    pub objectives: Vec<Objective>,
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    /// The hard-shift comparison: every objective, 10 seeds, 200 labeled
    /// target examples for selection.
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            base: RunConfig {
                validation_size: 200,
                data: hard_shift_spec(0),
                ..RunConfig::default()
            },
            objectives: vec![Objective::SourceOnly, Objective::Dann, Objective::DannSs, Objective::DannEm],
            lambdas: vec![0.3, 1.0, 3.0],
            gammas: vec![0.1, 0.3, 1.0],
            seeds: (0..10).collect(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema)?;
        validate_run(&self.base)?;
        if self.objectives.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("objectives and seeds must be nonempty".into()));
        }
        let adversarial = self.objectives.iter().any(|o| *o != Objective::SourceOnly);
        if adversarial && self.lambdas.is_empty() {
            return Err(Error::Config("adversarial objectives need at least one lambda".into()));
        }
        if self.objectives.contains(&Objective::DannEm) && self.gammas.is_empty() {
            return Err(Error::Config("dann_em needs at least one gamma".into()));
        }
        for c in self.grid() {
            validate_run(&c)?;
        }
        Ok(())
    }

    /// Grid points in objective, lambda, gamma order.
    pub fn grid(&self) -> Vec<RunConfig> {
        let beta = self.base.weights.beta;
        let with = |objective, lambda, gamma| RunConfig {
            objective,
            weights: ObjectiveWeights { lambda, gamma, beta },
            seeds: self.seeds.clone(),
            ..self.base.clone()
        };
        let mut out = Vec::new();
        for &o in &self.objectives {
            match o {
                Objective::SourceOnly => out.push(with(o, self.base.weights.lambda, 0.0)),
                Objective::Dann | Objective::DannSs => out.extend(self.lambdas.iter().map(|&l| with(o, l, 0.0))),
                Objective::DannEm => {
                    for &l in &self.lambdas {
                        out.extend(self.gammas.iter().map(|&g| with(o, l, g)));
                    }
                }
            }
        }
        out
    }
}

/// Appearance-flow teacher/student training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub schema: u32,
    pub flow: FlowTrainConfig,
    /// Test examples dumped as images.
    pub dump_examples: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            flow: FlowTrainConfig::default(),
            dump_examples: 4,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema)?;
        self.flow.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Attribute-conditioned translation training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateConfig {
    pub schema: u32,
    pub translation: TranslationConfig,
    /// Interior interpolation points between the first two attributes.
    pub interpolation_steps: usize,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            translation: TranslationConfig::default(),
            interpolation_steps: 5,
        }
    }
}

impl TranslateConfig {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema)?;
        self.translation.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
