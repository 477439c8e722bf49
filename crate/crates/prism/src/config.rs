//! Run configuration: one JSON document holding everything a pipeline
//! run needs beyond command-line flags. Unknown fields are rejected so a
//! typo cannot silently fall back to a default.

use serde::{Deserialize, Serialize};

use crate::dataset::{conflicting_family, SplitSpec, SynthDomainSpec};
use crate::error::{Error, Result};
use crate::nid::NidConfig;
use crate::tde::TdeConfig;

/// Synthetic-data block: which domain family to generate and how much.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub window_len: usize,
    pub samples_per_class: usize,
    pub domains: Vec<SynthDomainSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".to_string(),
            window_len: 16,
            samples_per_class: 28,
            domains: conflicting_family(4, 5, 6, 2.5, 0.15, 0.0),
        }
    }
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    NDomains,
    Margin,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { parameter: SweepParameter::Alpha, values: vec![0.0, 0.1, 1.0] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stochastic step derives its own stream from it.
    pub seed: u64,
    pub split: SplitSpec,
    pub tde: TdeConfig,
    pub nid: NidConfig,
    pub synth: SynthConfig,
    /// Seeds for multi-seed commands (method comparison, sweeps).
    pub compare_seeds: Vec<u64>,
    pub sweep: SweepSpec,
    /// Metadata key used for semantic routing and oracle grouping.
    pub meta_key: String,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            split: SplitSpec::default(),
            tde: TdeConfig::default(),
            nid: NidConfig::default(),
            synth: SynthConfig::default(),
            compare_seeds: vec![0, 1, 2, 3, 4],
            sweep: SweepSpec::default(),
            meta_key: "domain".to_string(),
            plot: true,
        }
    }
}

impl RunConfig {
    /// Structural sanity checks that do not depend on any dataset.
    pub fn validate(&self) -> Result<()> {
        if self.synth.window_len == 0 || self.synth.samples_per_class == 0 {
            return Err(Error::input(
                "synth.window_len and synth.samples_per_class must be >= 1".to_string(),
            ));
        }
        if self.synth.domains.is_empty() {
            return Err(Error::input("synth.domains must not be empty".to_string()));
        }
        if self.compare_seeds.is_empty() {
            return Err(Error::input("compare_seeds must not be empty".to_string()));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::input("sweep.values must not be empty".to_string()));
        }
        if self.meta_key.is_empty() {
            return Err(Error::input("meta_key must not be empty".to_string()));
        }
        for v in &self.sweep.values {
            if !v.is_finite() {
                return Err(Error::input(format!("sweep value {} is not finite", v)));
            }
            if *v < 0.0 {
                return Err(Error::input(format!("sweep value {} is negative", v)));
            }
            if self.sweep.parameter == SweepParameter::NDomains
                && (v.fract() != 0.0 || *v < 1.0)
            {
                return Err(Error::input(format!(
                    "domain-count sweep values must be whole numbers >= 1, got {}",
                    v
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a configuration document.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = serde_json::from_str(text)
        .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
    config.validate()?;
    Ok(config)
}

pub fn load_run_config(path: &std::path::Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}
