use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BuildResult, DatasetDescriptor, MeasureError, Result, RunSample, SpeciesDescriptor, StateVector, Toolchain};
use crate::flagspace::ChoiceVector;

fn default_base_size() -> u64 {
    8192
}

fn default_compile_base() -> f64 {
    0.1
}

fn default_compile_per_flag() -> f64 {
    0.01
}

/// Ground truth for the mock toolchain.
///
/// `exec_time = base_time * prod(flag_effects of enabled flags) + dataset term`.
/// Parameters count as enabled when set. Size and compile time grow linearly
/// with the number of enabled flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScenario {
    pub base_time: f64,
    #[serde(default)]
    pub flag_effects: BTreeMap<String, f64>,
    #[serde(default)]
    pub dataset_terms: BTreeMap<String, f64>,
    #[serde(default)]
    pub size_per_flag: u64,
    #[serde(default = "default_base_size")]
    pub base_size: u64,
    #[serde(default = "default_compile_base")]
    pub compile_time_base: f64,
    #[serde(default = "default_compile_per_flag")]
    pub compile_time_per_flag: f64,
    /// Flags whose presence makes the build fail.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fail_flags: Vec<String>,
    /// Flags whose presence corrupts the output.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub invalid_flags: Vec<String>,
}

impl Default for MockScenario {
    fn default() -> Self {
        MockScenario {
            base_time: 1.0,
            flag_effects: BTreeMap::new(),
            dataset_terms: BTreeMap::new(),
            size_per_flag: 0,
            base_size: default_base_size(),
            compile_time_base: default_compile_base(),
            compile_time_per_flag: default_compile_per_flag(),
            fail_flags: Vec::new(),
            invalid_flags: Vec::new(),
        }
    }
}

impl MockScenario {
    fn enabled<'a>(&self, choice: &'a ChoiceVector) -> impl Iterator<Item = &'a str> {
        choice
            .on_flags()
            .chain(choice.param_values.keys().map(String::as_str))
    }

    pub fn exec_time(&self, choice: &ChoiceVector, dataset: &DatasetDescriptor) -> f64 {
        let product: f64 = self
            .enabled(choice)
            .filter_map(|f| self.flag_effects.get(f))
            .product();
        self.base_time * product + self.dataset_term(dataset)
    }

    fn dataset_term(&self, dataset: &DatasetDescriptor) -> f64 {
        dataset
            .id
            .alias
            .as_ref()
            .and_then(|a| self.dataset_terms.get(a))
            .or_else(|| self.dataset_terms.get(&dataset.id.uid))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn binary_size(&self, choice: &ChoiceVector) -> u64 {
        self.base_size + self.size_per_flag * self.enabled(choice).count() as u64
    }

    pub fn compile_time(&self, choice: &ChoiceVector) -> f64 {
        self.compile_time_base + self.compile_time_per_flag * self.enabled(choice).count() as f64
    }
}

/// Deterministic toolchain driven by the species' [`MockScenario`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockToolchain;

impl MockToolchain {
    fn scenario(species: &SpeciesDescriptor) -> Result<&MockScenario> {
        species.mock.as_ref().ok_or_else(|| {
            MeasureError::InvalidSpecies(format!("species `{}` has no mock scenario", species.uid()))
        })
    }
}

impl Toolchain for MockToolchain {
    fn name(&self) -> String {
        "mock".to_string()
    }

    fn version(&self) -> String {
        "1".to_string()
    }

    fn build(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        flags: &str,
        _scratch: &Path,
        _timeout: Duration,
    ) -> Result<BuildResult> {
        let scenario = Self::scenario(species)?;
        let broken: Vec<&str> = scenario
            .fail_flags
            .iter()
            .map(String::as_str)
            .filter(|f| choice.is_on(f))
            .collect();
        let ok = broken.is_empty();
        Ok(BuildResult {
            ok,
            compile_time_s: scenario.compile_time(choice),
            binary_size_bytes: if ok { scenario.binary_size(choice) } else { 0 },
            log: if ok {
                format!("mock build {flags}")
            } else {
                format!("mock compiler error: internal compiler error with -f{}", broken.join(" -f"))
            },
            artifact: None,
            choice: choice.clone(),
        })
    }

    fn run_once(
        &self,
        species: &SpeciesDescriptor,
        build: &BuildResult,
        dataset: &DatasetDescriptor,
        _state: &StateVector,
        _scratch: &Path,
        _timeout: Duration,
    ) -> Result<RunSample> {
        let scenario = Self::scenario(species)?;
        let valid = !scenario.invalid_flags.iter().any(|f| build.choice.is_on(f));
        Ok(RunSample {
            seconds: scenario.exec_time(&build.choice, dataset),
            exit_ok: true,
            timed_out: false,
            max_rss_bytes: 1 << 20,
            counters: None,
            output: None,
            valid: Some(valid),
            log: String::new(),
        })
    }
}
