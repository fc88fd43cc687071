//! Characterization of repeated measurements.
//!
//! A timing is only trusted when its coefficient of variation is under the
//! reliability threshold (3% by default). With eight or more samples a
//! Jarque–Bera normality screen also runs; a failed screen forces the summary
//! unreliable so the raw samples get kept for inspection.

use serde::{Deserialize, Serialize};

/// Default reliability bound on the coefficient of variation.
pub const DEFAULT_RELIABILITY_THRESHOLD: f64 = 0.03;
/// Chi-squared (2 dof) 95% quantile used as the Jarque–Bera cutoff.
pub const JARQUE_BERA_CUTOFF: f64 = 5.99;
/// Fewer samples than this skip the normality screen.
pub const MIN_NORMALITY_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("sample set is empty")]
    EmptySamples,
    #[error("sample value {0} is not finite and positive")]
    InvalidSample(f64),
    #[error("speedup requires reliable summaries")]
    UnreliableInput,
    #[error("unit mismatch: `{0}` vs `{1}`")]
    UnitMismatch(String, String),
}

/// Non-empty set of finite positive measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    values: Vec<f64>,
    unit: String,
}

impl SampleSet {
    pub fn new(values: Vec<f64>, unit: impl Into<String>) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::EmptySamples);
        }
        if let Some(&bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(StatsError::InvalidSample(bad));
        }
        Ok(SampleSet {
            values,
            unit: unit.into(),
        })
    }

    /// Samples in seconds.
    pub fn seconds(values: Vec<f64>) -> Result<Self, StatsError> {
        Self::new(values, "s")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normality {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub expected: f64,
    /// Coefficient of variation (sample standard deviation over mean).
    pub variation: f64,
    pub normal: Normality,
    pub reliable: bool,
    pub n: usize,
    pub unit: String,
}

/// Summarize `samples`: mean, coefficient of variation, normality screen, reliability.
pub fn characterize(samples: &SampleSet, reliability_threshold: f64) -> StatSummary {
    let xs = samples.values();
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let variation = if n < 2 {
        0.0
    } else {
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n as f64 - 1.0)).sqrt() / mean
    };
    let normal = if n < MIN_NORMALITY_SAMPLES {
        Normality::Skipped
    } else {
        match jarque_bera(xs) {
            // Zero spread carries no evidence against normality.
            None => Normality::Pass,
            Some(jb) if jb < JARQUE_BERA_CUTOFF => Normality::Pass,
            Some(_) => Normality::Fail,
        }
    };
    let reliable = variation < reliability_threshold && normal != Normality::Fail;
    StatSummary {
        expected: mean,
        variation,
        normal,
        reliable,
        n,
        unit: samples.unit().to_string(),
    }
}

/// Jarque–Bera statistic from population moments; `None` when the spread is zero.
pub fn jarque_bera(xs: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= f64::EPSILON * mean.abs().max(1.0) * f64::EPSILON {
        return None;
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    Some(n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0))
}

/// `reference.expected / candidate.expected`; above 1 means the candidate is faster.
pub fn speedup(reference: &StatSummary, candidate: &StatSummary) -> Result<f64, StatsError> {
    if !(reference.reliable && candidate.reliable) {
        return Err(StatsError::UnreliableInput);
    }
    if reference.unit != candidate.unit {
        return Err(StatsError::UnitMismatch(
            reference.unit.clone(),
            candidate.unit.clone(),
        ));
    }
    Ok(reference.expected / candidate.expected)
}
