//! Non-dominated solution sets ("winning solutions") per tuning key.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::flagspace::ChoiceVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParetoError {
    #[error("point has {got} values, objective spec has {expected} dimensions")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("objective value {0} is not finite")]
    NonFinite(f64),
    #[error("invalid objective spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Objective {
    pub name: String,
    pub direction: Direction,
}

/// Ordered objective dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Objective>", into = "Vec<Objective>")]
pub struct ObjectiveSpec {
    dims: Vec<Objective>,
}

impl ObjectiveSpec {
    pub fn new(dims: Vec<Objective>) -> Result<Self, ParetoError> {
        if dims.is_empty() {
            return Err(ParetoError::InvalidSpec("no dimensions".into()));
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(ParetoError::InvalidSpec(format!("duplicate dimension `{}`", d.name)));
            }
        }
        Ok(ObjectiveSpec { dims })
    }

    /// All dimensions minimized.
    pub fn minimize(names: &[&str]) -> Result<Self, ParetoError> {
        Self::new(
            names
                .iter()
                .map(|n| Objective {
                    name: n.to_string(),
                    direction: Direction::Minimize,
                })
                .collect(),
        )
    }

    /// Default tuning objectives: execution time, binary size, compile time, failure.
    pub fn tuning_default() -> Self {
        Self::minimize(&["exec_time_s", "binary_size_bytes", "compile_time_s", "failed"])
            .expect("static spec is valid")
    }

    pub fn dims(&self) -> &[Objective] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    fn check(&self, point: &[f64]) -> Result<(), ParetoError> {
        if point.len() != self.dims.len() {
            return Err(ParetoError::DimensionMismatch {
                expected: self.dims.len(),
                got: point.len(),
            });
        }
        match point.iter().find(|v| !v.is_finite()) {
            Some(&v) => Err(ParetoError::NonFinite(v)),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<Objective>> for ObjectiveSpec {
    type Error = ParetoError;

    fn try_from(dims: Vec<Objective>) -> Result<Self, Self::Error> {
        Self::new(dims)
    }
}

impl From<ObjectiveSpec> for Vec<Objective> {
    fn from(spec: ObjectiveSpec) -> Self {
        spec.dims
    }
}

/// Whether `a` dominates `b`: no worse in every dimension, strictly better in one.
pub fn dominates(spec: &ObjectiveSpec, a: &[f64], b: &[f64]) -> Result<bool, ParetoError> {
    spec.check(a)?;
    spec.check(b)?;
    Ok(dominates_unchecked(spec, a, b))
}

fn dominates_unchecked(spec: &ObjectiveSpec, a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for ((d, x), y) in spec.dims.iter().zip(a).zip(b) {
        let (x, y) = match d.direction {
            Direction::Minimize => (*x, *y),
            Direction::Maximize => (-*x, -*y),
        };
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSolution {
    pub choice: ChoiceVector,
    pub behavior: Vec<f64>,
    /// Uid of the experiment record backing this solution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub timestamp: DateTime<Utc>,
    /// Reduced `-fno-ALL` form of `choice`, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<ChoiceVector>,
    /// Later choices that hit exactly the same behavior point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub equivalent_choices: Vec<ChoiceVector>,
}

impl FrontierSolution {
    pub fn new(choice: ChoiceVector, behavior: Vec<f64>) -> Self {
        FrontierSolution {
            choice,
            behavior,
            experiment: None,
            timestamp: Utc::now(),
            canonical: None,
            equivalent_choices: Vec::new(),
        }
    }

    pub fn with_experiment(mut self, uid: impl Into<String>) -> Self {
        self.experiment = Some(uid.into());
        self
    }

    /// The canonical choice when known, otherwise the raw choice.
    pub fn best_choice(&self) -> &ChoiceVector {
        self.canonical.as_ref().unwrap_or(&self.choice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Dominated,
    Duplicate,
}

/// A set of mutually non-dominated solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    spec: ObjectiveSpec,
    solutions: Vec<FrontierSolution>,
}

impl Frontier {
    pub fn new(spec: ObjectiveSpec) -> Self {
        Frontier {
            spec,
            solutions: Vec::new(),
        }
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn solutions(&self) -> &[FrontierSolution] {
        &self.solutions
    }

    pub fn solutions_mut(&mut self) -> &mut [FrontierSolution] {
        &mut self.solutions
    }

    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    /// Returns the updated frontier and the verdict for `candidate`.
    ///
    /// A candidate landing exactly on an existing behavior point is a duplicate;
    /// when its choice differs, it is recorded as an equivalent choice of the
    /// earlier solution.
    pub fn insert(&self, candidate: FrontierSolution) -> Result<(Frontier, Verdict), ParetoError> {
        let mut next = self.clone();
        let verdict = next.insert_mut(candidate)?;
        Ok((next, verdict))
    }

    /// In-place variant of [`Frontier::insert`].
    pub fn insert_mut(&mut self, candidate: FrontierSolution) -> Result<Verdict, ParetoError> {
        self.spec.check(&candidate.behavior)?;
        if let Some(existing) = self
            .solutions
            .iter_mut()
            .find(|s| s.behavior == candidate.behavior)
        {
            if existing.choice != candidate.choice
                && !existing.equivalent_choices.contains(&candidate.choice)
            {
                existing.equivalent_choices.push(candidate.choice);
            }
            return Ok(Verdict::Duplicate);
        }
        if self
            .solutions
            .iter()
            .any(|s| dominates_unchecked(&self.spec, &s.behavior, &candidate.behavior))
        {
            return Ok(Verdict::Dominated);
        }
        let spec = &self.spec;
        self.solutions
            .retain(|s| !dominates_unchecked(spec, &candidate.behavior, &s.behavior));
        self.solutions.push(candidate);
        Ok(Verdict::Accepted)
    }

    /// Solution with the lowest value in dimension `index` (after direction normalization).
    pub fn best_by(&self, index: usize) -> Option<&FrontierSolution> {
        let sign = match self.spec.dims.get(index)?.direction {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        };
        self.solutions.iter().min_by(|a, b| {
            (sign * a.behavior[index]).total_cmp(&(sign * b.behavior[index]))
        })
    }
}

/// Fold [`Frontier::insert`] over `points`.
pub fn frontier_of<I>(points: I, spec: &ObjectiveSpec) -> Result<Frontier, ParetoError>
where
    I: IntoIterator<Item = (ChoiceVector, Vec<f64>)>,
{
    let mut frontier = Frontier::new(spec.clone());
    for (choice, point) in points {
        frontier.insert_mut(FrontierSolution::new(choice, point))?;
    }
    Ok(frontier)
}
