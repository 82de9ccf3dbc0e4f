//! JSON experiment configurations. Every document is validated in full before
//! any computation starts, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::bandit::{ArmSet, BanditRun, FStar, Policy, RewardMode, WidthMode};
use crate::bounds::{Budget, ConfidenceConfig};
use crate::error::Result;
use crate::kernel::KernelSpec;
use crate::validation::{CoverageTheorem, TraceConfig};

/// Reads and parses a config document.
pub fn load<T: DeserializeOwned>(path: &Path) -> std::result::Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse<T: DeserializeOwned>(text: &str) -> std::result::Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// Canonical form: pretty JSON with fields in declaration order and a
/// trailing newline. Parsing the canonical form reproduces it exactly.
pub fn canonical<T: Serialize>(config: &T) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("configs always serialise");
    s.push('\n');
    s
}

fn default_b() -> f64 {
    1.0
}

fn default_budget() -> Budget {
    Budget::Bernstein
}

fn default_one() -> usize {
    1
}

/// Cartesian grid over `(n, ρ, y, γ)`, expanded in that nesting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub n: Vec<usize>,
    pub rho: Vec<f64>,
    pub y: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Norm bound entering `ω`.
    #[serde(default = "default_b")]
    pub b: f64,
    /// Which probability budget fills the `budget` column.
    #[serde(default = "default_budget")]
    pub budget: Budget,
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        for &rho in &self.rho {
            ConfidenceConfig::new(rho, 1.0, self.b)?;
        }
        for &y in &self.y {
            ConfidenceConfig::new(1.0, y, self.b)?;
        }
        for &g in &self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(crate::error::invalid("gamma", format!("{g} is negative or not finite")));
            }
        }
        ConfidenceConfig::new(1.0, 1.0, self.b).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub trace: TraceConfig,
    pub theorem: CoverageTheorem,
    pub y: f64,
    pub reps: usize,
    pub seed: u64,
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        self.trace.validate()?;
        self.theorem.validate()?;
        if self.reps < 100 {
            return Err(crate::error::invalid("reps", format!("{} < 100", self.reps)));
        }
        if !(self.y > 0.0 && self.y.is_finite()) {
            return Err(crate::error::invalid("y", format!("{} is not positive", self.y)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    pub kernel: KernelSpec,
    pub arms: Vec<Vec<f64>>,
    pub f_star: FStar,
    pub confidence: ConfidenceConfig,
    pub horizon: usize,
    /// Number of independent runs; run `i` draws from stream `i` of `seed`.
    pub seeds: usize,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub refit_every: usize,
    #[serde(default)]
    pub reward_mode: RewardMode,
    #[serde(default)]
    pub width_mode: WidthMode,
    #[serde(default)]
    pub policy: Policy,
}

impl BanditConfig {
    pub fn to_run(&self) -> Result<BanditRun> {
        let run = BanditRun {
            arms: ArmSet::new(self.kernel, self.arms.clone())?,
            f_star: self.f_star.clone(),
            confidence: self.confidence,
            horizon: self.horizon,
            seed: self.seed,
            refit_every: self.refit_every,
            reward_mode: self.reward_mode,
            width_mode: self.width_mode,
            policy: self.policy,
        };
        run.validate()?;
        if self.seeds == 0 {
            return Err(crate::error::invalid("seeds", "must be at least 1"));
        }
        Ok(run)
    }
}

/// Test points, given explicitly or as a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum TestPoints {
    List { points: Vec<Vec<f64>> },
    /// `steps` evenly spaced values per coordinate between `lower` and
    /// `upper`, last coordinate varying fastest.
    Grid {
        lower: Vec<f64>,
        upper: Vec<f64>,
        steps: usize,
    },
}

impl TestPoints {
    pub fn expand(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            TestPoints::List { points } => Ok(points.clone()),
            TestPoints::Grid { lower, upper, steps } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(crate::error::invalid("grid", "lower and upper must have equal nonzero length"));
                }
                let axis = |i: usize| -> Vec<f64> {
                    match *steps {
                        0 => vec![],
                        1 => vec![lower[i]],
                        s => (0..s)
                            .map(|k| lower[i] + (upper[i] - lower[i]) * k as f64 / (s - 1) as f64)
                            .collect(),
                    }
                };
                let mut points: Vec<Vec<f64>> = vec![vec![]];
                for i in 0..lower.len() {
                    let values = axis(i);
                    points = points
                        .into_iter()
                        .flat_map(|p| {
                            values.iter().map(move |&v| {
                                let mut q = p.clone();
                                q.push(v);
                                q
                            })
                        })
                        .collect();
                }
                Ok(points)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub kernel: KernelSpec,
    /// CSV of `input..., response` rows without a header; relative paths
    /// are resolved against the config file's directory.
    pub dataset: PathBuf,
    pub confidence: ConfidenceConfig,
    pub test_points: TestPoints,
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.confidence.validate()?;
        for p in self.test_points.expand()? {
            self.kernel.check_input(&p)?;
        }
        Ok(())
    }
}
