//! Logistic UCB over a finite arm set.
//!
//! Each round the arm maximising `f̂(a) + ω_n·‖Ĥ_n^{−1/2}φ(a)‖` is pulled,
//! which is the largest `⟨f, φ(a)⟩` over the confidence ellipsoid. Repeated
//! pulls of an arm are grouped into one design point with a multiplicity, so
//! refits cost `O(m³)` in the number `m` of distinct arms pulled so far.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{omega, ConfidenceConfig};
use crate::error::{invalid, Error, Result};
use crate::kernel::{GramState, KernelSpec, Spectrum};
use crate::logistic::{link_mu, variance_fn, DualLogisticModel};
use crate::rng::Stream;

/// Nonempty list of arms, all admissible for `kernel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSet {
    kernel: KernelSpec,
    arms: Vec<Vec<f64>>,
}

impl ArmSet {
    pub fn new(kernel: KernelSpec, arms: Vec<Vec<f64>>) -> Result<Self> {
        kernel.validate()?;
        if arms.is_empty() {
            return Err(Error::EmptyArmSet);
        }
        for a in &arms {
            kernel.check_input(a)?;
            let diag = kernel.eval_unchecked(a, a);
            if diag > 1.0 + crate::kernel::LINEAR_NORM_SLACK {
                return Err(invalid("arms", format!("kernel diagonal {diag} exceeds 1")));
            }
        }
        Ok(Self { kernel, arms })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn arm(&self, i: usize) -> &[f64] {
        &self.arms[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.arms.iter().map(Vec::as_slice)
    }
}

/// Ground-truth parameter of a simulated environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FStar {
    /// Weight vector for the linear kernel.
    Explicit(Vec<f64>),
    /// `f* = Σ c_i k(anchor_i, ·)`.
    Dual {
        anchors: Vec<Vec<f64>>,
        coefficients: Vec<f64>,
    },
}

impl FStar {
    /// `⟨f*, φ(x)⟩`.
    pub fn value(&self, kernel: &KernelSpec, x: &[f64]) -> Result<f64> {
        kernel.check_input(x)?;
        match self {
            FStar::Explicit(w) => {
                if kernel.family != crate::kernel::KernelFamily::Linear {
                    return Err(invalid("f_star", "explicit weights need the linear kernel"));
                }
                if w.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: x.len(),
                        got: w.len(),
                    });
                }
                Ok(w.iter().zip(x).map(|(a, b)| a * b).sum())
            }
            FStar::Dual {
                anchors,
                coefficients,
            } => {
                if anchors.len() != coefficients.len() {
                    return Err(invalid("f_star", "anchors and coefficients differ in length"));
                }
                anchors
                    .iter()
                    .zip(coefficients)
                    .map(|(p, c)| Ok(c * kernel.eval(p, x)?))
                    .sum()
            }
        }
    }

    /// RKHS norm `‖f*‖`.
    pub fn norm(&self, kernel: &KernelSpec) -> Result<f64> {
        match self {
            FStar::Explicit(w) => Ok(w.iter().map(|v| v * v).sum::<f64>().sqrt()),
            FStar::Dual {
                anchors,
                coefficients,
            } => {
                if anchors.len() != coefficients.len() {
                    return Err(invalid("f_star", "anchors and coefficients differ in length"));
                }
                let g = GramState::from_points(*kernel, anchors)?;
                let c = nalgebra::DVector::from_column_slice(coefficients);
                Ok(c.dot(&(g.matrix() * &c)).max(0.0).sqrt())
            }
        }
    }

    /// Checks `‖f*‖ ≤ b` (with a 1e-12 relative slack).
    pub fn validate(&self, kernel: &KernelSpec, b: f64) -> Result<()> {
        let norm = self.norm(kernel)?;
        if norm > b * (1.0 + 1e-12) {
            return Err(invalid("f_star", format!("norm {norm} exceeds b = {b}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceConstants {
    /// `V(⟨f*, x*⟩)`.
    pub v_star: f64,
    /// `max_x 1/V(⟨f*, x⟩)`.
    pub kappa_star: f64,
    pub best_arm: usize,
    /// `⟨f*, x*⟩`.
    pub best_value: f64,
}

/// `x*`, `v*` and `κ*` over the arm set; ties go to the lowest index.
pub fn instance_constants(f_star: &FStar, arms: &ArmSet) -> Result<InstanceConstants> {
    let values = arm_values(f_star, arms)?;
    let mut best_arm = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best_arm] {
            best_arm = i;
        }
    }
    let kappa_star = values
        .iter()
        .map(|&u| 1.0 / variance_fn(u))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(InstanceConstants {
        v_star: variance_fn(values[best_arm]),
        kappa_star,
        best_arm,
        best_value: values[best_arm],
    })
}

fn arm_values(f_star: &FStar, arms: &ArmSet) -> Result<Vec<f64>> {
    arms.iter().map(|a| f_star.value(arms.kernel(), a)).collect()
}

/// Upper confidence value `f̂(a) + width·‖Ĥ^{−1/2}φ(a)‖`.
pub fn ucb_value(model: &DualLogisticModel, arm: &[f64], width: f64) -> Result<f64> {
    Ok(model.predict_mean(arm)? + width * model.ellipsoid_width(arm)?)
}

/// Lowest-index arm attaining the largest upper confidence value.
pub fn ucb_select(model: &DualLogisticModel, arms: &ArmSet, width: f64) -> Result<usize> {
    if !(width >= 0.0) {
        return Err(invalid("width", format!("{width} is negative")));
    }
    if arms.is_empty() {
        return Err(Error::EmptyArmSet);
    }
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, arm) in arms.iter().enumerate() {
        let v = ucb_value(model, arm, width)?;
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// `Y ~ Bernoulli(μ)`.
    #[default]
    Bernoulli,
    /// `Y` uniform on `[μ − m, μ + m]` with `m = min(μ, 1 − μ)`.
    Continuous,
}

/// One reward with conditional mean `μ(⟨f*, φ(arm)⟩)`.
pub fn environment_sample(
    f_star: &FStar,
    kernel: &KernelSpec,
    arm: &[f64],
    mode: RewardMode,
    rng: &mut Stream,
) -> Result<f64> {
    let mean = link_mu(f_star.value(kernel, arm)?);
    Ok(sample_with_mean(mean, mode, rng))
}

fn sample_with_mean(mean: f64, mode: RewardMode, rng: &mut Stream) -> f64 {
    let u: f64 = rng.random();
    match mode {
        RewardMode::Bernoulli => {
            if u < mean {
                1.0
            } else {
                0.0
            }
        }
        RewardMode::Continuous => {
            let half = mean.min(1.0 - mean);
            (mean + (2.0 * u - 1.0) * half).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum WidthMode {
    /// `ω_n(ρ, y)` with `γ(ρ⁻¹V_n)` recomputed from the data seen so far.
    #[default]
    RoundGamma,
    /// A constant width.
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Policy {
    #[default]
    Ucb,
    /// Always pull `arm`; used to check regret accounting.
    Forced { arm: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    pub arms: ArmSet,
    pub f_star: FStar,
    pub confidence: ConfidenceConfig,
    pub horizon: usize,
    pub seed: u64,
    pub refit_every: usize,
    pub reward_mode: RewardMode,
    pub width_mode: WidthMode,
    pub policy: Policy,
}

/// Per-round record of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BanditTrace {
    pub seed: u64,
    pub arms: Vec<usize>,
    pub rewards: Vec<f64>,
    /// `r_j = μ(u*) − μ(u_j)`.
    pub regret: Vec<f64>,
    /// `R_n = Σ_{j ≤ n} r_j`.
    pub cum_regret: Vec<f64>,
    /// Width used to rank arms in each round.
    pub radius: Vec<f64>,
    /// `γ(ρ⁻¹V_n)` after the round's observation.
    pub gamma: Vec<f64>,
}

impl BanditTrace {
    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn final_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }
}

/// Design points pulled so far, grouped by arm.
struct GroupedDesign {
    slot_of_arm: Vec<Option<usize>>,
    counts: Vec<f64>,
    sums: Vec<f64>,
}

impl GroupedDesign {
    fn new(n_arms: usize) -> Self {
        Self {
            slot_of_arm: vec![None; n_arms],
            counts: Vec::new(),
            sums: Vec::new(),
        }
    }

    /// `γ` spectrum of `V_n = Σ c_i φ_i ⊗ φ_i`, via `C^{1/2} K C^{1/2}`.
    fn spectrum(&self, gram: &GramState) -> Result<Spectrum> {
        let m = gram.len();
        let sc: Vec<f64> = self.counts.iter().map(|c| c.sqrt()).collect();
        let scaled = DMatrix::from_fn(m, m, |i, j| sc[i] * gram.matrix()[(i, j)] * sc[j]);
        let n_obs = self.counts.iter().sum::<f64>() as usize;
        Spectrum::of_symmetric(&scaled, n_obs)
    }
}

impl BanditRun {
    pub fn validate(&self) -> Result<()> {
        self.confidence.validate()?;
        self.f_star.validate(self.arms.kernel(), self.confidence.b)?;
        if self.refit_every == 0 {
            return Err(invalid("refit_every", "must be at least 1"));
        }
        if let Policy::Forced { arm } = self.policy {
            if arm >= self.arms.len() {
                return Err(invalid("policy", format!("forced arm {arm} out of range")));
            }
        }
        if let WidthMode::Fixed { value } = self.width_mode {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(invalid("width", format!("{value} is not a valid width")));
            }
        }
        Ok(())
    }

    /// Runs the bandit for `horizon` rounds, drawing rewards from `rng`.
    pub fn run_with(&self, rng: &mut Stream) -> Result<BanditTrace> {
        self.validate()?;
        let kernel = *self.arms.kernel();
        let values = arm_values(&self.f_star, &self.arms)?;
        let consts = instance_constants(&self.f_star, &self.arms)?;
        let best_mean = link_mu(consts.best_value);
        let rho = self.confidence.rho;

        let mut design = GroupedDesign::new(self.arms.len());
        let mut model = DualLogisticModel::fit_grouped(GramState::new(kernel)?, vec![], vec![], rho, None)?;
        let mut trace = BanditTrace {
            seed: self.seed,
            ..Default::default()
        };
        let mut cum = 0.0;
        let mut gamma = 0.0;
        for round in 1..=self.horizon {
            let at = |e: Error| Error::AtRound {
                round,
                source: Box::new(e),
            };
            let width = match self.width_mode {
                WidthMode::Fixed { value } => value,
                WidthMode::RoundGamma => omega(rho, self.confidence.y, gamma, self.confidence.b).map_err(at)?,
            };
            let arm = match self.policy {
                Policy::Ucb => ucb_select(&model, &self.arms, width).map_err(at)?,
                Policy::Forced { arm } => arm,
            };
            let reward = sample_with_mean(link_mu(values[arm]), self.reward_mode, rng);
            let regret = (best_mean - link_mu(values[arm])).max(0.0);
            cum += regret;

            let mut gram = None;
            let slot = match design.slot_of_arm[arm] {
                Some(s) => s,
                None => {
                    let mut g = model.gram().clone();
                    g.append(self.arms.arm(arm)).map_err(at)?;
                    gram = Some(g);
                    design.counts.push(0.0);
                    design.sums.push(0.0);
                    let s = design.counts.len() - 1;
                    design.slot_of_arm[arm] = Some(s);
                    s
                }
            };
            design.counts[slot] += 1.0;
            design.sums[slot] += reward;

            if gram.is_some() || round % self.refit_every == 0 {
                let warm = model.alpha().to_vec();
                let g = gram.unwrap_or_else(|| model.gram().clone());
                model = DualLogisticModel::fit_grouped(
                    g,
                    design.counts.clone(),
                    design.sums.clone(),
                    rho,
                    Some(&warm),
                )
                .map_err(at)?;
            }
            gamma = design.spectrum(model.gram()).map_err(at)?.info_gain(rho).map_err(at)?;

            trace.arms.push(arm);
            trace.rewards.push(reward);
            trace.regret.push(regret);
            trace.cum_regret.push(cum);
            trace.radius.push(width);
            trace.gamma.push(gamma);
        }
        Ok(trace)
    }

    /// Runs with the stream derived from `seed`.
    pub fn run(&self) -> Result<BanditTrace> {
        let mut rng = crate::rng::stream(self.seed, 0);
        self.run_with(&mut rng)
    }
}

/// Free-function form of [`BanditRun::run`].
pub fn run_bandit(config: &BanditRun) -> Result<BanditTrace> {
    config.run()
}
