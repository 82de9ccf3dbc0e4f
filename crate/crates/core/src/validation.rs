//! Monte Carlo and constructive checks of the concentration results, run in
//! explicit finite dimensions.
//!
//! A [`MartingaleTrace`] realises `S_n = Σ Y_j X_j` with predictable
//! covariates in the unit ball and bounded, conditionally centred noise whose
//! conditional variance `s_j²` is known in closed form, so
//! `⟨S⟩_n = Σ s_j² X_j X_jᵀ` is exact.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr_lite::standard_normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{beta_fixed, hoeffding_radius, omega, stitched_radius, Budget, ConfidenceConfig};
use crate::error::{invalid, Error, Result};
use crate::kernel::{Spectrum, LINEAR_NORM_SLACK};
use crate::logistic::{link_mu, quad_norm, PrimalReferenceModel};
use crate::rng::{stream, Stream};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Exponent above which `M_n(x)` is treated as overflowing.
pub const EXPONENT_CLIP: f64 = 700.0;

/// Bounded, conditionally mean-zero noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum NoiseModel {
    /// `Y = ±σ` with equal probability; `s² = σ²`.
    RademacherScaled { sigma: f64 },
    /// `Y = B − p` with `B ~ Bernoulli(p)` and the predictable success
    /// probability `p_j = p_min + (p_max − p_min)·μ(⟨S_{j−1}, X_j⟩)`;
    /// `s² = p(1 − p)`.
    CenteredBernoulli { p_min: f64, p_max: f64 },
    /// `Y` uniform on `[−a, a]`; `s² = a²/3`.
    TruncatedContinuous { half_width: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::RademacherScaled { sigma } if !(0.0..=1.0).contains(&sigma) => {
                Err(invalid("sigma", format!("{sigma} outside [0, 1]")))
            }
            NoiseModel::CenteredBernoulli { p_min, p_max }
                if !(0.0 <= p_min && p_min <= p_max && p_max <= 1.0) =>
            {
                Err(invalid("p_min/p_max", format!("need 0 ≤ {p_min} ≤ {p_max} ≤ 1")))
            }
            NoiseModel::TruncatedContinuous { half_width } if !(0.0..=1.0).contains(&half_width) => {
                Err(invalid("half_width", format!("{half_width} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Draws `(Y_j, s_j²)` given the covariate and the previous sum.
    fn draw(&self, x: &DVector<f64>, s_prev: &DVector<f64>, rng: &mut Stream) -> (f64, f64) {
        match *self {
            NoiseModel::RademacherScaled { sigma } => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (sign * sigma, sigma * sigma)
            }
            NoiseModel::CenteredBernoulli { p_min, p_max } => {
                let p = p_min + (p_max - p_min) * link_mu(s_prev.dot(x));
                let b = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                (b - p, p * (1.0 - p))
            }
            NoiseModel::TruncatedContinuous { half_width } => {
                let u: f64 = rng.random();
                ((2.0 * u - 1.0) * half_width, half_width * half_width / 3.0)
            }
        }
    }
}

/// What the covariate rule may look at: everything strictly before step `j`.
#[derive(Debug, Clone, Copy)]
pub struct Past<'a> {
    /// Index of the step being chosen, starting at 1.
    pub step: usize,
    pub dim: usize,
    pub covariates: &'a [DVector<f64>],
    pub noise: &'a [f64],
    /// `S_{j−1}`.
    pub sum: &'a DVector<f64>,
}

/// A predictable covariate rule: `X_j` may depend on the past and on fresh
/// randomness independent of `Y_j`.
pub trait CovariateRule {
    fn next(&mut self, past: &Past<'_>, rng: &mut Stream) -> DVector<f64>;
}

/// Built-in covariate rules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum CovariateKind {
    /// `e_{(j−1) mod d}`.
    #[default]
    RoundRobin,
    /// `S_{j−1}/‖S_{j−1}‖`, or `e_0` while `S` is zero.
    Adversarial,
    /// Uniform on the sphere of radius `scale`.
    Sphere { scale: f64 },
    /// `X_j ≡ e_0`.
    Constant,
}

impl CovariateKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CovariateKind::Sphere { scale } if !(0.0..=1.0).contains(&scale) => {
                Err(invalid("scale", format!("{scale} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl CovariateRule for CovariateKind {
    fn next(&mut self, past: &Past<'_>, rng: &mut Stream) -> DVector<f64> {
        let d = past.dim;
        match *self {
            CovariateKind::RoundRobin => DVector::from_fn(d, |i, _| {
                if i == (past.step - 1) % d {
                    1.0
                } else {
                    0.0
                }
            }),
            CovariateKind::Adversarial => {
                let norm = past.sum.norm();
                if norm > 0.0 {
                    past.sum / norm
                } else {
                    DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 })
                }
            }
            CovariateKind::Sphere { scale } => {
                let g = DVector::from_fn(d, |_, _| standard_normal(rng));
                let norm = g.norm();
                if norm > 0.0 {
                    g * (scale / norm)
                } else {
                    DVector::zeros(d)
                }
            }
            CovariateKind::Constant => DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        }
    }
}

/// A simulated bounded martingale-difference sequence with its covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleTrace {
    pub dim: usize,
    pub seed: u64,
    pub covariates: Vec<DVector<f64>>,
    pub noise: Vec<f64>,
    /// `s_j² = E[Y_j² | F_{j−1}]`.
    pub cond_var: Vec<f64>,
}

/// Running `S_n`, `⟨S⟩_n` and `V_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub n: usize,
    pub sum: DVector<f64>,
    pub predictable_qv: DMatrix<f64>,
    pub worst_case_qv: DMatrix<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: DVector::zeros(dim),
            predictable_qv: DMatrix::zeros(dim, dim),
            worst_case_qv: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>, y: f64, s2: f64) {
        self.n += 1;
        self.sum.axpy(y, x, 1.0);
        self.predictable_qv.ger(s2, x, x, 1.0);
        self.worst_case_qv.ger(1.0, x, x, 1.0);
    }

    /// Spectrum of `V_n`.
    pub fn spectrum(&self) -> Result<Spectrum> {
        Spectrum::of_symmetric(&self.worst_case_qv, self.n)
    }

    /// `‖(A + ρI)^{−1/2} S_n‖` with `A = ⟨S⟩_n` or `V_n`.
    pub fn statistic(&self, rho: f64, mode: StatMode) -> Result<f64> {
        let a = match mode {
            StatMode::Bernstein => &self.predictable_qv,
            StatMode::Hoeffding => &self.worst_case_qv,
        };
        normalised_norm(a, &self.sum, rho)
    }
}

/// `‖(A + ρI)^{−1/2} s‖ = √(sᵀ(A + ρI)⁻¹s)`.
pub fn normalised_norm(a: &DMatrix<f64>, s: &DVector<f64>, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(invalid("rho", format!("{rho} is not positive")));
    }
    let d = a.nrows();
    let chol = Cholesky::new(a + DMatrix::from_diagonal_element(d, d, rho))
        .ok_or_else(|| Error::Factorization("A + ρI".into()))?;
    Ok(s.dot(&chol.solve(s)).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatMode {
    /// Normalised by `⟨S⟩_n`.
    Bernstein,
    /// Normalised by `V_n`.
    Hoeffding,
}

impl MartingaleTrace {
    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }

    /// Running statistics after each step.
    pub fn running(&self) -> impl Iterator<Item = RunningStats> + '_ {
        let mut stats = RunningStats::new(self.dim);
        (0..self.len()).map(move |j| {
            stats.push(&self.covariates[j], self.noise[j], self.cond_var[j]);
            stats.clone()
        })
    }

    /// Statistics after the first `n` steps.
    pub fn stats_at(&self, n: usize) -> Result<RunningStats> {
        if n > self.len() {
            return Err(invalid("n", format!("{n} exceeds horizon {}", self.len())));
        }
        let mut stats = RunningStats::new(self.dim);
        for j in 0..n {
            stats.push(&self.covariates[j], self.noise[j], self.cond_var[j]);
        }
        Ok(stats)
    }

    /// Checks `‖X_j‖ ≤ 1`, `|Y_j| ≤ 1` and `⟨S⟩_n ⪯ V_n` at every step.
    pub fn check_invariants(&self) -> Result<()> {
        for (j, (x, y)) in self.covariates.iter().zip(&self.noise).enumerate() {
            if x.norm() > 1.0 + LINEAR_NORM_SLACK {
                return Err(Error::Invariant(format!("step {}: ‖X‖ = {}", j + 1, x.norm())));
            }
            if y.abs() > 1.0 {
                return Err(Error::Invariant(format!("step {}: |Y| = {}", j + 1, y.abs())));
            }
        }
        for stats in self.running() {
            let gap = &stats.worst_case_qv - &stats.predictable_qv;
            let min = gap.symmetric_eigenvalues().min();
            if min < -1e-10 {
                return Err(Error::Invariant(format!(
                    "step {}: V_n − ⟨S⟩_n has eigenvalue {min}",
                    stats.n
                )));
            }
        }
        Ok(())
    }
}

/// Simulates `horizon` steps in `R^dim`.
pub fn simulate_trace(
    dim: usize,
    horizon: usize,
    rule: &mut dyn CovariateRule,
    noise: NoiseModel,
    rng: &mut Stream,
) -> Result<MartingaleTrace> {
    if dim == 0 {
        return Err(invalid("dim", "must be positive"));
    }
    noise.validate()?;
    let mut covariates = Vec::with_capacity(horizon);
    let mut ys = Vec::with_capacity(horizon);
    let mut cond_var = Vec::with_capacity(horizon);
    let mut sum = DVector::zeros(dim);
    for step in 1..=horizon {
        let x = rule.next(
            &Past {
                step,
                dim,
                covariates: &covariates,
                noise: &ys,
                sum: &sum,
            },
            rng,
        );
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        let norm = x.norm();
        if !(norm <= 1.0 + LINEAR_NORM_SLACK) {
            return Err(Error::NormTooLarge { norm });
        }
        let (y, s2) = noise.draw(&x, &sum, rng);
        sum.axpy(y, &x, 1.0);
        covariates.push(x);
        ys.push(y);
        cond_var.push(s2);
    }
    Ok(MartingaleTrace {
        dim,
        seed: 0,
        covariates,
        noise: ys,
        cond_var,
    })
}

/// `‖(⟨S⟩_n + ρI)^{−1/2}S_n‖` (Bernstein) or `‖(V_n + ρI)^{−1/2}S_n‖`
/// (Hoeffding) after `n` steps.
pub fn self_norm_stat(trace: &MartingaleTrace, n: usize, rho: f64, mode: StatMode) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    trace.stats_at(n)?.statistic(rho, mode)
}

/// Shape and noise of the simulated martingales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub dim: usize,
    pub horizon: usize,
    #[serde(default)]
    pub covariates: CovariateKind,
    pub noise: NoiseModel,
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        self.covariates.validate()?;
        self.noise.validate()
    }

    /// Replication `index` of a run seeded with `master`.
    pub fn simulate(&self, master: u64, index: u64) -> Result<MartingaleTrace> {
        let mut rng = stream(master, index);
        let mut rule = self.covariates;
        let mut t = simulate_trace(self.dim, self.horizon, &mut rule, self.noise, &mut rng)?;
        t.seed = master;
        Ok(t)
    }
}

/// Which time-uniform bound a coverage experiment checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum CoverageTheorem {
    /// `‖(⟨S⟩_n + ρI)^{−1/2}S_n‖ ≤ β_n(ρ, y)`, budget `2e^{−y}`.
    BernsteinFixed { rho: f64 },
    /// `‖(V_n + ρI)^{−1/2}S_n‖ ≤ √(2(γ + y))`, budget `e^{−y}`.
    HoeffdingFixed { rho: f64 },
    /// Bernstein radius at the per-step doubling level, budget `(π²/6)e^{−y}`.
    BernsteinStitched,
}

impl CoverageTheorem {
    pub fn name(&self) -> &'static str {
        match self {
            CoverageTheorem::BernsteinFixed { .. } => "bernstein-fixed",
            CoverageTheorem::HoeffdingFixed { .. } => "hoeffding-fixed",
            CoverageTheorem::BernsteinStitched => "bernstein-stitched",
        }
    }

    pub fn budget(&self) -> Budget {
        match self {
            CoverageTheorem::BernsteinFixed { .. } => Budget::Bernstein,
            CoverageTheorem::HoeffdingFixed { .. } => Budget::Hoeffding,
            CoverageTheorem::BernsteinStitched => Budget::Stitched,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CoverageTheorem::BernsteinFixed { rho } | CoverageTheorem::HoeffdingFixed { rho }
                if !(rho > 0.0 && rho.is_finite()) =>
            {
                Err(invalid("rho", format!("{rho} is not positive")))
            }
            _ => Ok(()),
        }
    }

    /// `(statistic, radius)` at the current step.
    pub fn check(&self, stats: &RunningStats, y: f64) -> Result<(f64, f64)> {
        let spectrum = stats.spectrum()?;
        match *self {
            CoverageTheorem::BernsteinFixed { rho } => {
                let gamma = spectrum.info_gain(rho)?;
                Ok((stats.statistic(rho, StatMode::Bernstein)?, beta_fixed(rho, y, gamma)?))
            }
            CoverageTheorem::HoeffdingFixed { rho } => {
                let gamma = spectrum.info_gain(rho)?;
                Ok((stats.statistic(rho, StatMode::Hoeffding)?, hoeffding_radius(y, gamma)?))
            }
            CoverageTheorem::BernsteinStitched => {
                let s = stitched_radius(&spectrum, y)?;
                Ok((stats.statistic(s.level.rho_h, StatMode::Bernstein)?, s.radius))
            }
        }
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replication {
    pub index: u64,
    pub violated: bool,
    /// First step with `stat > radius`, if any.
    pub first_violation: Option<usize>,
    /// `max_n stat_n / radius_n`.
    pub max_ratio: f64,
}

/// Violation rate with a 95% Wilson interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub theorem: &'static str,
    pub y: f64,
    pub budget: f64,
    pub replications: Vec<Replication>,
    pub violations: usize,
    pub rate: f64,
    pub wilson: (f64, f64),
}

impl CoverageReport {
    pub fn from_replications(theorem: &'static str, y: f64, budget: f64, replications: Vec<Replication>) -> Self {
        let violations = replications.iter().filter(|r| r.violated).count();
        let m = replications.len();
        let rate = if m == 0 { 0.0 } else { violations as f64 / m as f64 };
        Self {
            theorem,
            y,
            budget,
            wilson: wilson_interval(violations, m, Z95),
            replications,
            violations,
            rate,
        }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.wilson.1 - self.wilson.0)
    }

    /// `rate ≤ budget + Wilson half-width`.
    pub fn within_budget(&self) -> bool {
        self.rate <= self.budget + self.half_width()
    }

    pub fn mean_max_ratio(&self) -> f64 {
        let m = self.replications.len().max(1) as f64;
        self.replications.iter().map(|r| r.max_ratio).sum::<f64>() / m
    }
}

/// Wilson score interval for `k` successes out of `m`.
pub fn wilson_interval(k: usize, m: usize, z: f64) -> (f64, f64) {
    if m == 0 {
        return (0.0, 1.0);
    }
    let m = m as f64;
    let p = k as f64 / m;
    let z2 = z * z;
    let denom = 1.0 + z2 / m;
    let center = (p + z2 / (2.0 * m)) / denom;
    let half = z / denom * (p * (1.0 - p) / m + z2 / (4.0 * m * m)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k as f64 == m { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Runs one replication, stopping at the first violation.
pub fn coverage_replication(
    trace: &TraceConfig,
    theorem: CoverageTheorem,
    y: f64,
    master: u64,
    index: u64,
) -> Result<Replication> {
    let t = trace.simulate(master, index)?;
    let mut stats = RunningStats::new(t.dim);
    let mut max_ratio: f64 = 0.0;
    for j in 0..t.len() {
        stats.push(&t.covariates[j], t.noise[j], t.cond_var[j]);
        let (stat, radius) = theorem.check(&stats, y)?;
        let ratio = if radius > 0.0 {
            stat / radius
        } else if stat > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        max_ratio = max_ratio.max(ratio);
        if stat > radius {
            return Ok(Replication {
                index,
                violated: true,
                first_violation: Some(stats.n),
                max_ratio,
            });
        }
    }
    Ok(Replication {
        index,
        violated: false,
        first_violation: None,
        max_ratio,
    })
}

/// Fraction of `reps` replications in which the statistic ever exceeds the
/// radius, in parallel on the current rayon pool. Replication `i` uses
/// `stream(master, i)`, so results do not depend on the thread count.
pub fn coverage_experiment(
    reps: usize,
    trace: &TraceConfig,
    y: f64,
    theorem: CoverageTheorem,
    master: u64,
) -> Result<CoverageReport> {
    if reps < 100 {
        return Err(invalid("reps", format!("{reps} < 100")));
    }
    if !(y > 0.0) {
        return Err(invalid("y", format!("{y} is not positive")));
    }
    trace.validate()?;
    theorem.validate()?;
    let replications = (0..reps as u64)
        .into_par_iter()
        .map(|i| coverage_replication(trace, theorem, y, master, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageReport::from_replications(
        theorem.name(),
        y,
        theorem.budget().mass(y),
        replications,
    ))
}

/// Empirical mean of `M_n(x)` at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMean {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
}

impl CheckpointMean {
    /// `mean ≤ 1 + 3·SE`.
    pub fn passes(&self) -> bool {
        self.mean > 0.0 && self.mean <= 1.0 + 3.0 * self.std_err
    }
}

/// `M_n(x) = exp{⟨S_n, x⟩ − ⟨x, 3⟨S⟩_n x⟩/2}` along one trace at the given
/// checkpoints. Errors if the exponent exceeds [`EXPONENT_CLIP`].
pub fn supermartingale_path(trace: &MartingaleTrace, x: &DVector<f64>, checkpoints: &[usize]) -> Result<Vec<f64>> {
    let mut exponent = 0.0;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    for j in 0..trace.len() {
        let proj = trace.covariates[j].dot(x);
        exponent += trace.noise[j] * proj - 1.5 * trace.cond_var[j] * proj * proj;
        while next < checkpoints.len() && checkpoints[next] == j + 1 {
            if exponent > EXPONENT_CLIP {
                return Err(Error::Invariant(format!("exponent {exponent} clipped at step {}", j + 1)));
            }
            out.push(exponent.exp());
            next += 1;
        }
    }
    Ok(out)
}

/// Averages `M_n(x)` over `reps` independent traces.
pub fn supermartingale_check(
    x: &DVector<f64>,
    trace: &TraceConfig,
    reps: usize,
    checkpoints: &[usize],
    master: u64,
) -> Result<Vec<CheckpointMean>> {
    trace.validate()?;
    if x.len() != trace.dim {
        return Err(Error::DimensionMismatch {
            expected: trace.dim,
            got: x.len(),
        });
    }
    if x.norm() > 1.0 + LINEAR_NORM_SLACK {
        return Err(Error::NormTooLarge { norm: x.norm() });
    }
    if reps < 2 {
        return Err(invalid("reps", "need at least 2"));
    }
    let mut cps = checkpoints.to_vec();
    cps.sort_unstable();
    cps.dedup();
    if cps.first() == Some(&0) || cps.last().is_some_and(|&n| n > trace.horizon) {
        return Err(invalid("checkpoints", format!("must lie in 1..={}", trace.horizon)));
    }
    let paths = (0..reps as u64)
        .into_par_iter()
        .map(|i| supermartingale_path(&trace.simulate(master, i)?, x, &cps))
        .collect::<Result<Vec<_>>>()?;
    Ok(cps
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let m = reps as f64;
            let mean = paths.iter().map(|p| p[k]).sum::<f64>() / m;
            let var = paths.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            CheckpointMean {
                n,
                mean,
                std_err: (var / m).sqrt(),
            }
        })
        .collect())
}

/// One step of the head/tail truncation construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationStep {
    pub n: usize,
    /// `D_n = dim H_n`.
    pub dimension: usize,
    /// `γ(ρ⁻¹V_n)`.
    pub gamma: f64,
    /// `‖V_n^-‖_op`.
    pub tail_op_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationReport {
    pub rho: f64,
    pub steps: Vec<TruncationStep>,
}

impl TruncationReport {
    /// Steps where `D_n > 4γ(ρ⁻¹V_n) + 1e-9`.
    pub fn dimension_failures(&self) -> usize {
        self.steps.iter().filter(|s| s.dimension as f64 > 4.0 * s.gamma + 1e-9).count()
    }

    /// Steps where `‖V_n^-‖_op ≥ ρ + 1 + 1e-9`.
    pub fn op_norm_failures(&self) -> usize {
        self.steps.iter().filter(|s| s.tail_op_norm >= self.rho + 1.0 + 1e-9).count()
    }
}

/// Replays the construction of the predictable head subspaces `H_n`:
/// `V_n^- = Σ (Π_j^⊥X_j)(Π_j^⊥X_j)ᵀ` with `Π_j` the projector onto
/// `H_{j−1}`, and `H_n = H_{n−1} ⊕ span{eigenvectors of V_n^- with eigenvalue ≥ ρ}`.
pub fn truncation_check(trace: &MartingaleTrace, rho: f64) -> Result<TruncationReport> {
    if !(rho > 0.0) {
        return Err(invalid("rho", format!("{rho} is not positive")));
    }
    let d = trace.dim;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut tail = DMatrix::zeros(d, d);
    let mut v = DMatrix::zeros(d, d);
    let mut steps = Vec::with_capacity(trace.len());
    for (j, x) in trace.covariates.iter().enumerate() {
        v.ger(1.0, x, x, 1.0);
        let perp = project_out(x, &basis);
        tail.ger(1.0, &perp, &perp, 1.0);
        let eig = tail.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &k in &order {
            if eig.eigenvalues[k] < rho || basis.len() == d {
                continue;
            }
            let e = project_out(&eig.eigenvectors.column(k).into_owned(), &basis);
            let norm = e.norm();
            if norm > 1e-8 {
                basis.push(e / norm);
            }
        }
        let gamma = Spectrum::of_symmetric(&v, j + 1)?.info_gain(rho)?;
        let tail_op_norm = eig.eigenvalues.max().max(0.0);
        steps.push(TruncationStep {
            n: j + 1,
            dimension: basis.len(),
            gamma,
            tail_op_norm,
        });
    }
    Ok(TruncationReport { rho, steps })
}

/// `x − Σ ⟨x, q⟩ q` over an orthonormal list, applied twice for stability.
fn project_out(x: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut r = x.clone();
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
    }
    r
}

/// Setup for the logistic confidence-sequence coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticCoverageConfig {
    pub dim: usize,
    pub horizon: usize,
    pub f_star: Vec<f64>,
    pub confidence: ConfidenceConfig,
    #[serde(default = "default_sphere")]
    pub covariates: CovariateKind,
}

fn default_sphere() -> CovariateKind {
    CovariateKind::Sphere { scale: 1.0 }
}

impl LogisticCoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.f_star.len() != self.dim {
            return Err(invalid("f_star", "length must equal dim > 0"));
        }
        self.confidence.validate()?;
        self.covariates.validate()?;
        let norm = self.f_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.confidence.b * (1.0 + 1e-12) {
            return Err(invalid("f_star", format!("norm {norm} exceeds b")));
        }
        Ok(())
    }
}

/// One replication: Bernoulli responses with mean `μ(⟨f*, X_j⟩)`; at each `n`
/// the ellipsoid event `‖f* − f̂_n‖_{Ĥ_n} ∨ ‖f* − f̂_n‖_{H*_n} ≤ ω_n` is
/// checked. Also returns the worst ratio of norm to width seen.
pub fn logistic_coverage_replication(cfg: &LogisticCoverageConfig, master: u64, index: u64) -> Result<Replication> {
    let mut rng = stream(master, index);
    let d = cfg.dim;
    let f_star = DVector::from_column_slice(&cfg.f_star);
    let ConfidenceConfig { rho, y, b } = cfg.confidence;
    let mut rule = cfg.covariates;
    let mut xs: Vec<DVector<f64>> = Vec::with_capacity(cfg.horizon);
    let mut ys: Vec<f64> = Vec::with_capacity(cfg.horizon);
    let mut v = DMatrix::zeros(d, d);
    let mut sum = DVector::zeros(d);
    let mut warm: Option<DVector<f64>> = None;
    let mut max_ratio: f64 = 0.0;
    for step in 1..=cfg.horizon {
        let x = rule.next(
            &Past {
                step,
                dim: d,
                covariates: &xs,
                noise: &ys,
                sum: &sum,
            },
            &mut rng,
        );
        let p = link_mu(f_star.dot(&x));
        let resp = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        sum.axpy(resp - p, &x, 1.0);
        v.ger(1.0, &x, &x, 1.0);
        xs.push(x);
        ys.push(resp);

        let features = DMatrix::from_columns(&xs);
        let model = PrimalReferenceModel::fit_warm(features, &ys, rho, warm.as_ref())
            .map_err(|e| Error::AtRound { round: step, source: Box::new(e) })?;
        let delta = &f_star - model.weights();
        let width = omega(rho, y, Spectrum::of_symmetric(&v, step)?.info_gain(rho)?, b)?;
        let dist = model.norm(&delta).max(quad_norm(&model.oracle_hessian(&f_star), &delta));
        max_ratio = max_ratio.max(dist / width);
        warm = Some(model.weights().clone());
        if dist > width {
            return Ok(Replication {
                index,
                violated: true,
                first_violation: Some(step),
                max_ratio,
            });
        }
    }
    Ok(Replication {
        index,
        violated: false,
        first_violation: None,
        max_ratio,
    })
}

pub fn logistic_coverage_experiment(cfg: &LogisticCoverageConfig, reps: usize, master: u64) -> Result<CoverageReport> {
    cfg.validate()?;
    let replications = (0..reps as u64)
        .into_par_iter()
        .map(|i| logistic_coverage_replication(cfg, master, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageReport::from_replications(
        "logistic-ellipsoid",
        cfg.confidence.y,
        Budget::Bernstein.mass(cfg.confidence.y),
        replications,
    ))
}

/// Standard normal draws by Box–Muller, enough for sphere sampling.
mod rand_distr_lite {
    use super::*;

    pub fn standard_normal(rng: &mut Stream) -> f64 {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(dim: usize, horizon: usize, covariates: CovariateKind, noise: NoiseModel) -> TraceConfig {
        TraceConfig {
            dim,
            horizon,
            covariates,
            noise,
        }
    }

    const RADEMACHER: NoiseModel = NoiseModel::RademacherScaled { sigma: 1.0 };
    const SILENT: NoiseModel = NoiseModel::RademacherScaled { sigma: 0.0 };

    #[test]
    fn zero_noise_gives_zero_sums() {
        let t = cfg(3, 50, CovariateKind::Sphere { scale: 0.9 }, SILENT).simulate(1, 0).unwrap();
        let s = t.stats_at(50).unwrap();
        assert_eq!(s.sum, DVector::zeros(3));
        assert_eq!(s.predictable_qv, DMatrix::zeros(3, 3));
        assert_eq!(self_norm_stat(&t, 50, 1.0, StatMode::Bernstein).unwrap(), 0.0);
    }

    #[test]
    fn scalar_rademacher_closed_form() {
        let t = cfg(1, 200, CovariateKind::Constant, RADEMACHER).simulate(9, 3).unwrap();
        for n in [1, 17, 200] {
            let s = t.stats_at(n).unwrap();
            assert_eq!(s.predictable_qv[(0, 0)], n as f64);
            assert_eq!(s.worst_case_qv[(0, 0)], n as f64);
            let expect = s.sum[0].abs() / (n as f64 + 2.0).sqrt();
            let got = self_norm_stat(&t, n, 2.0, StatMode::Bernstein).unwrap();
            assert!((got - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn scaled_noise_scales_predictable_variation() {
        let t = cfg(4, 100, CovariateKind::Sphere { scale: 0.9 }, NoiseModel::RademacherScaled { sigma: 0.1 })
            .simulate(5, 0)
            .unwrap();
        let s = t.stats_at(100).unwrap();
        let diff = &s.predictable_qv - &s.worst_case_qv * 0.01;
        assert!(diff.amax() < 1e-14);
    }

    #[test]
    fn hoeffding_statistic_never_exceeds_bernstein() {
        for noise in [
            NoiseModel::RademacherScaled { sigma: 0.3 },
            NoiseModel::CenteredBernoulli { p_min: 0.1, p_max: 0.9 },
            NoiseModel::TruncatedContinuous { half_width: 1.0 },
        ] {
            let t = cfg(3, 120, CovariateKind::Adversarial, noise).simulate(2, 1).unwrap();
            t.check_invariants().unwrap();
            for s in t.running() {
                let h = s.statistic(1.0, StatMode::Hoeffding).unwrap();
                let b = s.statistic(1.0, StatMode::Bernstein).unwrap();
                assert!(h <= b + 1e-12, "{h} > {b}");
            }
        }
    }

    #[test]
    fn oversized_covariate_is_rejected() {
        struct Big;
        impl CovariateRule for Big {
            fn next(&mut self, past: &Past<'_>, _: &mut Stream) -> DVector<f64> {
                DVector::from_element(past.dim, 1.0)
            }
        }
        let err = simulate_trace(2, 3, &mut Big, RADEMACHER, &mut stream(0, 0)).unwrap_err();
        assert!(matches!(err, Error::NormTooLarge { .. }));
    }

    #[test]
    fn traces_are_reproducible() {
        let c = cfg(3, 40, CovariateKind::Sphere { scale: 0.9 }, NoiseModel::CenteredBernoulli { p_min: 0.2, p_max: 0.7 });
        assert_eq!(c.simulate(11, 4).unwrap(), c.simulate(11, 4).unwrap());
        assert_ne!(c.simulate(11, 4).unwrap(), c.simulate(11, 5).unwrap());
    }

    #[test]
    fn wilson_interval_values() {
        let (lo, hi) = wilson_interval(0, 100, Z95);
        assert_eq!(lo, 0.0);
        assert_relative_eq!(hi, Z95 * Z95 / (100.0 + Z95 * Z95), epsilon = 1e-15);
        let (lo, hi) = wilson_interval(50, 100, Z95);
        assert_relative_eq!(0.5 * (lo + hi), 0.5, epsilon = 1e-15);
        assert!(lo < 0.5 && hi > 0.5);
    }

    #[test]
    fn coverage_budgets_and_silent_noise() {
        let c = cfg(2, 30, CovariateKind::RoundRobin, SILENT);
        let r = coverage_experiment(100, &c, 3.0, CoverageTheorem::BernsteinFixed { rho: 1.0 }, 0).unwrap();
        assert_eq!(r.violations, 0);
        assert_relative_eq!(r.budget, 0.09957413673572789, epsilon = 1e-15);
        let r = coverage_experiment(100, &c, 3.0, CoverageTheorem::HoeffdingFixed { rho: 1.0 }, 0).unwrap();
        assert_relative_eq!(r.budget, 0.04978706836786394, epsilon = 1e-15);
        let r = coverage_experiment(100, &c, 3.0, CoverageTheorem::BernsteinStitched, 0).unwrap();
        assert_relative_eq!(r.budget, 0.08189644484680113, epsilon = 1e-15);
        assert!(coverage_experiment(99, &c, 3.0, CoverageTheorem::BernsteinStitched, 0).is_err());
    }

    #[test]
    fn coverage_replications_are_reproducible() {
        let c = cfg(3, 60, CovariateKind::Sphere { scale: 0.9 }, RADEMACHER);
        let th = CoverageTheorem::HoeffdingFixed { rho: 1.0 };
        let a = coverage_replication(&c, th, 0.1, 7, 12).unwrap();
        let b = coverage_replication(&c, th, 0.1, 7, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn supermartingale_trivial_cases() {
        let c = cfg(2, 20, CovariateKind::RoundRobin, RADEMACHER);
        for m in supermartingale_check(&DVector::zeros(2), &c, 10, &[5, 20], 0).unwrap() {
            assert_eq!(m.mean, 1.0);
            assert_eq!(m.std_err, 0.0);
        }
        let c = cfg(2, 20, CovariateKind::RoundRobin, SILENT);
        let x = DVector::from_vec(vec![0.6, 0.8]);
        for m in supermartingale_check(&x, &c, 10, &[1, 20], 0).unwrap() {
            assert_eq!(m.mean, 1.0);
        }
        assert!(supermartingale_check(&DVector::from_vec(vec![1.0, 1.0]), &c, 10, &[1], 0).is_err());
        assert!(supermartingale_check(&x, &c, 10, &[21], 0).is_err());
    }

    #[test]
    fn supermartingale_mean_is_bounded() {
        let c = cfg(2, 100, CovariateKind::Sphere { scale: 0.9 }, RADEMACHER);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        for m in supermartingale_check(&x, &c, 2000, &[10, 100], 3).unwrap() {
            assert!(m.passes(), "{m:?}");
        }
    }

    #[test]
    fn truncation_with_large_rho_stays_empty() {
        let t = cfg(3, 20, CovariateKind::Sphere { scale: 0.9 }, RADEMACHER).simulate(0, 0).unwrap();
        let r = truncation_check(&t, 21.0).unwrap();
        assert!(r.steps.iter().all(|s| s.dimension == 0));
        assert_eq!(r.dimension_failures() + r.op_norm_failures(), 0);
    }

    #[test]
    fn truncation_scalar_recursion() {
        // With X ≡ 1 the tail grows by one per step until it reaches ρ, then the
        // only direction is absorbed and the tail is frozen.
        let t = cfg(1, 10, CovariateKind::Constant, RADEMACHER).simulate(0, 0).unwrap();
        let r = truncation_check(&t, 2.5).unwrap();
        let dims: Vec<usize> = r.steps.iter().map(|s| s.dimension).collect();
        assert_eq!(dims, vec![0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        let tails: Vec<f64> = r.steps.iter().map(|s| s.tail_op_norm).collect();
        assert_eq!(&tails[..4], &[1.0, 2.0, 3.0, 3.0]);
        assert_eq!(r.op_norm_failures(), 0);
        assert_eq!(r.dimension_failures(), 0);
    }

    #[test]
    fn truncation_dimension_is_nondecreasing() {
        let t = cfg(6, 150, CovariateKind::Sphere { scale: 0.9 }, RADEMACHER).simulate(4, 0).unwrap();
        let r = truncation_check(&t, 1.0).unwrap();
        assert!(r.steps.windows(2).all(|w| w[0].dimension <= w[1].dimension));
        assert_eq!(r.dimension_failures() + r.op_norm_failures(), 0);
    }

    #[test]
    fn logistic_coverage_smoke() {
        let c = LogisticCoverageConfig {
            dim: 3,
            horizon: 30,
            f_star: vec![0.6, 0.0, 0.8],
            confidence: ConfidenceConfig::new(1.0, 3.0, 1.0).unwrap(),
            covariates: CovariateKind::Sphere { scale: 1.0 },
        };
        let r = logistic_coverage_replication(&c, 0, 0).unwrap();
        assert!(!r.violated);
        assert!(r.max_ratio < 1.0);
    }
}
