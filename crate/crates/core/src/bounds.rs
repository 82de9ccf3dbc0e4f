//! Closed-form confidence radii, widths and the regret-bound curve.
//!
//! Logarithms are natural throughout. Each bound comes with a failure
//! probability budget, see [`Budget`].

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernel::Spectrum;

/// Regularisation level, tail parameter and norm bound on `f*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceConfig {
    pub rho: f64,
    pub y: f64,
    pub b: f64,
}

impl ConfidenceConfig {
    pub fn new(rho: f64, y: f64, b: f64) -> Result<Self> {
        let c = Self { rho, y, b };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        positive("rho", self.rho)?;
        positive("y", self.y)?;
        positive("b", self.b)
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("{v} is not positive")))
    }
}

fn nonnegative(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("{v} is negative or not finite")))
    }
}

/// Failure-probability budget attached to each family of bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    /// Fixed-ρ Bernstein radius and the logistic width: `2e^{−y}`.
    Bernstein,
    /// Fixed-ρ Hoeffding radius: `e^{−y}`.
    Hoeffding,
    /// Union over doubling levels: `(π²/6)e^{−y}`.
    Stitched,
}

impl Budget {
    pub fn mass(self, y: f64) -> f64 {
        let tail = (-y).exp();
        match self {
            Budget::Bernstein => 2.0 * tail,
            Budget::Hoeffding => tail,
            Budget::Stitched => PI * PI / 6.0 * tail,
        }
    }
}

/// `β_n(ρ, y) = √(3ρ)/2 + (2√3/√ρ)(9γ + y) + √(6(γ + y))`.
pub fn beta_fixed(rho: f64, y: f64, gamma: f64) -> Result<f64> {
    positive("rho", rho)?;
    nonnegative("y", y)?;
    nonnegative("gamma", gamma)?;
    let s3 = 3f64.sqrt();
    Ok((3.0 * rho).sqrt() / 2.0
        + 2.0 * s3 / rho.sqrt() * (9.0 * gamma + y)
        + (6.0 * (gamma + y)).sqrt())
}

/// `√(2(γ + y))`. Independent of ρ except through `gamma`.
pub fn hoeffding_radius(y: f64, gamma: f64) -> Result<f64> {
    nonnegative("y", y)?;
    nonnegative("gamma", gamma)?;
    Ok((2.0 * (gamma + y)).sqrt())
}

/// `ι_n = max(1, log log n)`, with `ι_1 = 1`.
pub fn iota(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if n == 1 {
        return Ok(1.0);
    }
    Ok((n as f64).ln().ln().max(1.0))
}

/// `ι'_n = 2 log(max(1, log(2n log 2)/log 2))`.
pub fn iota_prime(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    Ok(2.0 * level_cap(n).ln())
}

/// `max(1, log(2n log 2)/log 2)`, the largest level the stitching can select
/// after `n` unit-ball observations.
pub fn level_cap(n: usize) -> f64 {
    ((2.0 * n as f64 * LN_2).ln() / LN_2).max(1.0)
}

/// Level of the doubling schedule `ρ_h = 2^{h−1}`, `y_h = y + 2 log h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchSchedule {
    pub h: u32,
    pub rho_h: f64,
    pub y_h: f64,
}

impl StitchSchedule {
    pub fn at(h: u32, y: f64) -> Self {
        assert!(h >= 1, "stitch levels start at 1");
        Self {
            h,
            rho_h: 2f64.powi(h as i32 - 1),
            y_h: y + 2.0 * (h as f64).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StitchedRadius {
    pub radius: f64,
    pub level: StitchSchedule,
    /// `γ(ρ_h⁻¹V)` at the selected level.
    pub gamma: f64,
}

/// Minimal `h` with `ρ_h ≥ γ(ρ_h⁻¹V)`, and `β(ρ_h, y_h)` at that level.
pub fn stitched_radius(spectrum: &Spectrum, y: f64) -> Result<StitchedRadius> {
    positive("y", y)?;
    let mut h = 1u32;
    loop {
        let level = StitchSchedule::at(h, y);
        let gamma = spectrum.info_gain(level.rho_h)?;
        if level.rho_h >= gamma {
            let radius = beta_fixed(level.rho_h, level.y_h, gamma)?;
            return Ok(StitchedRadius {
                radius,
                level,
                gamma,
            });
        }
        // γ ≤ ½ Σ λ_i/ρ_h, so the loop ends once ρ_h² ≥ ½ tr V.
        h += 1;
    }
}

/// `ω_n = u(5 + 2(u/√ρ)³)` with `u = β_n(ρ, y) + b√ρ`.
pub fn omega(rho: f64, y: f64, gamma: f64, b: f64) -> Result<f64> {
    positive("rho", rho)?;
    positive("y", y)?;
    positive("b", b)?;
    let u = beta_fixed(rho, y, gamma)? + b * rho.sqrt();
    let r = u / rho.sqrt();
    Ok(u * (5.0 + 2.0 * r * r * r))
}

/// `√(v* n ω γ) + (1 + κ*) ω γ`, the regret bound curve with its unknown
/// universal constant set to 1. Only the shape is meaningful.
pub fn regret_bound_curve(
    n: usize,
    v_star: f64,
    kappa_star: f64,
    omega_n: f64,
    gamma_n: f64,
) -> Result<f64> {
    if !(v_star > 0.0 && v_star <= 0.25) {
        return Err(invalid("v_star", format!("{v_star} outside (0, 1/4]")));
    }
    if !(kappa_star >= 4.0 && kappa_star.is_finite()) {
        return Err(invalid("kappa_star", format!("{kappa_star} below 4")));
    }
    positive("omega_n", omega_n)?;
    nonnegative("gamma_n", gamma_n)?;
    Ok((v_star * n as f64 * omega_n * gamma_n).sqrt() + (1.0 + kappa_star) * omega_n * gamma_n)
}
