//! Kernels, incrementally grown Gram matrices and their spectra.
//!
//! Everything dimension-free in this crate is realised through the eigenvalues
//! of a finite Gram matrix `K_n`, whose nonzero spectrum coincides with that
//! of the covariance operator `V_n = Σ φ(a_j) ⊗ φ(a_j)`. In particular
//! `γ(ρ⁻¹V_n) = ½ log det(I + ρ⁻¹K_n) = ½ Σ log(1 + λ_i/ρ)`.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Slack allowed on `‖a‖ ≤ 1` for linear-kernel inputs.
pub const LINEAR_NORM_SLACK: f64 = 1e-12;

/// Relative threshold below which a negative eigenvalue is a hard error.
pub const NEG_EIGEN_TOL: f64 = 1e-8;

const RHO_STAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Linear,
    #[serde(rename = "rbf")]
    GaussianRbf,
    #[serde(rename = "matern52")]
    Matern52,
}

/// A positive-definite kernel with `k(a, a) ≤ 1` on its valid inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Ignored by the linear kernel.
    #[serde(default = "default_lengthscale")]
    pub lengthscale: f64,
    pub input_dim: usize,
}

fn default_lengthscale() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self {
            family: KernelFamily::Linear,
            lengthscale: 1.0,
            input_dim,
        }
    }

    pub fn rbf(input_dim: usize, lengthscale: f64) -> Self {
        Self {
            family: KernelFamily::GaussianRbf,
            lengthscale,
            input_dim,
        }
    }

    pub fn matern52(input_dim: usize, lengthscale: f64) -> Self {
        Self {
            family: KernelFamily::Matern52,
            lengthscale,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim", "must be positive"));
        }
        if self.family != KernelFamily::Linear
            && !(self.lengthscale.is_finite() && self.lengthscale > 0.0)
        {
            return Err(invalid("lengthscale", format!("{} is not positive", self.lengthscale)));
        }
        Ok(())
    }

    /// Checks that `a` is an admissible input for this kernel.
    pub fn check_input(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: a.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel input"));
        }
        if self.family == KernelFamily::Linear {
            let norm = dot(a, a).sqrt();
            if norm > 1.0 + LINEAR_NORM_SLACK {
                return Err(Error::NormTooLarge { norm });
            }
        }
        Ok(())
    }

    /// `k(a, b)`, validating both inputs.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_input(a)?;
        self.check_input(b)?;
        Ok(self.eval_unchecked(a, b))
    }

    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Linear => dot(a, b),
            KernelFamily::GaussianRbf => {
                let l = self.lengthscale;
                (-sq_dist(a, b) / (2.0 * l * l)).exp()
            }
            KernelFamily::Matern52 => {
                let r = sq_dist(a, b).sqrt() / self.lengthscale;
                let s5 = 5f64.sqrt() * r;
                (1.0 + s5 + 5.0 * r * r / 3.0) * (-s5).exp()
            }
        }
    }

    /// Explicit feature map, available for the linear kernel only.
    pub fn feature_map(&self, a: &[f64]) -> Option<DVector<f64>> {
        (self.family == KernelFamily::Linear).then(|| DVector::from_column_slice(a))
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    spec.eval(a, b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nonincreasing, nonnegative eigenvalues of a PSD matrix.
///
/// `n_obs` records how many rank-one terms built the matrix; it is what the
/// stitching level bound is stated in terms of, and may exceed the number of
/// stored eigenvalues when observations were grouped.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    n_obs: usize,
}

impl Spectrum {
    /// Validates and clips raw eigenvalues. Values in `[-1e-8·max(1, λ_max), 0)`
    /// are set to zero; anything more negative is rejected.
    pub fn from_raw(raw: impl IntoIterator<Item = f64>, n_obs: usize) -> Result<Self> {
        let mut eigenvalues: Vec<f64> = raw.into_iter().collect();
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eigenvalues"));
        }
        let lmax = eigenvalues.iter().copied().fold(0.0, f64::max);
        let tolerance = -NEG_EIGEN_TOL * lmax.max(1.0);
        for v in eigenvalues.iter_mut() {
            if *v < tolerance {
                return Err(Error::NotPsd {
                    eigenvalue: *v,
                    tolerance,
                });
            }
            *v = v.max(0.0);
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { eigenvalues, n_obs })
    }

    /// Spectrum of a symmetric matrix.
    pub fn of_symmetric(m: &DMatrix<f64>, n_obs: usize) -> Result<Self> {
        if m.nrows() == 0 {
            return Ok(Self::empty());
        }
        Self::from_raw(m.clone().symmetric_eigenvalues().iter().copied(), n_obs)
    }

    pub fn empty() -> Self {
        Self {
            eigenvalues: Vec::new(),
            n_obs: 0,
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Information gain `γ(ρ⁻¹V) = ½ Σ log(1 + λ_i/ρ)`.
    pub fn info_gain(&self, rho: f64) -> Result<f64> {
        if !(rho > 0.0) {
            return Err(invalid("rho", format!("{rho} is not positive")));
        }
        Ok(self.gain_unchecked(rho))
    }

    fn gain_unchecked(&self, rho: f64) -> f64 {
        0.5 * self.eigenvalues.iter().map(|l| (l / rho).ln_1p()).sum::<f64>()
    }

    /// `ρ* = inf{ρ ≥ 1 : ρ ≥ γ(ρ⁻¹V)}`.
    ///
    /// `ρ ↦ ρ − γ(ρ⁻¹V)` is strictly increasing, so bisection on
    /// `[1, max(1, γ(V))]` converges; the upper end of the final bracket is
    /// returned so that `ρ* ≥ γ(ρ*⁻¹V)` holds exactly in floating point.
    pub fn rho_star(&self) -> f64 {
        let g1 = self.gain_unchecked(1.0);
        if g1 <= 1.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (1.0, g1);
        for _ in 0..200 {
            if hi - lo <= RHO_STAR_TOL * hi.max(1.0) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid >= self.gain_unchecked(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Gram matrix over an ordered list of inputs, grown one point at a time.
#[derive(Debug, Clone)]
pub struct GramState {
    spec: KernelSpec,
    points: Vec<Vec<f64>>,
    gram: DMatrix<f64>,
    /// Added to the diagonal by downstream factorizations; not part of `K`.
    pub jitter: f64,
    eig_cache: OnceCell<Spectrum>,
}

impl GramState {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            points: Vec::new(),
            gram: DMatrix::zeros(0, 0),
            jitter: 0.0,
            eig_cache: OnceCell::new(),
        })
    }

    /// Builds `K` over `points` in one pass.
    pub fn from_points(spec: KernelSpec, points: &[Vec<f64>]) -> Result<Self> {
        spec.validate()?;
        for p in points {
            spec.check_input(p)?;
        }
        let n = points.len();
        let gram = DMatrix::from_fn(n, n, |i, j| spec.eval_unchecked(&points[i], &points[j]));
        Ok(Self {
            spec,
            points: points.to_vec(),
            gram,
            jitter: 0.0,
            eig_cache: OnceCell::new(),
        })
    }

    /// Appends one input, extending `K` by a row and a column.
    pub fn append(&mut self, point: &[f64]) -> Result<()> {
        self.spec.check_input(point)?;
        let n = self.points.len();
        let row: Vec<f64> = self
            .points
            .iter()
            .map(|p| self.spec.eval_unchecked(p, point))
            .collect();
        let diag = self.spec.eval_unchecked(point, point);
        let gram = std::mem::replace(&mut self.gram, DMatrix::zeros(0, 0));
        let mut gram = gram.resize(n + 1, n + 1, 0.0);
        for (i, v) in row.into_iter().enumerate() {
            gram[(i, n)] = v;
            gram[(n, i)] = v;
        }
        gram[(n, n)] = diag;
        self.gram = gram;
        self.points.push(point.to_vec());
        self.eig_cache = OnceCell::new();
        Ok(())
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `k_n(a)`, the kernel column between `a` and every stored point.
    pub fn cross(&self, a: &[f64]) -> Result<DVector<f64>> {
        self.spec.check_input(a)?;
        Ok(DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| self.spec.eval_unchecked(p, a)),
        ))
    }

    /// Spectrum of `K`, recomputed from scratch after any append.
    pub fn spectrum(&self) -> Result<&Spectrum> {
        if let Some(s) = self.eig_cache.get() {
            return Ok(s);
        }
        let s = Spectrum::of_symmetric(&self.gram, self.points.len())?;
        Ok(self.eig_cache.get_or_init(|| s))
    }

    pub fn info_gain(&self, rho: f64) -> Result<f64> {
        self.spectrum()?.info_gain(rho)
    }

    pub fn rho_star(&self) -> Result<f64> {
        Ok(self.spectrum()?.rho_star())
    }
}

/// `γ(ρ⁻¹K)` for a Gram state; see [`Spectrum::info_gain`].
pub fn info_gain(state: &GramState, rho: f64) -> Result<f64> {
    state.info_gain(rho)
}

/// `ρ*` for a Gram state; see [`Spectrum::rho_star`].
pub fn rho_star(state: &GramState) -> Result<f64> {
    state.rho_star()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag_spectrum(value: f64, count: usize) -> Spectrum {
        Spectrum::from_raw(std::iter::repeat_n(value, count), count).unwrap()
    }

    #[test]
    fn rbf_diagonal_is_one() {
        let k = KernelSpec::rbf(3, 1.0);
        let a = [0.3, -2.0, 7.5];
        assert_eq!(k.eval(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn linear_orthogonal_inputs() {
        let k = KernelSpec::linear(2);
        assert_eq!(k.eval(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn rbf_unit_distance() {
        let k = KernelSpec::rbf(1, 1.0);
        assert_relative_eq!(
            k.eval(&[0.0], &[1.0]).unwrap(),
            0.606_530_659_712_633_4,
            epsilon = 1e-15
        );
    }

    #[test]
    fn matern_diagonal_and_decay() {
        let k = KernelSpec::matern52(2, 0.5);
        assert_eq!(k.eval(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        let near = k.eval(&[0.0, 0.0], &[0.1, 0.0]).unwrap();
        let far = k.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(1.0 > near && near > far && far > 0.0);
    }

    #[test]
    fn kernel_input_errors() {
        let k = KernelSpec::linear(2);
        assert!(matches!(
            k.eval(&[1.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            k.eval(&[1.0, 0.1], &[0.0, 1.0]),
            Err(Error::NormTooLarge { .. })
        ));
        // within slack
        assert!(k.eval(&[1.0 + 1e-13, 0.0], &[0.0, 1.0]).is_ok());
    }

    #[test]
    fn append_single_point() {
        let mut g = GramState::new(KernelSpec::rbf(2, 1.0)).unwrap();
        g.append(&[0.5, 0.5]).unwrap();
        assert_eq!(g.matrix().shape(), (1, 1));
        assert_eq!(g.matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn append_matches_batch_exactly() {
        let spec = KernelSpec::matern52(2, 0.7);
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()])
            .collect();
        let batch = GramState::from_points(spec, &pts).unwrap();
        let mut seq = GramState::new(spec).unwrap();
        for p in &pts {
            seq.append(p).unwrap();
        }
        assert_eq!(batch.matrix(), seq.matrix());
    }

    #[test]
    fn duplicate_point_keeps_psd() {
        let mut g = GramState::new(KernelSpec::rbf(1, 0.3)).unwrap();
        for x in [0.1, 0.4, 0.1, 0.1] {
            g.append(&[x]).unwrap();
        }
        let s = g.spectrum().unwrap();
        assert!(s.eigenvalues().iter().all(|&l| l >= 0.0));
        assert!(s.eigenvalues().last().copied().unwrap() < 1e-12);
    }

    #[test]
    fn append_dimension_error() {
        let mut g = GramState::new(KernelSpec::rbf(2, 1.0)).unwrap();
        assert!(g.append(&[0.0]).is_err());
        assert!(g.is_empty());
    }

    #[test]
    fn spectrum_clips_small_negatives_and_rejects_large() {
        let s = Spectrum::from_raw([2.0, -1e-9], 2).unwrap();
        assert_eq!(s.eigenvalues(), &[2.0, 0.0]);
        assert!(matches!(
            Spectrum::from_raw([2.0, -1e-6], 2),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn info_gain_examples() {
        let empty = GramState::new(KernelSpec::rbf(1, 1.0)).unwrap();
        assert_eq!(empty.info_gain(1.0).unwrap(), 0.0);

        let mut one = empty.clone();
        one.append(&[0.0]).unwrap();
        assert_relative_eq!(one.info_gain(1.0).unwrap(), 0.5 * 2f64.ln(), epsilon = 1e-15);

        let s = diag_spectrum(100.0, 10);
        assert_relative_eq!(s.info_gain(10.0).unwrap(), 11.989_476_363_991_853, epsilon = 1e-12);
        assert!(s.info_gain(0.0).is_err());
        assert!(s.info_gain(-1.0).is_err());
    }

    #[test]
    fn rho_star_examples() {
        assert_eq!(Spectrum::empty().rho_star(), 1.0);
        assert_eq!(diag_spectrum(1.0, 1).rho_star(), 1.0);
        // bisection reference and a 1e-4 grid scan both give 11.3983
        let r = diag_spectrum(100.0, 10).rho_star();
        assert!((r - 11.398_256_397_599_124).abs() < 1e-9, "{r}");
    }
}
