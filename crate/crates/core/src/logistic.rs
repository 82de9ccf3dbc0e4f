//! Ridge-regularised kernel logistic regression.
//!
//! The estimator minimises `Σ ℓ(f(A_i), Y_i) + ρ‖f‖²` over the RKHS. By the
//! representer theorem `f = Σ α_j k(A_j, ·)`, so the fit runs on `α`. Repeated
//! inputs may be grouped: a design point observed `c` times with response sum
//! `s` contributes `c·softplus(f) − s·f` to the loss, which is exactly the sum
//! of its individual losses.
//!
//! Ellipsoid widths use `Ĥ_n = Σ V(f̂(A_j)) φ(A_j) ⊗ φ(A_j) + ρI`. Woodbury
//! gives `‖Ĥ_n^{−1/2} φ(a)‖² = σ_n²(a)/ρ` with the predictive variance
//! `σ_n²(a) = k(a,a) − k_n(a)ᵀ(ρW_n⁻¹ + K_n)⁻¹k_n(a)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, Error, Result};
use crate::kernel::GramState;

/// Lower floor applied to `V(u)` wherever it is inverted.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Relative jitter added to the diagonal before Cholesky.
pub const JITTER: f64 = 1e-12;

const MAX_NEWTON_ITERS: usize = 100;
const ARMIJO_C: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-10;

/// `μ(u) = 1/(1 + e^{−u})`, evaluated without overflow.
pub fn link_mu(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli variance `V(u) = μ(u)(1 − μ(u))`.
pub fn variance_fn(u: f64) -> f64 {
    let e = (-u.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// `log(1 + e^u)`.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// `ℓ(u, y) = −y log μ(u) − (1 − y) log(1 − μ(u))`, computed as
/// `softplus(u) − y·u`.
pub fn logistic_loss(u: f64, y: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) {
        return Err(invalid("y", format!("{y} outside [0, 1]")));
    }
    Ok(softplus(u) - y * u)
}

fn check_responses(responses: &[f64]) -> Result<()> {
    match responses.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        Some(y) => Err(invalid("responses", format!("{y} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho > 0.0 {
        Ok(())
    } else {
        Err(invalid("rho", format!("{rho} is not positive")))
    }
}

fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let max_diag = m.diagonal().iter().copied().fold(0.0, f64::max);
    let jitter = JITTER * max_diag.max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m).ok_or_else(|| Error::Factorization("matrix not positive definite".into()))
}

/// Solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub tolerance: f64,
}

/// Kernel logistic model in representer form over (possibly grouped)
/// design points.
#[derive(Debug, Clone)]
pub struct DualLogisticModel {
    gram: GramState,
    counts: Vec<f64>,
    response_sums: Vec<f64>,
    alpha: DVector<f64>,
    fitted: DVector<f64>,
    fitted_means: Vec<f64>,
    weights: Vec<f64>,
    rho: f64,
    convergence: Convergence,
    /// Cholesky of `ρI + B K B` with `B = diag(√(c_i w_i))`.
    factor: Option<Cholesky<f64, Dyn>>,
    sqrt_precision: DVector<f64>,
}

impl DualLogisticModel {
    /// Fits with one response per stored point.
    pub fn fit(gram: GramState, responses: &[f64], rho: f64) -> Result<Self> {
        if responses.len() != gram.len() {
            return Err(Error::DimensionMismatch {
                expected: gram.len(),
                got: responses.len(),
            });
        }
        check_responses(responses)?;
        let counts = vec![1.0; responses.len()];
        Self::fit_grouped(gram, counts, responses.to_vec(), rho, None)
    }

    /// Fits with per-point multiplicities and response sums. `warm_start`
    /// seeds Newton; shorter vectors are zero-padded.
    pub fn fit_grouped(
        gram: GramState,
        counts: Vec<f64>,
        response_sums: Vec<f64>,
        rho: f64,
        warm_start: Option<&[f64]>,
    ) -> Result<Self> {
        check_rho(rho)?;
        let n = gram.len();
        for (name, v) in [("counts", &counts), ("response_sums", &response_sums)] {
            if v.len() != n {
                return Err(invalid(name, format!("length {} but {} points", v.len(), n)));
            }
        }
        for (c, s) in counts.iter().zip(&response_sums) {
            if !(c.is_finite() && *c > 0.0) {
                return Err(invalid("counts", format!("{c} is not positive")));
            }
            if !(*s >= 0.0 && *s <= *c) {
                return Err(invalid("response_sums", format!("{s} outside [0, {c}]")));
            }
        }
        let mut alpha = DVector::zeros(n);
        if let Some(w) = warm_start {
            for (a, v) in alpha.iter_mut().zip(w) {
                *a = *v;
            }
        }
        let total: f64 = counts.iter().sum();
        let problem = DualProblem {
            k: gram.matrix(),
            counts: &counts,
            sums: &response_sums,
            rho,
            tolerance: GRAD_TOL * total.max(1.0),
        };
        let convergence = problem.solve(&mut alpha)?;
        if !convergence.converged {
            return Err(Error::NoConvergence {
                iterations: convergence.iterations,
                grad_norm: convergence.grad_norm,
            });
        }
        let fitted = gram.matrix() * &alpha;
        let fitted_means = fitted.iter().map(|&f| link_mu(f)).collect();
        let weights: Vec<f64> = fitted.iter().map(|&f| variance_fn(f)).collect();
        let sqrt_precision = DVector::from_iterator(
            n,
            counts.iter().zip(&weights).map(|(c, w)| (c * w).sqrt()),
        );
        let factor = if n > 0 {
            let bkb = DMatrix::from_fn(n, n, |i, j| {
                sqrt_precision[i] * gram.matrix()[(i, j)] * sqrt_precision[j]
            });
            Some(cholesky_with_jitter(
                bkb + DMatrix::from_diagonal_element(n, n, rho),
            )?)
        } else {
            None
        };
        Ok(Self {
            gram,
            counts,
            response_sums,
            alpha,
            fitted,
            fitted_means,
            weights,
            rho,
            convergence,
            factor,
            sqrt_precision,
        })
    }

    pub fn gram(&self) -> &GramState {
        &self.gram
    }

    pub fn into_gram(self) -> GramState {
        self.gram
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn response_sums(&self) -> &[f64] {
        &self.response_sums
    }

    /// `f̂(A_i) = (Kα)_i`.
    pub fn fitted_values(&self) -> &[f64] {
        self.fitted.as_slice()
    }

    pub fn fitted_means(&self) -> &[f64] {
        &self.fitted_means
    }

    /// `V(f̂(A_i))`, unfloored.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn convergence(&self) -> Convergence {
        self.convergence
    }

    /// Dual objective `Σ c_i softplus(f_i) − s_i f_i + ρ αᵀKα` at `alpha`.
    pub fn objective_at(&self, alpha: &[f64]) -> f64 {
        self.problem().objective(&DVector::from_column_slice(alpha))
    }

    /// Gradient `K(c⊙μ(Kα) − s + 2ρα)` at `alpha`.
    pub fn gradient_at(&self, alpha: &[f64]) -> Vec<f64> {
        let a = DVector::from_column_slice(alpha);
        let f = self.gram.matrix() * &a;
        let r = self.problem().residual(&a, &f);
        (self.gram.matrix() * r).as_slice().to_vec()
    }

    fn problem(&self) -> DualProblem<'_> {
        DualProblem {
            k: self.gram.matrix(),
            counts: &self.counts,
            sums: &self.response_sums,
            rho: self.rho,
            tolerance: self.convergence.tolerance,
        }
    }

    /// `f̂(a) = k_n(a)ᵀα`.
    pub fn predict_mean(&self, a: &[f64]) -> Result<f64> {
        Ok(self.gram.cross(a)?.dot(&self.alpha))
    }

    /// `σ_n²(a)`, clamped into `[0, k(a,a)]`.
    ///
    /// Evaluated as `k(a,a) − bᵀ(ρI + BKB)⁻¹b` with `B = diag(√(c_i w_i))`
    /// and `b = B k_n(a)`, which equals the `ρW⁻¹ + K` form and stays finite
    /// when weights underflow.
    pub fn predictive_variance(&self, a: &[f64]) -> Result<f64> {
        let kaa = self.gram.spec().eval(a, a)?;
        let Some(factor) = &self.factor else {
            return Ok(kaa);
        };
        let b = self.gram.cross(a)?.component_mul(&self.sqrt_precision);
        let z = factor.solve(&b);
        Ok((kaa - b.dot(&z)).clamp(0.0, kaa))
    }

    /// `‖Ĥ_n^{−1/2} φ(a)‖ = σ_n(a)/√ρ`.
    pub fn ellipsoid_width(&self, a: &[f64]) -> Result<f64> {
        Ok((self.predictive_variance(a)? / self.rho).sqrt())
    }

    /// `f̂(a) ± width·‖Ĥ_n^{−1/2} φ(a)‖`.
    pub fn confidence_band(&self, a: &[f64], width: f64) -> Result<(f64, f64)> {
        if !(width >= 0.0) {
            return Err(invalid("width", format!("{width} is negative")));
        }
        let mean = self.predict_mean(a)?;
        let half = width * self.ellipsoid_width(a)?;
        Ok((mean - half, mean + half))
    }
}

/// `σ²(a)` for fixed per-point precisions `c_i w_i`, without refitting.
pub fn predictive_variance_with_precision(
    gram: &GramState,
    precision: &[f64],
    rho: f64,
    a: &[f64],
) -> Result<f64> {
    check_rho(rho)?;
    if precision.len() != gram.len() {
        return Err(Error::DimensionMismatch {
            expected: gram.len(),
            got: precision.len(),
        });
    }
    let kaa = gram.spec().eval(a, a)?;
    let n = gram.len();
    if n == 0 {
        return Ok(kaa);
    }
    let sp = DVector::from_iterator(n, precision.iter().map(|p| p.max(0.0).sqrt()));
    let m = DMatrix::from_fn(n, n, |i, j| sp[i] * gram.matrix()[(i, j)] * sp[j])
        + DMatrix::from_diagonal_element(n, n, rho);
    let factor = cholesky_with_jitter(m)?;
    let b = gram.cross(a)?.component_mul(&sp);
    Ok((kaa - b.dot(&factor.solve(&b))).clamp(0.0, kaa))
}

struct DualProblem<'a> {
    k: &'a DMatrix<f64>,
    counts: &'a [f64],
    sums: &'a [f64],
    rho: f64,
    tolerance: f64,
}

impl DualProblem<'_> {
    fn objective(&self, alpha: &DVector<f64>) -> f64 {
        let f = self.k * alpha;
        self.objective_with(alpha, &f)
    }

    fn objective_with(&self, alpha: &DVector<f64>, f: &DVector<f64>) -> f64 {
        let loss: f64 = f
            .iter()
            .zip(self.counts.iter().zip(self.sums))
            .map(|(&fi, (&c, &s))| c * softplus(fi) - s * fi)
            .sum();
        loss + self.rho * alpha.dot(f)
    }

    /// `r = c⊙μ(f) − s + 2ρα`; the gradient is `K r`.
    fn residual(&self, alpha: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            alpha.len(),
            (0..alpha.len())
                .map(|i| self.counts[i] * link_mu(f[i]) - self.sums[i] + 2.0 * self.rho * alpha[i]),
        )
    }

    /// Damped Newton. The Hessian `K(DK + 2ρI)` with `D = diag(c⊙w)` is
    /// singular when `K` is, so the step solves `(DK + 2ρI)Δ = −r`, which
    /// satisfies the Newton system `HΔ = −Kr`.
    fn solve(&self, alpha: &mut DVector<f64>) -> Result<Convergence> {
        let n = alpha.len();
        let mut f = self.k * &*alpha;
        let mut obj = self.objective_with(alpha, &f);
        let mut iterations = 0;
        loop {
            if !obj.is_finite() {
                return Err(Error::NonFinite("dual objective"));
            }
            let r = self.residual(alpha, &f);
            let grad = self.k * &r;
            let grad_norm = grad.norm();
            if grad_norm <= self.tolerance || n == 0 {
                return Ok(Convergence {
                    converged: true,
                    iterations,
                    grad_norm,
                    tolerance: self.tolerance,
                });
            }
            if iterations == MAX_NEWTON_ITERS {
                return Ok(Convergence {
                    converged: false,
                    iterations,
                    grad_norm,
                    tolerance: self.tolerance,
                });
            }
            iterations += 1;

            let mut system = self.k.clone();
            for i in 0..n {
                let d = self.counts[i] * variance_fn(f[i]);
                system.row_mut(i).scale_mut(d);
                system[(i, i)] += 2.0 * self.rho;
            }
            let step = system
                .lu()
                .solve(&(-&r))
                .ok_or_else(|| Error::Factorization("singular Newton system".into()))?;
            let slope = grad.dot(&step);

            // Predicted decrease below rounding: inside the quadratic region,
            // where Armijo can no longer tell steps apart.
            let mut t = if -slope <= 1e-13 * obj.abs().max(1.0) { 0.0 } else { 1.0 };
            let mut accepted = false;
            while t > 1e-12 {
                let cand = &*alpha + t * &step;
                let cand_f = self.k * &cand;
                let cand_obj = self.objective_with(&cand, &cand_f);
                if cand_obj <= obj + ARMIJO_C * t * slope {
                    *alpha = cand;
                    f = cand_f;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Near the optimum the objective change drops below rounding;
                // keep the full step if it still shrinks the gradient.
                let cand = &*alpha + &step;
                let cand_f = self.k * &cand;
                let cand_grad = (self.k * self.residual(&cand, &cand_f)).norm();
                if cand_grad < grad_norm {
                    obj = self.objective_with(&cand, &cand_f);
                    *alpha = cand;
                    f = cand_f;
                } else {
                    return Ok(Convergence {
                        converged: false,
                        iterations,
                        grad_norm,
                        tolerance: self.tolerance,
                    });
                }
            }
        }
    }
}

/// Finite-dimensional logistic regression with explicit features, used as an
/// oracle for the dual solver and for ellipsoid norms.
#[derive(Debug, Clone)]
pub struct PrimalReferenceModel {
    features: DMatrix<f64>,
    responses: Vec<f64>,
    weights: DVector<f64>,
    rho: f64,
    hessian: DMatrix<f64>,
    hessian_chol: Cholesky<f64, Dyn>,
    convergence: Convergence,
}

impl PrimalReferenceModel {
    /// Full Newton on `Σ ℓ(⟨f, x_i⟩, Y_i) + ρ‖f‖²`; `features` holds one
    /// covariate per column.
    pub fn fit(features: DMatrix<f64>, responses: &[f64], rho: f64) -> Result<Self> {
        Self::fit_warm(features, responses, rho, None)
    }

    pub fn fit_warm(
        features: DMatrix<f64>,
        responses: &[f64],
        rho: f64,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<Self> {
        check_rho(rho)?;
        check_responses(responses)?;
        let (d, n) = features.shape();
        if responses.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: responses.len(),
            });
        }
        if d == 0 {
            return Err(invalid("features", "zero-dimensional covariates"));
        }
        for col in features.column_iter() {
            let norm = col.norm();
            if norm > 1.0 + crate::kernel::LINEAR_NORM_SLACK {
                return Err(Error::NormTooLarge { norm });
            }
        }
        let y = DVector::from_column_slice(responses);
        let mut w = match warm_start {
            Some(w0) if w0.len() == d => w0.clone(),
            _ => DVector::zeros(d),
        };
        let objective = |w: &DVector<f64>| -> f64 {
            let u = features.tr_mul(w);
            u.iter().zip(y.iter()).map(|(&ui, &yi)| softplus(ui) - yi * ui).sum::<f64>()
                + rho * w.norm_squared()
        };
        let tolerance = GRAD_TOL * (n as f64).max(1.0);
        let mut obj = objective(&w);
        let mut iterations = 0;
        let convergence = loop {
            if !obj.is_finite() {
                return Err(Error::NonFinite("primal objective"));
            }
            let u = features.tr_mul(&w);
            let resid = DVector::from_iterator(n, u.iter().zip(y.iter()).map(|(&ui, &yi)| link_mu(ui) - yi));
            let grad = &features * resid + 2.0 * rho * &w;
            let grad_norm = grad.norm();
            if grad_norm <= tolerance || iterations == MAX_NEWTON_ITERS {
                break Convergence {
                    converged: grad_norm <= tolerance,
                    iterations,
                    grad_norm,
                    tolerance,
                };
            }
            iterations += 1;
            let vw = DVector::from_iterator(n, u.iter().map(|&ui| variance_fn(ui)));
            let hess = weighted_gram(&features, &vw) + DMatrix::from_diagonal_element(d, d, 2.0 * rho);
            let step = Cholesky::new(hess)
                .ok_or_else(|| Error::Factorization("primal Hessian".into()))?
                .solve(&(-&grad));
            let slope = grad.dot(&step);
            // Near the optimum the objective is flat to rounding; the pure
            // Newton step is then the right move.
            let flat = -slope <= 1e-13 * obj.abs().max(1.0);
            let mut t = 1.0;
            loop {
                let cand = &w + t * &step;
                let cand_obj = objective(&cand);
                if flat || cand_obj <= obj + ARMIJO_C * t * slope || t < 1e-12 {
                    w = cand;
                    obj = cand_obj;
                    break;
                }
                t *= 0.5;
            }
        };
        if !convergence.converged {
            return Err(Error::NoConvergence {
                iterations: convergence.iterations,
                grad_norm: convergence.grad_norm,
            });
        }
        let vw = DVector::from_iterator(n, features.tr_mul(&w).iter().map(|&u| variance_fn(u)));
        let hessian = weighted_gram(&features, &vw) + DMatrix::from_diagonal_element(d, d, rho);
        let hessian_chol = Cholesky::new(hessian.clone())
            .ok_or_else(|| Error::Factorization("Ĥ_n".into()))?;
        Ok(Self {
            features,
            responses: responses.to_vec(),
            weights: w,
            rho,
            hessian,
            hessian_chol,
            convergence,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn convergence(&self) -> Convergence {
        self.convergence
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.weights.dot(&DVector::from_column_slice(x))
    }

    /// `Ĥ_n = Σ V(⟨f̂, x_j⟩) x_j x_jᵀ + ρI`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// `H*_n = Σ V(⟨f*, x_j⟩) x_j x_jᵀ + ρI`.
    pub fn oracle_hessian(&self, f_star: &DVector<f64>) -> DMatrix<f64> {
        let vw = DVector::from_iterator(
            self.features.ncols(),
            self.features.tr_mul(f_star).iter().map(|&u| variance_fn(u)),
        );
        weighted_gram(&self.features, &vw)
            + DMatrix::from_diagonal_element(self.dim(), self.dim(), self.rho)
    }

    /// `‖Ĥ_n^{−1/2} v‖ = √(vᵀĤ_n⁻¹v)`.
    pub fn inverse_norm(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.hessian_chol.solve(v)).max(0.0).sqrt()
    }

    /// `‖Ĥ_n^{1/2} v‖ = √(vᵀĤ_n v)`.
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        quad_norm(&self.hessian, v)
    }
}

/// `√(vᵀ M v)` for a PSD `M`.
pub fn quad_norm(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v)).max(0.0).sqrt()
}

/// `Σ_j w_j x_j x_jᵀ` over the columns of `x`.
fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for (mut col, &wj) in scaled.column_iter_mut().zip(w.iter()) {
        col *= wj;
    }
    scaled * x.transpose()
}
