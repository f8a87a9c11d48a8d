//! Smooth surrogate of `|r|` with the smoothing variable promoted to a state
//! variable, and the augmented energy built from it.
//!
//! With `c = θμ²` and `a = r / c`:
//!
//! ```text
//! s(r, μ)   = c · ln(exp(a) + exp(-a))   = |r| + c · ln1p(exp(-2|a|))
//! α(r, μ)   = tanh(a)                    (∂s/∂r)
//! λ(r, μ)   = exp(2a) / (exp(2a) + 1)    (logistic of 2a)
//! ∂s/∂μ     = (2/μ) (s − α r)
//! E(z)      = Σ sᵢ,   E1(z) = E(z) + μ²‖x‖²/2,   z = (x, μ)
//! ```
//!
//! At `μ = 0` every quantity takes its limit: `s = |r|`, `α = sign(r)` (0 at
//! `r = 0`), `∂E1/∂μ = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::linalg::{self, Matrix};
use crate::problem::Problem;

/// Beyond `|r| / (θμ²)` of this size the surrogate is treated as saturated:
/// `s = |r|`, `α = ±1`, `λ ∈ {0, 1}`. Below it both `|r| < s` and `|α| < 1`
/// still hold in double precision.
pub const SATURATION: f64 = 16.0;

#[derive(Debug, Error)]
pub enum SmoothingError {
    #[error("smoothing variable μ must be nonzero here")]
    ZeroMu,
    #[error("theta must be positive and finite, got {0}")]
    InvalidTheta(f64),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    theta: f64,
}

impl SmoothingParams {
    pub fn new(theta: f64) -> Result<Self, SmoothingError> {
        if theta > 0.0 && theta.is_finite() {
            Ok(Self { theta })
        } else {
            Err(SmoothingError::InvalidTheta(theta))
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self { theta: 0.02 }
    }
}

/// The flow variable `z = (x, μ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub mu: f64,
}

impl AugmentedState {
    pub fn new(x: Vec<f64>, mu: f64) -> Self {
        Self { x, mu }
    }

    /// Splits a packed `[x₁, …, xₙ, μ]` vector.
    pub fn from_packed(z: &[f64]) -> Self {
        let (x, mu) = z.split_at(z.len() - 1);
        Self {
            x: x.to_vec(),
            mu: mu[0],
        }
    }

    pub fn to_packed(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.push(self.mu);
        z
    }
}

/// Per-residual pieces of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothTerms {
    pub s: f64,
    pub alpha: f64,
    /// `∂s/∂μ`, computed without cancellation.
    pub ds_dmu: f64,
    pub saturated: bool,
}

pub fn smooth_terms(r: f64, mu: f64, params: &SmoothingParams) -> SmoothTerms {
    let c = params.theta * mu * mu;
    if c == 0.0 {
        return SmoothTerms {
            s: r.abs(),
            alpha: sign0(r),
            ds_dmu: 0.0,
            saturated: mu != 0.0,
        };
    }
    let a = r.abs() / c;
    if a > SATURATION {
        return SmoothTerms {
            s: r.abs(),
            alpha: r.signum(),
            ds_dmu: 0.0,
            saturated: true,
        };
    }
    let e = (-2.0 * a).exp();
    let log_term = e.ln_1p();
    // s − αr = |r|(1 − tanh a) + c ln1p(e), and 1 − tanh a = 2e/(1+e)
    let gap_r = r.abs() * (2.0 * e / (1.0 + e));
    SmoothTerms {
        s: r.abs() + c * log_term,
        alpha: r.signum() * a.tanh(),
        ds_dmu: 2.0 * gap_r / mu + 2.0 * params.theta * mu * log_term,
        saturated: false,
    }
}

fn sign0(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r.signum()
    }
}

/// The surrogate `s(r, μ)`; equals `|r|` at `μ = 0`.
pub fn smooth_abs(r: f64, mu: f64, params: &SmoothingParams) -> f64 {
    smooth_terms(r, mu, params).s
}

/// The smoothed sign `α(r, μ) = tanh(r / θμ²)`; `sign(r)` at `μ = 0`.
pub fn alpha(r: f64, mu: f64, params: &SmoothingParams) -> f64 {
    smooth_terms(r, mu, params).alpha
}

/// `λ(r, μ) = exp(2r/θμ²) / (exp(2r/θμ²) + 1)` as a stable logistic.
pub fn lambda_coeff(r: f64, mu: f64, params: &SmoothingParams) -> Result<f64, SmoothingError> {
    let c = params.theta * mu * mu;
    if mu == 0.0 {
        return Err(SmoothingError::ZeroMu);
    }
    Ok(logistic_2a(r, c).0)
}

/// Returns `(λ, 1 − λ)` for `a = r / c`, both computed without cancellation.
fn logistic_2a(r: f64, c: f64) -> (f64, f64) {
    let a = r / c;
    if c == 0.0 || a.abs() > SATURATION {
        return if r > 0.0 { (1.0, 0.0) } else { (0.0, 1.0) };
    }
    let e = (-2.0 * a.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e / (1.0 + e);
    if a >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

/// `∂s/∂μ = (2/μ)(s − α r)` from already computed `s` and `α`; 0 at `μ = 0`.
pub fn smooth_abs_dmu(r: f64, mu: f64, s: f64, a: f64) -> f64 {
    if mu == 0.0 {
        0.0
    } else {
        2.0 / mu * (s - a * r)
    }
}

/// Energy, its gradient and the per-residual surrogate values at `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `E(z) = Σ sᵢ`
    pub e: f64,
    /// `E1(z) = E(z) + μ²‖x‖²/2`
    pub e1: f64,
    /// `(∇ₓE1, ∂E1/∂μ)`, length n + 1.
    pub grad: Vec<f64>,
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl EnergyReport {
    pub fn grad_norm(&self) -> f64 {
        linalg::norm2(&self.grad)
    }

    pub fn grad_x(&self) -> &[f64] {
        &self.grad[..self.grad.len() - 1]
    }

    pub fn grad_mu(&self) -> f64 {
        self.grad[self.grad.len() - 1]
    }
}

pub fn energy(
    z: &AugmentedState,
    problem: &Problem,
    params: &SmoothingParams,
) -> Result<EnergyReport, EvalError> {
    energy_scaled(z, problem, params, 1.0)
}

/// `energy` with every αᵢ multiplied by `alpha_scale` in the gradient. Only
/// used to check that the self-test detects a corrupted gradient.
pub(crate) fn energy_scaled(
    z: &AugmentedState,
    problem: &Problem,
    params: &SmoothingParams,
    alpha_scale: f64,
) -> Result<EnergyReport, EvalError> {
    let (r, jac) = problem.residuals_and_jacobian(&z.x)?;
    let mu = z.mu;
    let n = z.x.len();
    let xx = linalg::dot(&z.x, &z.x);
    let mut grad = vec![0.0; n + 1];
    let mut s = Vec::with_capacity(r.len());
    let mut alphas = Vec::with_capacity(r.len());
    let mut dmu = 0.0;
    for (i, &ri) in r.iter().enumerate() {
        let t = smooth_terms(ri, mu, params);
        linalg::axpy(t.alpha * alpha_scale, jac.row(i), &mut grad[..n]);
        dmu += t.ds_dmu;
        s.push(t.s);
        alphas.push(t.alpha);
    }
    linalg::axpy(mu * mu, &z.x, &mut grad[..n]);
    grad[n] = if mu == 0.0 { 0.0 } else { dmu + mu * xx };
    let e: f64 = s.iter().sum();
    Ok(EnergyReport {
        e,
        e1: e + 0.5 * mu * mu * xx,
        grad,
        s,
        alpha: alphas,
    })
}

/// Full (n+1)×(n+1) Hessian of `E1` at `z`, ordered `(x, μ)`. Diagnostic
/// only; the flow never needs it.
pub fn hessian_blocks(
    z: &AugmentedState,
    problem: &Problem,
    params: &SmoothingParams,
) -> Result<Matrix, SmoothingError> {
    let mu = z.mu;
    if mu == 0.0 {
        return Err(SmoothingError::ZeroMu);
    }
    let n = z.x.len();
    let (r, jac, hessians) = problem.residuals_with_hessians(&z.x)?;
    let c = params.theta * mu * mu;
    let mut h = Matrix::zeros(n + 1, n + 1);
    for (i, &ri) in r.iter().enumerate() {
        let t = smooth_terms(ri, mu, params);
        let (lam, one_minus_lam) = logistic_2a(ri, c);
        // (1 − α) = 2(1 − λ), so λ(1 − α) vanishes in both saturated tails
        let lam_oma = lam * 2.0 * one_minus_lam;
        let a = ri / c;
        let gap = t.ds_dmu * mu / 2.0;
        let grad_r = jac.row(i);
        let curv = 2.0 * lam_oma / c;
        let cross = -4.0 * lam_oma * ri / (c * mu);
        for j in 0..n {
            for k in 0..n {
                h[(j, k)] += curv * grad_r[j] * grad_r[k] + t.alpha * hessians[i][(j, k)];
            }
            h[(j, n)] += cross * grad_r[j];
        }
        h[(n, n)] += 2.0 / (mu * mu) * gap + 8.0 * ri * a * lam_oma / (mu * mu);
    }
    let xx = linalg::dot(&z.x, &z.x);
    for j in 0..n {
        h[(j, j)] += mu * mu;
        h[(j, n)] += 2.0 * mu * z.x[j];
        h[(n, j)] = h[(j, n)];
    }
    h[(n, n)] += xx;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference values from 30-digit evaluations of the defining formulas.
    const LN_E_PLUS_INV_E: f64 = 1.126_928_011_042_972_5;
    const TANH_1: f64 = 0.761_594_155_955_764_9;
    const LOGISTIC_2: f64 = 0.880_797_077_977_882_4;
    const DMU_AT_1_1: f64 = 0.730_667_710_174_415_2;

    fn unit() -> SmoothingParams {
        SmoothingParams::new(1.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn smooth_abs_examples() {
        assert!(close(
            smooth_abs(0.0, 1.0, &unit()),
            std::f64::consts::LN_2,
            1e-15
        ));
        assert!(close(smooth_abs(1.0, 1.0, &unit()), LN_E_PLUS_INV_E, 1e-15));
        let big = smooth_abs(1e6, 0.1, &SmoothingParams::default());
        assert_eq!(big, 1e6);
        assert_eq!(smooth_abs(-2.5, 0.0, &unit()), 2.5);
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha(0.0, 0.3, &unit()), 0.0);
        assert_eq!(alpha(0.0, 0.0, &unit()), 0.0);
        assert!(close(alpha(1.0, 1.0, &unit()), TANH_1, 1e-15));
        assert_eq!(alpha(-1.0, 0.0, &unit()), -1.0);
        assert_eq!(alpha(3.0, 0.0, &unit()), 1.0);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_coeff(0.0, 1.0, &unit()).unwrap(), 0.5);
        assert!(close(
            lambda_coeff(1.0, 1.0, &unit()).unwrap(),
            LOGISTIC_2,
            1e-15
        ));
        assert_eq!(lambda_coeff(1e300, 1.0, &unit()).unwrap(), 1.0);
        assert_eq!(lambda_coeff(-1e300, 1.0, &unit()).unwrap(), 0.0);
        assert!(matches!(
            lambda_coeff(1.0, 0.0, &unit()),
            Err(SmoothingError::ZeroMu)
        ));
    }

    #[test]
    fn dmu_examples() {
        let p = unit();
        let (s, a) = (smooth_abs(1.0, 1.0, &p), alpha(1.0, 1.0, &p));
        assert!(close(smooth_abs_dmu(1.0, 1.0, s, a), DMU_AT_1_1, 1e-14));
        assert!(close(smooth_terms(1.0, 1.0, &p).ds_dmu, DMU_AT_1_1, 1e-14));
        let (s, a) = (smooth_abs(0.0, 1.0, &p), alpha(0.0, 1.0, &p));
        assert!(close(
            smooth_abs_dmu(0.0, 1.0, s, a),
            2.0 * std::f64::consts::LN_2,
            1e-15
        ));
        assert_eq!(smooth_abs_dmu(5.0, 0.0, 5.0, 1.0), 0.0);
    }

    #[test]
    fn rejects_bad_theta() {
        assert!(SmoothingParams::new(0.0).is_err());
        assert!(SmoothingParams::new(-1.0).is_err());
        assert!(SmoothingParams::new(f64::NAN).is_err());
    }

    #[test]
    fn energy_single_linear_residual() {
        let p = Problem::new(&["x1"], 1).unwrap();
        let rep = energy(&AugmentedState::new(vec![1.0], 1.0), &p, &unit()).unwrap();
        assert!(close(rep.grad[0], 1.0 + TANH_1, 1e-15));
        assert!(close(rep.grad[1], 1.0 + DMU_AT_1_1, 1e-14));
        assert!(close(rep.e, LN_E_PLUS_INV_E, 1e-15));
        assert_eq!(rep.e1, rep.e + 0.5);
    }

    #[test]
    fn energy_at_zero_mu_is_the_objective() {
        let p = crate::problem::builtin("problem1").unwrap();
        let x = vec![0.4, -0.7];
        let rep = energy(
            &AugmentedState::new(x.clone(), 0.0),
            &p,
            &SmoothingParams::default(),
        )
        .unwrap();
        assert_eq!(rep.e, p.objective(&x).unwrap());
        assert_eq!(rep.e1, rep.e);
        assert_eq!(rep.grad_mu(), 0.0);
    }

    #[test]
    fn energy_vanishes_at_problem1_minimum() {
        let p = crate::problem::builtin("problem1").unwrap();
        let z = AugmentedState::new(vec![3f64.sqrt(), 0.0], 0.0);
        let rep = energy(&z, &p, &SmoothingParams::default()).unwrap();
        assert!(rep.e1 < 1e-14);
        // r1(√3) rounds to a tiny nonzero value, so α1 = ±1 times ∇r1 = (6, 0)
        // would not vanish; the limit member at an exact zero does
        let zero = energy(
            &AugmentedState::new(vec![0.0, 0.0], 0.0),
            &p,
            &SmoothingParams::default(),
        )
        .unwrap();
        assert_eq!(zero.grad, vec![0.0, 0.0, 0.0]);
        let stat = p.stationarity(&z.x).unwrap();
        assert!(stat.kkt_residual < 1e-12);
    }

    #[test]
    fn hessian_closed_form_at_zero_residual() {
        let p = Problem::new(&["x1"], 1).unwrap();
        let h = hessian_blocks(&AugmentedState::new(vec![0.0], 1.0), &p, &unit()).unwrap();
        assert!(close(h[(0, 0)], 2.0, 1e-15));
        assert!(matches!(
            hessian_blocks(&AugmentedState::new(vec![0.0], 0.0), &p, &unit()),
            Err(SmoothingError::ZeroMu)
        ));
    }

    #[test]
    fn packed_round_trip() {
        let z = AugmentedState::new(vec![1.0, 2.0], 3.0);
        assert_eq!(AugmentedState::from_packed(&z.to_packed()), z);
    }

    proptest! {
        #[test]
        fn surrogate_bounds(r in -1e3f64..1e3, mu in 1e-4f64..1e2, theta in 1e-3f64..10.0) {
            let p = SmoothingParams::new(theta).unwrap();
            let t = smooth_terms(r, mu, &p);
            let c = theta * mu * mu;
            if t.saturated {
                prop_assert!(t.s >= r.abs());
                prop_assert_eq!(t.alpha.abs(), 1.0);
            } else if r != 0.0 {
                prop_assert!(t.s > r.abs(), "s {} r {}", t.s, r);
                prop_assert!(t.s < r.abs() + c * std::f64::consts::LN_2);
                prop_assert!(t.alpha.abs() < 1.0);
            }
            prop_assert_eq!(smooth_abs(0.0 + r, 0.0, &p), r.abs());
        }

        #[test]
        fn symmetry(r in -50f64..50.0, mu in 1e-3f64..10.0) {
            let p = SmoothingParams::default();
            let s = smooth_abs(r, mu, &p);
            prop_assert_eq!(s, smooth_abs(-r, mu, &p));
            prop_assert_eq!(s, smooth_abs(r, -mu, &p));
            prop_assert_eq!(alpha(r, mu, &p), -alpha(-r, mu, &p));
            prop_assert_eq!(alpha(r, mu, &p), alpha(r, -mu, &p));
            let a = alpha(r, mu, &p);
            prop_assert!(a == 0.0 || a.signum() == r.signum());
        }

        #[test]
        fn strict_gap(r in -1e3f64..1e3, mu in 1e-4f64..1e2) {
            let p = SmoothingParams::default();
            let t = smooth_terms(r, mu, &p);
            let gap = t.s - t.alpha * r;
            if t.saturated {
                prop_assert!(gap >= 0.0);
            } else {
                prop_assert!(gap > 0.0);
                prop_assert!(t.ds_dmu * mu > 0.0);
            }
        }

        #[test]
        fn ds_dmu_agrees_with_naive_formula(r in -10f64..10.0, mu in 0.05f64..5.0) {
            let p = SmoothingParams::new(1.0).unwrap();
            let t = smooth_terms(r, mu, &p);
            let naive = smooth_abs_dmu(r, mu, t.s, t.alpha);
            prop_assert!((t.ds_dmu - naive).abs() <= 1e-12 * (1.0 + naive.abs()));
        }
    }
}
