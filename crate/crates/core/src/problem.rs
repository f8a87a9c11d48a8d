//! The L1 problem `min f(x) = Σ |rᵢ(x)|`, its subdifferential stationarity
//! test, and the built-in benchmark problems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Order, ParseError, ResidualExpr};
use crate::linalg::{self, Matrix};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("cannot parse residual {index}")]
    Parse {
        index: usize,
        #[source]
        source: ParseError,
    },
    #[error("a problem needs at least one residual")]
    NoResiduals,
    #[error("a problem needs at least one variable")]
    NoVariables,
    #[error("sample box has {got} intervals for {n_vars} variables")]
    BoxDimension { got: usize, n_vars: usize },
    #[error("sample box interval {index} is empty or not finite: [{lo}, {hi}]")]
    EmptyInterval { index: usize, lo: f64, hi: f64 },
    #[error("unknown built-in problem `{0}` (expected `problem1` or `rastrigin_l1`)")]
    UnknownBuiltin(String),
}

/// A closed interval `[lo, hi]` used to sample starting points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    name: Option<String>,
    residuals: Vec<ResidualExpr>,
    n_vars: usize,
    sample_box: Option<Vec<Interval>>,
    known_minima: Vec<Vec<f64>>,
}

impl Problem {
    pub fn new<S: AsRef<str>>(residuals: &[S], n_vars: usize) -> Result<Self, ProblemError> {
        if residuals.is_empty() {
            return Err(ProblemError::NoResiduals);
        }
        if n_vars == 0 {
            return Err(ProblemError::NoVariables);
        }
        let residuals = residuals
            .iter()
            .enumerate()
            .map(|(index, text)| {
                ResidualExpr::parse(text.as_ref(), n_vars)
                    .map_err(|source| ProblemError::Parse { index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            name: None,
            residuals,
            n_vars,
            sample_box: None,
            known_minima: Vec::new(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn with_sample_box(mut self, intervals: Vec<Interval>) -> Result<Self, ProblemError> {
        if intervals.len() != self.n_vars {
            return Err(ProblemError::BoxDimension {
                got: intervals.len(),
                n_vars: self.n_vars,
            });
        }
        for (index, iv) in intervals.iter().enumerate() {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(ProblemError::EmptyInterval {
                    index,
                    lo: iv.lo,
                    hi: iv.hi,
                });
            }
        }
        self.sample_box = Some(intervals);
        Ok(self)
    }

    pub fn with_known_minima(mut self, minima: Vec<Vec<f64>>) -> Self {
        self.known_minima = minima;
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn residual_exprs(&self) -> &[ResidualExpr] {
        &self.residuals
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_residuals(&self) -> usize {
        self.residuals.len()
    }

    pub fn sample_box(&self) -> Option<&[Interval]> {
        self.sample_box.as_deref()
    }

    pub fn known_minima(&self) -> &[Vec<f64>] {
        &self.known_minima
    }

    pub fn residuals(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.residuals.iter().map(|r| r.eval(x)).collect()
    }

    /// `f(x) = Σ |rᵢ(x)|`.
    pub fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.residuals(x)?.iter().map(|r| r.abs()).sum())
    }

    /// Residual vector and the m×n Jacobian whose rows are `∇rᵢ(x)`.
    pub fn residuals_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Matrix), EvalError> {
        let mut values = Vec::with_capacity(self.residuals.len());
        let mut jac = Matrix::zeros(self.residuals.len(), self.n_vars);
        for (i, r) in self.residuals.iter().enumerate() {
            let d = r.eval_dual(x, Order::First)?;
            values.push(d.value);
            for (j, g) in d.first.iter().enumerate() {
                jac[(i, j)] = *g;
            }
        }
        Ok((values, jac))
    }

    /// Like [`Problem::residuals_and_jacobian`], plus each residual's Hessian.
    pub fn residuals_with_hessians(
        &self,
        x: &[f64],
    ) -> Result<(Vec<f64>, Matrix, Vec<Matrix>), EvalError> {
        let mut values = Vec::with_capacity(self.residuals.len());
        let mut jac = Matrix::zeros(self.residuals.len(), self.n_vars);
        let mut hessians = Vec::with_capacity(self.residuals.len());
        for (i, r) in self.residuals.iter().enumerate() {
            let d = r.eval_dual(x, Order::Second)?;
            values.push(d.value);
            for (j, g) in d.first.iter().enumerate() {
                jac[(i, j)] = *g;
            }
            hessians.push(d.second.expect("second order requested"));
        }
        Ok((values, jac, hessians))
    }

    /// Minimum-norm element of `∂f(x)` with the default active-set threshold.
    pub fn stationarity(&self, x: &[f64]) -> Result<StationarityReport, EvalError> {
        let r = self.residuals(x)?;
        self.stationarity_residual(x, default_zero_tol(&r))
    }

    /// Minimum-norm element of the subdifferential
    /// `∂f(x) = { Σ δᵢ ∇rᵢ(x) }`, with `δᵢ = sign(rᵢ)` for `|rᵢ| > zero_tol`
    /// and `δᵢ ∈ [-1, 1]` otherwise.
    pub fn stationarity_residual(
        &self,
        x: &[f64],
        zero_tol: f64,
    ) -> Result<StationarityReport, EvalError> {
        assert!(zero_tol > 0.0, "zero_tol must be positive");
        let (r, jac) = self.residuals_and_jacobian(x)?;
        let mut g0 = vec![0.0; self.n_vars];
        let mut active = Vec::new();
        let mut delta = vec![0.0; r.len()];
        for (i, &ri) in r.iter().enumerate() {
            if ri.abs() <= zero_tol {
                active.push(i);
            } else {
                delta[i] = ri.signum();
                linalg::axpy(delta[i], jac.row(i), &mut g0);
            }
        }
        let columns: Vec<Vec<f64>> = active.iter().map(|&i| jac.row(i).to_vec()).collect();
        let (coef, kkt_residual) = min_norm_in_box(&g0, &columns);
        for (&i, c) in active.iter().zip(coef) {
            delta[i] = c;
        }
        Ok(StationarityReport {
            kkt_residual,
            active_set: active,
            delta,
        })
    }
}

/// Scale-aware threshold for treating a residual as zero.
pub fn default_zero_tol(residuals: &[f64]) -> f64 {
    1e-6 * (1.0 + linalg::norm_inf(residuals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// Euclidean norm of the minimum-norm subgradient.
    pub kkt_residual: f64,
    pub active_set: Vec<usize>,
    pub delta: Vec<f64>,
}

impl StationarityReport {
    pub fn is_stationary(&self, tol: f64) -> bool {
        self.kkt_residual <= tol
    }
}

const BOX_QP_MAX_ITERS: usize = 500;
const BOX_QP_TOL: f64 = 1e-10;

/// Minimizes `‖g0 + Σ δₖ cₖ‖₂` over `δ ∈ [-1, 1]^K` by projected gradient
/// descent with step `1/L`, `L = 2‖C‖_F²`. Returns the minimizer and the
/// attained norm.
pub fn min_norm_in_box(g0: &[f64], columns: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let k = columns.len();
    let mut delta = vec![0.0; k];
    let residual = |delta: &[f64]| {
        let mut v = g0.to_vec();
        for (c, d) in columns.iter().zip(delta) {
            linalg::axpy(*d, c, &mut v);
        }
        v
    };
    let frob2: f64 = columns.iter().map(|c| linalg::dot(c, c)).sum();
    if k == 0 || frob2 == 0.0 {
        return (delta, linalg::norm2(g0));
    }
    let step = 1.0 / (2.0 * frob2);
    for _ in 0..BOX_QP_MAX_ITERS {
        let v = residual(&delta);
        let mut moved = 0.0;
        for (d, c) in delta.iter_mut().zip(columns) {
            let grad = 2.0 * linalg::dot(c, &v);
            let next = (*d - step * grad).clamp(-1.0, 1.0);
            moved += (next - *d) * (next - *d);
            *d = next;
        }
        if moved.sqrt() <= BOX_QP_TOL {
            break;
        }
    }
    let norm = linalg::norm2(&residual(&delta));
    (delta, norm)
}

/// Fixed starting points of the Rastrigin-L1 benchmark.
pub const RASTRIGIN_STARTS: [[f64; 2]; 11] = [
    [-1.0, -1.0],
    [-0.89, -0.7803],
    [-0.4612, 0.2451],
    [0.2137, -0.0280],
    [0.7826, 0.5242],
    [-0.0871, -0.963],
    [0.6428, -0.1106],
    [0.2309, 0.5839],
    [0.8436, 0.4764],
    [-0.6475, 0.1886],
    [0.8709, 0.8338],
];

/// The two benchmark problems shipped with the crate.
///
/// * `problem1`: `|x1³ − 3x1| + |x2|`, minima at `(0,0)` and `(±√3, 0)`.
/// * `rastrigin_l1` (alias `rastrigin`): `|x1² + x2²| + |20 − 10(cos 2πx1 + cos 2πx2)|`,
///   minimum at the origin.
///
/// Both sample starting points from `[-1, 1]²`.
pub fn builtin(name: &str) -> Result<Problem, ProblemError> {
    let unit_box = vec![Interval::new(-1.0, 1.0); 2];
    match name {
        "problem1" => Ok(Problem::new(&["x1^3 - 3*x1", "x2"], 2)?
            .with_name("problem1")
            .with_sample_box(unit_box)?
            .with_known_minima(vec![
                vec![0.0, 0.0],
                vec![3f64.sqrt(), 0.0],
                vec![-(3f64.sqrt()), 0.0],
            ])),
        "rastrigin_l1" | "rastrigin" => Ok(Problem::new(
            &["x1^2 + x2^2", "20 - 10*(cos(2*pi*x1) + cos(2*pi*x2))"],
            2,
        )?
        .with_name("rastrigin_l1")
        .with_sample_box(unit_box)?
        .with_known_minima(vec![vec![0.0, 0.0]])),
        other => Err(ProblemError::UnknownBuiltin(other.to_string())),
    }
}
