//! Nonlinear L1-norm minimization by augmented smoothing.
//!
//! The objective `f(x) = Σ |rᵢ(x)|` is replaced by a smooth energy
//! `E1(x, μ)` in which the smoothing parameter μ is itself a state variable.
//! Integrating the gradient flow `dz/dt = −M ∇E1(z)` drives μ toward zero and
//! x toward a stationary point of `f`.
//!
//! ```
//! use l1flow::{problem, solver};
//!
//! let p = problem::builtin("problem1").unwrap();
//! let cfg = solver::SolveConfig::for_dimension(2);
//! let res = solver::solve(&p, &[1.0, 1.0], &cfg).unwrap();
//! assert!(res.f_value < 1e-4);
//! ```

pub mod check;
pub mod expr;
pub mod io;
pub mod linalg;
pub mod ode;
pub mod problem;
pub mod smoothing;
pub mod solver;

pub use expr::{DualValue, EvalError, Order, ParseError, ResidualExpr};
pub use linalg::Matrix;
pub use ode::{OdeSettings, StopReason, Trajectory};
pub use problem::{builtin, Interval, Problem, StationarityReport};
pub use smoothing::{AugmentedState, EnergyReport, SmoothingParams};
pub use solver::{MultiStartReport, SolveConfig, SolveError, SolveResult};
