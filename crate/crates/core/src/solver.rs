//! Gradient-flow solver: integrates `dz/dt = −M ∇E1(z)` from `(x0, μ0)` and
//! checks the end state against the subdifferential stationarity test.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::linalg;
use crate::ode::{
    self, IntegrateError, Observation, OdeSettings, OdeSystem, StopReason, Trajectory,
};
use crate::problem::Problem;
use crate::smoothing::{self, AugmentedState, SmoothingParams};

/// Default diagonal of `M` for two variables, ordered `(x1, x2, μ)`.
pub const BENCHMARK_M_DIAG: [f64; 3] = [10.0, 100.0, 10000.0];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("m_diag has {got} entries, expected n + 1 = {expected}")]
    MDiagLength { got: usize, expected: usize },
    #[error("m_diag entries must be positive and finite")]
    MDiagSign,
    #[error("theta must be positive and finite, got {0}")]
    Theta(f64),
    #[error("mu0 must be finite, got {0}")]
    Mu0(f64),
    #[error("x0 has {got} entries, expected {expected}")]
    X0Length { got: usize, expected: usize },
    #[error("x0 must be finite")]
    X0NotFinite,
    #[error(transparent)]
    Ode(#[from] ode::SettingsError),
    #[error("problem has no sample box to draw starting points from")]
    NoSampleBox,
    #[error("number of starts must be positive")]
    NoStarts,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("residual evaluation failed at t = {t}, z = {z:?}")]
    Domain {
        t: f64,
        z: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error("flow field is not finite at the starting point")]
    NonFiniteStart,
}

impl From<IntegrateError<EvalError>> for SolveError {
    fn from(e: IntegrateError<EvalError>) -> Self {
        match e {
            IntegrateError::Settings(s) => SolveError::Config(s.into()),
            IntegrateError::NonFiniteStart => SolveError::NonFiniteStart,
            IntegrateError::Field { t, z, source } => SolveError::Domain { t, z, source },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Diagonal of `M`: n entries for x, then one for μ.
    pub m_diag: Vec<f64>,
    pub mu0: f64,
    pub theta: f64,
    pub t_final: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub stop_grad_norm: Option<f64>,
    pub stationarity_tol: f64,
    pub sample_every: usize,
}

impl SolveConfig {
    /// Benchmark defaults for an `n`-variable problem. For n = 2 the
    /// diagonal is [`BENCHMARK_M_DIAG`]; otherwise every x entry is 100.
    pub fn for_dimension(n: usize) -> Self {
        let m_diag = if n == 2 {
            BENCHMARK_M_DIAG.to_vec()
        } else {
            let mut m = vec![100.0; n];
            m.push(BENCHMARK_M_DIAG[2]);
            m
        };
        let ode = OdeSettings::new(0.007);
        Self {
            m_diag,
            mu0: 40.0,
            theta: 0.02,
            t_final: ode.t_final,
            rtol: ode.rtol,
            atol: ode.atol,
            max_steps: ode.max_steps,
            stop_grad_norm: None,
            stationarity_tol: 1e-4,
            sample_every: 10,
        }
    }

    pub fn ode_settings(&self) -> OdeSettings {
        let mut s = OdeSettings::new(self.t_final).with_tolerances(self.rtol, self.atol);
        s.max_steps = self.max_steps;
        s.stop_grad_norm = self.stop_grad_norm;
        s
    }

    pub fn smoothing(&self) -> Result<SmoothingParams, ConfigError> {
        SmoothingParams::new(self.theta).map_err(|_| ConfigError::Theta(self.theta))
    }

    pub fn validate(&self, n_vars: usize) -> Result<(), ConfigError> {
        if self.m_diag.len() != n_vars + 1 {
            return Err(ConfigError::MDiagLength {
                got: self.m_diag.len(),
                expected: n_vars + 1,
            });
        }
        if !self.m_diag.iter().all(|m| *m > 0.0 && m.is_finite()) {
            return Err(ConfigError::MDiagSign);
        }
        self.smoothing()?;
        if !self.mu0.is_finite() {
            return Err(ConfigError::Mu0(self.mu0));
        }
        self.ode_settings().validate()?;
        Ok(())
    }
}

/// The vector field `z ↦ −diag(m) ∇E1(z)`.
#[derive(Debug, Clone)]
pub struct GradientFlow<'a> {
    problem: &'a Problem,
    params: SmoothingParams,
    m_diag: Vec<f64>,
}

impl<'a> GradientFlow<'a> {
    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut dz = vec![0.0; z.len()];
        self.rhs(0.0, z, &mut dz)?;
        Ok(dz)
    }
}

impl OdeSystem for GradientFlow<'_> {
    type Error = EvalError;

    fn rhs(&self, _t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), EvalError> {
        let rep = smoothing::energy(&AugmentedState::from_packed(z), self.problem, &self.params)?;
        for ((d, g), m) in dz.iter_mut().zip(&rep.grad).zip(&self.m_diag) {
            *d = -m * g;
        }
        Ok(())
    }

    fn observe(&self, _t: f64, z: &[f64]) -> Result<Observation, EvalError> {
        let rep = smoothing::energy(&AugmentedState::from_packed(z), self.problem, &self.params)?;
        Ok(Observation {
            energy: rep.e1,
            grad_norm: rep.grad_norm(),
        })
    }
}

pub fn flow_field<'a>(
    problem: &'a Problem,
    config: &SolveConfig,
) -> Result<GradientFlow<'a>, ConfigError> {
    config.validate(problem.n_vars())?;
    Ok(GradientFlow {
        problem,
        params: config.smoothing()?,
        m_diag: config.m_diag.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub x0: Vec<f64>,
    pub x_star: Vec<f64>,
    pub mu_star: f64,
    /// L1 objective at `x_star`.
    pub f_value: f64,
    pub e1: f64,
    /// `‖∇E1‖` at the end state.
    pub grad_norm: f64,
    pub kkt_residual: f64,
    pub stationary: bool,
    pub t_end: f64,
    pub stop_reason: StopReason,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Seconds of wall-clock time.
    pub wall_time: f64,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

pub fn solve(
    problem: &Problem,
    x0: &[f64],
    config: &SolveConfig,
) -> Result<SolveResult, SolveError> {
    let started = Instant::now();
    let n = problem.n_vars();
    if x0.len() != n {
        return Err(ConfigError::X0Length {
            got: x0.len(),
            expected: n,
        }
        .into());
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(ConfigError::X0NotFinite.into());
    }
    let flow = flow_field(problem, config)?;
    let z0 = AugmentedState::new(x0.to_vec(), config.mu0).to_packed();
    let traj = ode::integrate(&flow, &z0, &config.ode_settings(), config.sample_every)?;

    let end = traj.last();
    let state = AugmentedState::from_packed(&end.z);
    let domain = |source| SolveError::Domain {
        t: end.t,
        z: end.z.clone(),
        source,
    };
    let f_value = problem.objective(&state.x).map_err(domain)?;
    let stat = problem.stationarity(&state.x).map_err(domain)?;
    Ok(SolveResult {
        x0: x0.to_vec(),
        x_star: state.x,
        mu_star: state.mu,
        f_value,
        e1: end.energy,
        grad_norm: end.grad_norm,
        kkt_residual: stat.kkt_residual,
        stationary: stat.is_stationary(config.stationarity_tol),
        t_end: end.t,
        stop_reason: traj.stop_reason,
        steps_accepted: traj.steps_accepted,
        steps_rejected: traj.steps_rejected,
        wall_time: started.elapsed().as_secs_f64(),
        trajectory: Some(traj),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub start: Vec<f64>,
    pub result: Option<SolveResult>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn succeeded(&self, success_tol: f64) -> bool {
        self.result
            .as_ref()
            .is_some_and(|r| r.f_value <= success_tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStartReport {
    pub runs: Vec<RunRecord>,
    pub success_count: usize,
    pub success_tol: f64,
    pub seed: Option<u64>,
}

/// Draws `k` points uniformly from the problem's sample box.
pub fn sample_starts(problem: &Problem, k: usize, seed: u64) -> Result<Vec<Vec<f64>>, ConfigError> {
    let bounds = problem.sample_box().ok_or(ConfigError::NoSampleBox)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| {
            bounds
                .iter()
                .map(|iv| rng.gen_range(iv.lo..=iv.hi))
                .collect()
        })
        .collect())
}

/// Solves from each start independently. Runs may execute in parallel on the
/// current rayon pool; the report keeps the order of `starts`.
pub fn solve_many(
    problem: &Problem,
    config: &SolveConfig,
    starts: Vec<Vec<f64>>,
    success_tol: f64,
    seed: Option<u64>,
) -> MultiStartReport {
    let runs: Vec<RunRecord> = starts
        .into_par_iter()
        .map(|start| match solve(problem, &start, config) {
            Ok(mut res) => {
                res.trajectory = None;
                RunRecord {
                    start,
                    result: Some(res),
                    error: None,
                }
            }
            Err(e) => RunRecord {
                start,
                result: None,
                error: Some(error_chain(&e)),
            },
        })
        .collect();
    let success_count = runs.iter().filter(|r| r.succeeded(success_tol)).count();
    MultiStartReport {
        runs,
        success_count,
        success_tol,
        seed,
    }
}

pub fn multi_start(
    problem: &Problem,
    config: &SolveConfig,
    k: usize,
    seed: u64,
    success_tol: f64,
) -> Result<MultiStartReport, ConfigError> {
    if k == 0 {
        return Err(ConfigError::NoStarts);
    }
    config.validate(problem.n_vars())?;
    let starts = sample_starts(problem, k, seed)?;
    Ok(solve_many(problem, config, starts, success_tol, Some(seed)))
}

/// `e` and its sources joined with `": "`.
pub fn error_chain(e: &dyn std::error::Error) -> String {
    let mut text = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        text.push_str(": ");
        text.push_str(&s.to_string());
        cur = s.source();
    }
    text
}

/// Distance in the ∞-norm from `x` to the nearest of `points`.
pub fn distance_to_nearest(x: &[f64], points: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            let d: Vec<f64> = x.iter().zip(p).map(|(a, b)| a - b).collect();
            linalg::norm_inf(&d)
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;

    #[test]
    fn default_config_is_valid() {
        let c = SolveConfig::for_dimension(2);
        assert_eq!(c.m_diag, vec![10.0, 100.0, 10000.0]);
        c.validate(2).unwrap();
        assert_eq!(SolveConfig::for_dimension(3).m_diag.len(), 4);
        assert!(matches!(
            c.validate(3),
            Err(ConfigError::MDiagLength { .. })
        ));
        let mut bad = c.clone();
        bad.m_diag[1] = 0.0;
        assert_eq!(bad.validate(2), Err(ConfigError::MDiagSign));
        let mut bad = c.clone();
        bad.theta = -1.0;
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn field_vanishes_at_exact_minimum_with_zero_mu() {
        let p = builtin("problem1").unwrap();
        let flow = flow_field(&p, &SolveConfig::for_dimension(2)).unwrap();
        assert_eq!(flow.eval(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        let at_one = flow.eval(&[1.0, 0.0, 0.0]).unwrap();
        // ∇r1(1, 0) = 0 and r2 = 0 takes α = 0: the limit member is zero
        assert_eq!(at_one, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn mu_component_points_toward_zero() {
        let p = builtin("rastrigin_l1").unwrap();
        let flow = flow_field(&p, &SolveConfig::for_dimension(2)).unwrap();
        for mu in [0.01, 0.5, 3.0, 40.0] {
            assert!(flow.eval(&[0.3, -0.2, mu]).unwrap()[2] < 0.0);
            assert!(flow.eval(&[0.3, -0.2, -mu]).unwrap()[2] > 0.0);
        }
    }

    #[test]
    fn field_is_linear_in_m() {
        let p = builtin("problem1").unwrap();
        let cfg = SolveConfig::for_dimension(2);
        let mut doubled = cfg.clone();
        doubled.m_diag.iter_mut().for_each(|m| *m *= 2.0);
        let a = flow_field(&p, &cfg)
            .unwrap()
            .eval(&[0.4, 0.9, 2.0])
            .unwrap();
        let b = flow_field(&p, &doubled)
            .unwrap()
            .eval(&[0.4, 0.9, 2.0])
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn solve_rejects_bad_start() {
        let p = builtin("problem1").unwrap();
        let cfg = SolveConfig::for_dimension(2);
        assert!(matches!(
            solve(&p, &[1.0], &cfg),
            Err(SolveError::Config(ConfigError::X0Length { .. }))
        ));
        assert!(solve(&p, &[f64::NAN, 0.0], &cfg).is_err());
    }

    #[test]
    fn domain_error_along_trajectory_is_reported() {
        // the flow drives x1 down through 0, where sqrt has no derivative
        let p = Problem::new(&["sqrt(x1) + 1"], 1).unwrap();
        let mut cfg = SolveConfig::for_dimension(1);
        cfg.t_final = 1.0;
        let err = solve(&p, &[0.5], &cfg).unwrap_err();
        assert!(matches!(err, SolveError::Domain { .. }), "{err}");
    }

    #[test]
    fn multi_start_requires_box_and_is_deterministic() {
        let p = Problem::new(&["x1"], 1).unwrap();
        let cfg = SolveConfig::for_dimension(1);
        assert_eq!(
            multi_start(&p, &cfg, 3, 1, 1e-4),
            Err(ConfigError::NoSampleBox)
        );
        let p1 = builtin("problem1").unwrap();
        let cfg = SolveConfig::for_dimension(2);
        assert_eq!(
            multi_start(&p1, &cfg, 0, 1, 1e-4),
            Err(ConfigError::NoStarts)
        );
        let a = multi_start(&p1, &cfg, 4, 11, 1e-4).unwrap();
        let b = multi_start(&p1, &cfg, 4, 11, 1e-4).unwrap();
        let strip = |r: &MultiStartReport| -> Vec<(Vec<f64>, Vec<f64>)> {
            r.runs
                .iter()
                .map(|run| {
                    (
                        run.start.clone(),
                        run.result.as_ref().unwrap().x_star.clone(),
                    )
                })
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.success_count, b.success_count);
        for run in &a.runs {
            assert!(run.start.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_start_matches_direct_solve() {
        let p1 = builtin("problem1").unwrap();
        let cfg = SolveConfig::for_dimension(2);
        let rep = multi_start(&p1, &cfg, 1, 5, 1e-4).unwrap();
        let start = sample_starts(&p1, 1, 5).unwrap().remove(0);
        let direct = solve(&p1, &start, &cfg).unwrap();
        let run = rep.runs[0].result.as_ref().unwrap();
        assert_eq!(run.x_star, direct.x_star);
        assert_eq!(run.f_value, direct.f_value);
    }

    #[test]
    fn distance_helper() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(distance_to_nearest(&[2.5, 0.1], &pts), 0.5);
        assert_eq!(distance_to_nearest(&[1.0], &[]), f64::INFINITY);
    }
}
