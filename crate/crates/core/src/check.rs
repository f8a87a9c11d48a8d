//! Randomized self-test suites: surrogate bounds, gradient and Hessian
//! against finite differences, and the sign of the μ-component of the field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::problem::{self, Problem};
use crate::smoothing::{self, AugmentedState, SmoothingParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation measure seen (suite-specific units).
    pub worst: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckSizes {
    pub bounds: usize,
    pub gradient: usize,
    pub mu_sign: usize,
    pub hessian: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        Self {
            bounds: 100_000,
            gradient: 1_000,
            mu_sign: 10_000,
            hessian: 100,
        }
    }
}

pub const GRADIENT_TOL: f64 = 1e-6;
pub const HESSIAN_TOL: f64 = 1e-5;

pub fn run_all(seed: u64, sizes: CheckSizes) -> Vec<SuiteReport> {
    vec![
        smoothing_bounds(seed, sizes.bounds),
        gradient_fd(seed, sizes.gradient),
        mu_field_sign(seed, sizes.mu_sign),
        hessian_fd(seed, sizes.hessian),
    ]
}

fn log_uniform(rng: &mut ChaCha8Rng, lo_exp: f64, hi_exp: f64) -> f64 {
    10f64.powf(rng.gen_range(lo_exp..hi_exp))
}

/// `|r| < s < |r| + θμ² ln 2` off saturation, `|r| ≤ s` on it.
pub fn smoothing_bounds(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let r = rng.gen_range(-1e3..1e3);
        let mut mu = log_uniform(&mut rng, -4.0, 2.0);
        if rng.gen_bool(0.5) {
            mu = -mu;
        }
        let theta = log_uniform(&mut rng, -3.0, 1.0);
        let params = SmoothingParams::new(theta).expect("positive theta");
        let t = smoothing::smooth_terms(r, mu, &params);
        let upper = r.abs() + theta * mu * mu * std::f64::consts::LN_2;
        let ok = if t.saturated {
            t.s >= r.abs()
        } else {
            r.abs() < t.s && t.s < upper
        };
        if !ok {
            failures += 1;
            worst = worst.max((t.s - r.abs()).abs());
        }
    }
    SuiteReport {
        name: "smoothing_bounds",
        cases,
        failures,
        worst,
    }
}

fn builtins() -> [Problem; 2] {
    [
        problem::builtin("problem1").expect("built-in"),
        problem::builtin("rastrigin_l1").expect("built-in"),
    ]
}

fn random_state(rng: &mut ChaCha8Rng) -> AugmentedState {
    let x = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    let mut mu = log_uniform(rng, -2.0, 1.0);
    if rng.gen_bool(0.5) {
        mu = -mu;
    }
    AugmentedState::new(x, mu)
}

fn rel_err(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1.0)
}

fn e1_at(z: &[f64], problem: &Problem, params: &SmoothingParams) -> f64 {
    smoothing::energy(&AugmentedState::from_packed(z), problem, params)
        .expect("built-ins evaluate everywhere")
        .e1
}

/// Central-difference gradient of `E1` in all n + 1 coordinates.
pub fn fd_gradient(z: &AugmentedState, problem: &Problem, params: &SmoothingParams) -> Vec<f64> {
    let packed = z.to_packed();
    (0..packed.len())
        .map(|j| {
            let h = 1e-6 * (1.0 + packed[j].abs());
            let mut plus = packed.clone();
            let mut minus = packed.clone();
            plus[j] += h;
            minus[j] -= h;
            (e1_at(&plus, problem, params) - e1_at(&minus, problem, params)) / (2.0 * h)
        })
        .collect()
}

pub fn gradient_fd(seed: u64, cases: usize) -> SuiteReport {
    gradient_fd_scaled(seed, cases, 1.0)
}

fn gradient_fd_scaled(seed: u64, cases: usize, alpha_scale: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let params = SmoothingParams::default();
    let problems = builtins();
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for k in 0..cases {
        let problem = &problems[k % 2];
        let z = random_state(&mut rng);
        let grad = smoothing::energy_scaled(&z, problem, &params, alpha_scale)
            .expect("built-ins evaluate everywhere")
            .grad;
        let fd = fd_gradient(&z, problem, &params);
        let err = grad
            .iter()
            .zip(&fd)
            .map(|(g, f)| rel_err(*g, *f))
            .fold(0.0, f64::max);
        worst = worst.max(err);
        if err > GRADIENT_TOL {
            failures += 1;
        }
    }
    SuiteReport {
        name: "gradient_fd",
        cases,
        failures,
        worst,
    }
}

/// `μ · ∂E1/∂μ > 0` whenever `μ ≠ 0`.
pub fn mu_field_sign(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let params = SmoothingParams::default();
    let problems = builtins();
    let mut failures = 0;
    for k in 0..cases {
        let z = random_state(&mut rng);
        let rep = smoothing::energy(&z, &problems[k % 2], &params).expect("evaluates");
        let toward_zero = z.mu * rep.grad_mu() > 0.0;
        if !toward_zero {
            failures += 1;
        }
    }
    SuiteReport {
        name: "mu_field_sign",
        cases,
        failures,
        worst: 0.0,
    }
}

pub fn hessian_fd(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let params = SmoothingParams::default();
    let problems = builtins();
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for k in 0..cases {
        let problem = &problems[k % 2];
        let z = random_state(&mut rng);
        let h = smoothing::hessian_blocks(&z, problem, &params).expect("mu is nonzero");
        let packed = z.to_packed();
        let mut err: f64 = h.max_asymmetry();
        for j in 0..packed.len() {
            let step = 1e-6 * (1.0 + packed[j].abs());
            let mut plus = packed.clone();
            let mut minus = packed.clone();
            plus[j] += step;
            minus[j] -= step;
            let grad = |p: &[f64]| {
                smoothing::energy(&AugmentedState::from_packed(p), problem, &params)
                    .expect("evaluates")
                    .grad
            };
            let (gp, gm) = (grad(&plus), grad(&minus));
            for i in 0..packed.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                err = err.max(rel_err(h[(i, j)], fd));
            }
        }
        worst = worst.max(err);
        if err > HESSIAN_TOL {
            failures += 1;
        }
    }
    SuiteReport {
        name: "hessian_fd",
        cases,
        failures,
        worst,
    }
}
