//! Adaptive Bogacki–Shampine 3(2) integrator.
//!
//! The third-order solution is propagated and the embedded second-order
//! solution supplies the error estimate. The last stage of an accepted step
//! is the first stage of the next one (FSAL).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

// Bogacki–Shampine tableau
const C2: f64 = 0.5;
const C3: f64 = 0.75;
const A21: f64 = 0.5;
const A32: f64 = 0.75;
const B1: f64 = 2.0 / 9.0;
const B2: f64 = 1.0 / 3.0;
const B3: f64 = 4.0 / 9.0;
// b − b̂ with b̂ = (7/24, 1/4, 1/3, 1/8)
const E1: f64 = 2.0 / 9.0 - 7.0 / 24.0;
const E2: f64 = 1.0 / 3.0 - 1.0 / 4.0;
const E3: f64 = 4.0 / 9.0 - 1.0 / 3.0;
const E4: f64 = -1.0 / 8.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Right-hand side of `dz/dt = f(t, z)`.
pub trait OdeSystem {
    type Error;

    fn rhs(&self, t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), Self::Error>;

    /// Energy and gradient norm recorded with each sample. Systems without an
    /// energy report `NaN` and the norm of the field.
    fn observe(&self, t: f64, z: &[f64]) -> Result<Observation, Self::Error> {
        let mut dz = vec![0.0; z.len()];
        self.rhs(t, z, &mut dz)?;
        Ok(Observation {
            energy: f64::NAN,
            grad_norm: linalg::norm2(&dz),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub energy: f64,
    pub grad_norm: f64,
}

impl<F, E> OdeSystem for F
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    type Error = E;
    fn rhs(&self, t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), E> {
        self(t, z, dz)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SettingsError {
    #[error("t_final must be positive and finite, got {0}")]
    TFinal(f64),
    #[error("tolerances must be positive (rtol {rtol}, atol {atol})")]
    Tolerance { rtol: f64, atol: f64 },
    #[error(
        "step bounds must satisfy 0 < h_min <= h_init <= h_max (got {h_min}, {h_init}, {h_max})"
    )]
    StepBounds { h_min: f64, h_init: f64, h_max: f64 },
    #[error("max_steps must be positive")]
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSettings {
    pub t_final: f64,
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Stop as soon as an accepted state has gradient norm at or below this.
    pub stop_grad_norm: Option<f64>,
}

impl OdeSettings {
    /// Defaults scaled to the integration horizon.
    pub fn new(t_final: f64) -> Self {
        Self {
            t_final,
            rtol: 1e-6,
            atol: 1e-9,
            h_init: t_final / 1000.0,
            h_min: t_final * 1e-14,
            h_max: t_final,
            max_steps: 1_000_000,
            stop_grad_norm: None,
        }
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<(), SettingsError> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(SettingsError::TFinal(self.t_final));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(SettingsError::Tolerance {
                rtol: self.rtol,
                atol: self.atol,
            });
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_init && self.h_init <= self.h_max) {
            return Err(SettingsError::StepBounds {
                h_min: self.h_min,
                h_init: self.h_init,
                h_max: self.h_max,
            });
        }
        if self.max_steps == 0 {
            return Err(SettingsError::MaxSteps);
        }
        Ok(())
    }
}

/// Outcome of one trial step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub z_high: Vec<f64>,
    /// Scaled RMS error estimate; the step is acceptable when ≤ 1.
    pub err_est: f64,
    /// Field at `(t + h, z_high)`, reusable as the next first stage.
    pub k_last: Vec<f64>,
}

/// One Bogacki–Shampine step from `(t, z)` with size `h`, given the field
/// `k1` at the start point. Returns `Ok(None)` if any stage is not finite.
pub fn step_pair<S: OdeSystem>(
    sys: &S,
    t: f64,
    z: &[f64],
    k1: &[f64],
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<Option<StepResult>, S::Error> {
    let n = z.len();
    let mut tmp = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];

    for i in 0..n {
        tmp[i] = z[i] + h * A21 * k1[i];
    }
    sys.rhs(t + C2 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = z[i] + h * A32 * k2[i];
    }
    sys.rhs(t + C3 * h, &tmp, &mut k3)?;
    let z_high: Vec<f64> = (0..n)
        .map(|i| z[i] + h * (B1 * k1[i] + B2 * k2[i] + B3 * k3[i]))
        .collect();
    sys.rhs(t + h, &z_high, &mut k4)?;

    if ![&k2, &k3, &k4, &z_high]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    {
        return Ok(None);
    }

    let mut acc = 0.0;
    for i in 0..n {
        let err = h * (E1 * k1[i] + E2 * k2[i] + E3 * k3[i] + E4 * k4[i]);
        let scale = atol + rtol * z[i].abs().max(z_high[i].abs());
        acc += (err / scale).powi(2);
    }
    let err_est = if n == 0 { 0.0 } else { (acc / n as f64).sqrt() };
    Ok(Some(StepResult {
        z_high,
        err_est,
        k_last: k4,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReachedTFinal,
    EventGradNorm,
    StepUnderflow,
    MaxSteps,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::ReachedTFinal => "reached_t_final",
            StopReason::EventGradNorm => "event_grad_norm",
            StopReason::StepUnderflow => "step_underflow",
            StopReason::MaxSteps => "max_steps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub z: Vec<f64>,
    pub energy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub stop_reason: StopReason,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples
            .last()
            .expect("trajectory has an initial sample")
    }
}

#[derive(Debug, Error)]
pub enum IntegrateError<E> {
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error("field is not finite at the initial state")]
    NonFiniteStart,
    #[error("field evaluation failed at t = {t}")]
    Field {
        t: f64,
        z: Vec<f64>,
        #[source]
        source: E,
    },
}

/// Integrates from `(0, z0)` to `settings.t_final`, recording every
/// `sample_every`-th accepted step and the final state.
pub fn integrate<S: OdeSystem>(
    sys: &S,
    z0: &[f64],
    settings: &OdeSettings,
    sample_every: usize,
) -> Result<Trajectory, IntegrateError<S::Error>> {
    settings.validate()?;
    let sample_every = sample_every.max(1);
    let observe = |t: f64, z: &[f64]| {
        sys.observe(t, z).map_err(|source| IntegrateError::Field {
            t,
            z: z.to_vec(),
            source,
        })
    };
    let sample = |t: f64, z: &[f64]| -> Result<Sample, IntegrateError<S::Error>> {
        let obs = observe(t, z)?;
        Ok(Sample {
            t,
            z: z.to_vec(),
            energy: obs.energy,
            grad_norm: obs.grad_norm,
        })
    };

    let mut t = 0.0;
    let mut z = z0.to_vec();
    let mut k1 = vec![0.0; z.len()];
    sys.rhs(t, &z, &mut k1)
        .map_err(|source| IntegrateError::Field {
            t,
            z: z.clone(),
            source,
        })?;
    if !k1.iter().all(|v| v.is_finite()) {
        return Err(IntegrateError::NonFiniteStart);
    }

    let first = sample(t, &z)?;
    let mut samples = vec![first];
    if let Some(thr) = settings.stop_grad_norm {
        if samples[0].grad_norm <= thr {
            return Ok(Trajectory {
                samples,
                stop_reason: StopReason::EventGradNorm,
                steps_accepted: 0,
                steps_rejected: 0,
            });
        }
    }

    let mut h = settings.h_init;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut last_sampled = true;
    let stop_reason = loop {
        if accepted + rejected >= settings.max_steps {
            break StopReason::MaxSteps;
        }
        let remaining = settings.t_final - t;
        let last_step = h >= remaining;
        let h_try = if last_step { remaining } else { h };

        let attempt =
            step_pair(sys, t, &z, &k1, h_try, settings.rtol, settings.atol).map_err(|source| {
                IntegrateError::Field {
                    t,
                    z: z.clone(),
                    source,
                }
            })?;
        let (ok, factor) = match &attempt {
            Some(step) if step.err_est <= 1.0 => (true, growth(step.err_est)),
            Some(step) => (false, growth(step.err_est)),
            None => (false, MIN_FACTOR),
        };
        if !ok {
            rejected += 1;
            h = h_try * factor;
            if h < settings.h_min {
                break StopReason::StepUnderflow;
            }
            continue;
        }

        let step = attempt.expect("accepted step");
        t = if last_step {
            settings.t_final
        } else {
            t + h_try
        };
        z = step.z_high;
        k1 = step.k_last;
        accepted += 1;
        h = (h_try * factor).clamp(settings.h_min, settings.h_max);

        last_sampled = false;
        let mut event = false;
        if let Some(thr) = settings.stop_grad_norm {
            let s = sample(t, &z)?;
            event = s.grad_norm <= thr;
            if event || accepted.is_multiple_of(sample_every) || last_step {
                samples.push(s);
                last_sampled = true;
            }
        } else if accepted.is_multiple_of(sample_every) || last_step {
            samples.push(sample(t, &z)?);
            last_sampled = true;
        }
        if event {
            break StopReason::EventGradNorm;
        }
        if last_step {
            break StopReason::ReachedTFinal;
        }
    };
    if !last_sampled {
        samples.push(sample(t, &z)?);
    }
    Ok(Trajectory {
        samples,
        stop_reason,
        steps_accepted: accepted,
        steps_rejected: rejected,
    })
}

fn growth(err_est: f64) -> f64 {
    if err_est == 0.0 {
        return MAX_FACTOR;
    }
    (SAFETY * err_est.powf(-1.0 / 3.0)).clamp(MIN_FACTOR, MAX_FACTOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn decay(_t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), Infallible> {
        dz[0] = -z[0];
        Ok(())
    }

    #[test]
    fn zero_field_step_is_exact() {
        let zero = |_t: f64, _z: &[f64], dz: &mut [f64]| -> Result<(), Infallible> {
            dz.fill(0.0);
            Ok(())
        };
        let step = step_pair(&zero, 0.0, &[1.5, -2.0], &[0.0, 0.0], 0.3, 1e-6, 1e-9)
            .unwrap()
            .unwrap();
        assert_eq!(step.z_high, vec![1.5, -2.0]);
        assert_eq!(step.err_est, 0.0);
    }

    #[test]
    fn quadratic_solution_is_exact() {
        // z = (t, t²)
        let field = |t: f64, _z: &[f64], dz: &mut [f64]| -> Result<(), Infallible> {
            dz[0] = 1.0;
            dz[1] = 2.0 * t;
            Ok(())
        };
        let (t, h) = (0.7, 0.4);
        let z = [t, t * t];
        let step = step_pair(&field, t, &z, &[1.0, 2.0 * t], h, 1e-6, 1e-9)
            .unwrap()
            .unwrap();
        assert!((step.z_high[0] - (t + h)).abs() < 1e-15);
        assert!((step.z_high[1] - (t + h) * (t + h)).abs() < 1e-15);
        assert!(step.err_est < 1e-8);
    }

    #[test]
    fn fsal_stage_is_field_at_new_point() {
        let step = step_pair(&decay, 0.0, &[1.0], &[-1.0], 0.1, 1e-6, 1e-9)
            .unwrap()
            .unwrap();
        assert_eq!(step.k_last, vec![-step.z_high[0]]);
    }

    #[test]
    fn exponential_decay_end_value() {
        let traj = integrate(&decay, &[1.0], &OdeSettings::new(1.0), 1).unwrap();
        assert_eq!(traj.stop_reason, StopReason::ReachedTFinal);
        let end = traj.last();
        assert_eq!(end.t, 1.0);
        assert!((end.z[0] - (-1f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn harmonic_oscillator_stays_on_solution() {
        let osc = |_t: f64, z: &[f64], dz: &mut [f64]| -> Result<(), Infallible> {
            dz[0] = z[1];
            dz[1] = -z[0];
            Ok(())
        };
        let traj = integrate(&osc, &[1.0, 0.0], &OdeSettings::new(10.0), 1).unwrap();
        let worst = traj
            .samples
            .iter()
            .map(|s| (s.z[0] - s.t.cos()).abs().max((s.z[1] + s.t.sin()).abs()))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "max error {worst}");
        assert!(traj.samples.windows(2).all(|w| w[0].t < w[1].t));
        assert_eq!(traj.samples[0].t, 0.0);
        assert_eq!(traj.samples[0].z, vec![1.0, 0.0]);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut s = OdeSettings::new(1.0);
        s.t_final = 0.0;
        assert!(matches!(
            integrate(&decay, &[1.0], &s, 1),
            Err(IntegrateError::Settings(SettingsError::TFinal(_)))
        ));
        let s = OdeSettings::new(1.0).with_tolerances(0.0, 1e-9);
        assert!(s.validate().is_err());
        let mut s = OdeSettings::new(1.0);
        s.h_min = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sampling_keeps_final_state() {
        let traj = integrate(&decay, &[1.0], &OdeSettings::new(1.0), 7).unwrap();
        assert_eq!(traj.last().t, 1.0);
        assert!(traj.samples.len() < traj.steps_accepted + 1);
        assert!(traj.samples.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn grad_norm_event_stops_early() {
        let mut s = OdeSettings::new(50.0);
        s.stop_grad_norm = Some(1e-3);
        let traj = integrate(&decay, &[1.0], &s, 1000).unwrap();
        assert_eq!(traj.stop_reason, StopReason::EventGradNorm);
        let end = traj.last();
        assert!(end.grad_norm <= 1e-3 && end.t < 50.0);
    }

    #[test]
    fn max_steps_and_underflow() {
        let mut s = OdeSettings::new(1.0);
        s.max_steps = 3;
        let traj = integrate(&decay, &[1.0], &s, 1).unwrap();
        assert_eq!(traj.stop_reason, StopReason::MaxSteps);

        // blows up in finite time at t = 1
        let blowup = |_t: f64, z: &[f64], dz: &mut [f64]| -> Result<(), Infallible> {
            dz[0] = z[0] * z[0];
            Ok(())
        };
        let mut s = OdeSettings::new(2.0);
        s.h_min = 1e-9;
        let traj = integrate(&blowup, &[1.0], &s, 1).unwrap();
        assert!(matches!(
            traj.stop_reason,
            StopReason::StepUnderflow | StopReason::MaxSteps
        ));
        let end = traj.last();
        assert!(end.t < 1.01 && end.z[0] > 1e6, "{end:?}");
    }

    #[test]
    fn field_errors_propagate() {
        let failing = |t: f64, _z: &[f64], dz: &mut [f64]| -> Result<(), &'static str> {
            if t > 0.5 {
                return Err("boom");
            }
            dz[0] = 1.0;
            Ok(())
        };
        let err = integrate(&failing, &[0.0], &OdeSettings::new(1.0), 1).unwrap_err();
        assert!(matches!(err, IntegrateError::Field { source: "boom", .. }));
    }

    #[test]
    fn deterministic() {
        let a = integrate(&decay, &[1.0], &OdeSettings::new(3.0), 1).unwrap();
        let b = integrate(&decay, &[1.0], &OdeSettings::new(3.0), 1).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
