//! Run configuration files, result summaries and trajectory CSV.
//!
//! Every floating-point number is written with 17 significant digits so a
//! value read back is bit-identical to the one written.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use thiserror::Error;

use crate::ode::Trajectory;
use crate::problem::{self, Interval, Problem, ProblemError};
use crate::solver::{SolveConfig, SolveResult};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed config")]
    Json(#[from] serde_json::Error),
    #[error("config must name exactly one of `problem` (built-in) or `residuals`")]
    ProblemSource,
    #[error("inline residuals need `n_vars`")]
    MissingNVars,
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// On-disk run configuration. Unset solver fields fall back to
/// [`SolveConfig::for_dimension`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in problem name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    /// Inline residual expressions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_vars: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_box: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traj: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn builtin(name: &str) -> Self {
        Self {
            problem: Some(name.to_string()),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigFileError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigFileError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build_problem(&self) -> Result<Problem, ConfigFileError> {
        let mut problem = match (&self.problem, &self.residuals) {
            (Some(name), None) => problem::builtin(name)?,
            (None, Some(res)) => {
                let n = self.n_vars.ok_or(ConfigFileError::MissingNVars)?;
                Problem::new(res, n)?
            }
            _ => return Err(ConfigFileError::ProblemSource),
        };
        if let Some(b) = &self.sample_box {
            let intervals = b.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect();
            problem = problem.with_sample_box(intervals)?;
        }
        Ok(problem)
    }

    pub fn solve_config(&self, n_vars: usize) -> SolveConfig {
        let mut c = SolveConfig::for_dimension(n_vars);
        if let Some(v) = &self.m_diag {
            c.m_diag = v.clone();
        }
        if let Some(v) = self.theta {
            c.theta = v;
        }
        if let Some(v) = self.mu0 {
            c.mu0 = v;
        }
        if let Some(v) = self.t_final {
            c.t_final = v;
        }
        if let Some(v) = self.rtol {
            c.rtol = v;
        }
        if let Some(v) = self.atol {
            c.atol = v;
        }
        if let Some(v) = self.sample_every {
            c.sample_every = v;
        }
        c
    }

    /// The same configuration with every solver field filled in.
    pub fn effective(&self, n_vars: usize) -> Self {
        let c = self.solve_config(n_vars);
        Self {
            m_diag: Some(c.m_diag),
            theta: Some(c.theta),
            mu0: Some(c.mu0),
            t_final: Some(c.t_final),
            rtol: Some(c.rtol),
            atol: Some(c.atol),
            sample_every: Some(c.sample_every),
            n_vars: Some(n_vars),
            ..self.clone()
        }
    }
}

/// Result summary: the solve outcome plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub result: SolveResult,
    pub config: RunConfig,
}

/// Pretty-printed JSON whose floats carry 17 significant digits.
struct SigDigits<'a>(PrettyFormatter<'a>);

impl Formatter for SigDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", format_f64(value))
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn to_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, SigDigits(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Writes `t, x1..xn, mu, E1, grad_norm` rows, one per sampled state.
pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory) -> io::Result<()> {
    let n = traj.samples.first().map_or(1, |s| s.z.len()) - 1;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend(["mu", "E1", "grad_norm"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for s in &traj.samples {
        let mut row = vec![format_f64(s.t)];
        row.extend(s.z.iter().map(|v| format_f64(*v)));
        row.push(format_f64(s.energy));
        row.push(format_f64(s.grad_norm));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
