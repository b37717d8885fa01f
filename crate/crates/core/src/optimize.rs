//! Full-batch gradient descent from a random start, with optional
//! negative-curvature escape steps at certified strict saddles.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::collapse::collapse_metrics;
use crate::error::{Result, UfmError};
use crate::landscape::{certify, escape_direction, CertificateReport, Tolerances, Verdict};
use crate::losses::{gradient, objective};
use crate::model::{ModelState, ProblemSpec};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;
const ESCAPE_LADDER: i32 = 20;
const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Armijo backtracking (halving, sufficient decrease `1e-4`, at most 40 halvings).
    pub use_backtracking: bool,
    pub max_iters: usize,
    /// Stop (and certify) once the max-block gradient norm drops below this.
    pub grad_tol: f64,
    pub escape_enabled: bool,
    /// Largest trial step along an escape direction.
    pub escape_step: f64,
    pub seed: u64,
    /// Initial entries are i.i.d. normal with standard deviation `init_scale/√d`.
    pub init_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 0.5,
            use_backtracking: true,
            max_iters: 200_000,
            grad_tol: 1e-9,
            escape_enabled: true,
            escape_step: 1.0,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("step_size", self.step_size), ("grad_tol", self.grad_tol), ("escape_step", self.escape_step)];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(UfmError::InvalidConfig { key: key.into(), reason: format!("must be > 0, got {v}") });
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(UfmError::InvalidConfig {
                key: "init_scale".into(),
                reason: format!("must be >= 0, got {}", self.init_scale),
            });
        }
        if self.max_iters == 0 {
            return Err(UfmError::InvalidConfig { key: "max_iters".into(), reason: "must be >= 1".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    GdStep,
    EscapeStep,
    Converged,
    /// Terminated without reaching a certified minimum (saddle with escape
    /// disabled, iteration budget exhausted, or a stalled line search).
    Stopped,
}

/// One CSV row. Certificate columns carry the most recent certification and
/// are flagged stale on rows where none was computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iter: usize,
    pub f_value: f64,
    pub grad_norm: f64,
    pub certificate_lhs: Option<f64>,
    pub certificate_margin: Option<f64>,
    pub nc1_norm_spread: f64,
    pub nc2_duality_residual: f64,
    pub nc3_etf_residual: Option<f64>,
    pub event: Event,
    pub is_stale_cert: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecord {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        self.write_rows(&mut wtr)?;
        let bytes = wtr.into_inner().map_err(|e| UfmError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        self.write_rows(&mut wtr)?;
        wtr.flush()?;
        Ok(())
    }

    fn write_rows<W: std::io::Write>(&self, wtr: &mut csv::Writer<W>) -> Result<()> {
        if self.rows.is_empty() {
            // header only
            wtr.write_record([
                "iter",
                "f_value",
                "grad_norm",
                "certificate_lhs",
                "certificate_margin",
                "nc1_norm_spread",
                "nc2_duality_residual",
                "nc3_etf_residual",
                "event",
                "is_stale_cert",
            ])
            .map_err(csv_err)?;
        }
        for row in &self.rows {
            wtr.serialize(row).map_err(csv_err)?;
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<TrajectoryRow>, _>>().map_err(csv_err)?;
        Ok(TrajectoryRecord { rows })
    }
}

fn csv_err(e: csv::Error) -> UfmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => UfmError::Io(io),
        other => UfmError::Parse { line: 0, msg: format!("{other:?}") },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: ModelState,
    pub trajectory: TrajectoryRecord,
    pub certificate: CertificateReport,
    pub iterations: usize,
    pub escapes: usize,
}

/// Seeded i.i.d. normal initialization of `W`, `H`, `b` (in that order, row-major).
pub fn init_random(spec: &ProblemSpec, config: &OptimizerConfig) -> ModelState {
    let mut state = ModelState::zeros(spec);
    if config.init_scale == 0.0 {
        return state;
    }
    let normal = Normal::new(0.0, config.init_scale / (spec.d as f64).sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in 0..spec.k {
        for j in 0..spec.d {
            state.w[(i, j)] = normal.sample(&mut rng);
        }
    }
    for i in 0..spec.d {
        for j in 0..spec.total() {
            state.h[(i, j)] = normal.sample(&mut rng);
        }
    }
    for i in 0..spec.k {
        state.b[i] = normal.sample(&mut rng);
    }
    state
}

/// Run from [`init_random`].
pub fn run(spec: &ProblemSpec, config: &OptimizerConfig) -> Result<RunOutcome> {
    run_from(spec, config, init_random(spec, config))
}

/// Run from a given starting point with the default analysis tolerances
/// (criticality threshold taken from `config.grad_tol`).
pub fn run_from(spec: &ProblemSpec, config: &OptimizerConfig, init: ModelState) -> Result<RunOutcome> {
    let tol = Tolerances { crit: config.grad_tol, ..Tolerances::default() };
    run_with(spec, config, init, &tol)
}

pub fn run_with(
    spec: &ProblemSpec,
    config: &OptimizerConfig,
    init: ModelState,
    tol: &Tolerances,
) -> Result<RunOutcome> {
    spec.validate()?;
    config.validate()?;
    init.check_shape(spec)?;
    let tol = Tolerances { crit: config.grad_tol, ..*tol };

    let mut state = init;
    let mut rows = Vec::new();
    let mut last_cert: Option<CertificateReport> = None;
    let mut escapes = 0;

    let row = |iter: usize,
               f: f64,
               gn: f64,
               state: &ModelState,
               cert: &Option<CertificateReport>,
               fresh: bool,
               event: Event| {
        let m = collapse_metrics(state, spec);
        TrajectoryRow {
            iter,
            f_value: f,
            grad_norm: gn,
            certificate_lhs: cert.as_ref().map(|c| c.certificate_lhs),
            certificate_margin: cert.as_ref().map(|c| c.margin),
            nc1_norm_spread: m.nc1_norm_spread,
            nc2_duality_residual: m.nc2_duality_residual,
            nc3_etf_residual: m.nc3_etf_residual,
            event,
            is_stale_cert: !fresh,
        }
    };
    let finish = |state: ModelState,
                  rows: Vec<TrajectoryRow>,
                  certificate: CertificateReport,
                  iterations: usize,
                  escapes: usize| {
        Ok(RunOutcome { state, trajectory: TrajectoryRecord { rows }, certificate, iterations, escapes })
    };

    for iter in 0..config.max_iters {
        let f = objective(&state, spec);
        if !f.is_finite() || f > DIVERGENCE_BOUND {
            return Err(UfmError::Divergence { iter, value: f });
        }
        let grad = gradient(&state, spec);
        if !grad.is_finite() {
            return Err(UfmError::Divergence { iter, value: f });
        }
        let gn = grad.max_block_norm();

        if gn <= config.grad_tol {
            let cert = certify(&state, spec, &tol)?;
            let verdict = cert.verdict;
            last_cert = Some(cert.clone());
            match verdict {
                Verdict::GlobalMin => {
                    log::info!("iter {iter}: certified global minimum, f = {f}");
                    rows.push(row(iter, f, gn, &state, &last_cert, true, Event::Converged));
                    return finish(state, rows, cert, iter, escapes);
                }
                Verdict::StrictSaddle if config.escape_enabled => {
                    let esc = escape_direction(&state, spec, &tol)?;
                    log::info!(
                        "iter {iter}: strict saddle, escaping (predicted curvature {:e}, measured {:e})",
                        esc.predicted_curvature,
                        esc.measured_curvature
                    );
                    let (best_t, best_f) = (0..=ESCAPE_LADDER)
                        .map(|i| {
                            let t = config.escape_step * 2f64.powi(-i);
                            (t, objective(&state.shifted(&esc.direction, t), spec))
                        })
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .expect("non-empty ladder");
                    if best_f.is_nan() || best_f >= f {
                        return Err(UfmError::EscapeFailed { iter, curvature: esc.measured_curvature });
                    }
                    rows.push(row(iter, f, gn, &state, &last_cert, true, Event::EscapeStep));
                    state = state.shifted(&esc.direction, best_t);
                    escapes += 1;
                    continue;
                }
                Verdict::StrictSaddle => {
                    log::info!("iter {iter}: strict saddle with escape disabled, stopping");
                    rows.push(row(iter, f, gn, &state, &last_cert, true, Event::Stopped));
                    return finish(state, rows, cert, iter, escapes);
                }
                Verdict::NotCritical => {}
            }
            rows.push(row(iter, f, gn, &state, &last_cert, true, Event::GdStep));
        } else {
            rows.push(row(iter, f, gn, &state, &last_cert, false, Event::GdStep));
        }

        let descent = grad.descent();
        if config.use_backtracking {
            let g2 = grad.norm_squared();
            // allowance for rounding in f so that steps near a critical point are not rejected spuriously
            let slack = 4.0 * f64::EPSILON * (1.0 + f.abs());
            let mut t = config.step_size;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial = state.shifted(&descent, t);
                let ft = objective(&trial, spec);
                if ft.is_finite() && ft <= f - ARMIJO_C * t * g2 + slack {
                    accepted = Some(trial);
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some(next) => state = next,
                None => {
                    log::warn!("iter {iter}: line search stalled at gradient norm {gn:e}");
                    let cert = certify(&state, spec, &tol)?;
                    last_cert = Some(cert.clone());
                    rows.push(row(iter, f, gn, &state, &last_cert, true, Event::Stopped));
                    return finish(state, rows, cert, iter, escapes);
                }
            }
        } else {
            state = state.shifted(&descent, config.step_size);
        }
        if !state.is_finite() {
            return Err(UfmError::Divergence { iter: iter + 1, value: f64::NAN });
        }
    }

    let iter = config.max_iters;
    let f = objective(&state, spec);
    if !f.is_finite() || f > DIVERGENCE_BOUND {
        return Err(UfmError::Divergence { iter, value: f });
    }
    let gn = gradient(&state, spec).max_block_norm();
    let cert = certify(&state, spec, &tol)?;
    last_cert = Some(cert.clone());
    log::info!("iteration budget exhausted, verdict {:?}", cert.verdict);
    rows.push(row(iter, f, gn, &state, &last_cert, true, Event::Stopped));
    finish(state, rows, cert, iter, escapes)
}
