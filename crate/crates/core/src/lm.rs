//! Multi-start Levenberg-Marquardt on the reduced loss.
//!
//! The linear coefficients are re-solved at every trial point, so the search
//! runs over `(tc, m, omega)` only. The Jacobian of the projected residual
//! vector is taken by central differences, which also captures the
//! dependence of the optimal linear coefficients on the nonlinear ones.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Bounds, CalibrationResult, Diagnostics, Method};
use crate::error::{LpplsError, Result};
use crate::model::{project, LpplsParams, NonlinearParams, Projection, Series};
use crate::noise::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub bounds: Bounds,
    pub max_iterations: usize,
    pub lambda0: f64,
    /// Damping multiplier after a rejected step.
    pub lambda_up: f64,
    /// Damping divisor after an accepted step.
    pub lambda_down: f64,
    /// Stop once an accepted step moves the parameters less than this.
    pub step_tolerance: f64,
    /// Stop once an accepted step lowers the loss by less than this.
    pub loss_tolerance: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub starts: usize,
    pub seed: u64,
    /// Run the starts on the rayon pool.
    pub parallel: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            max_iterations: 200,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            step_tolerance: 1e-9,
            loss_tolerance: 1e-12,
            fd_step: 1e-6,
            starts: 20,
            seed: 0,
            parallel: false,
        }
    }
}

/// Damping beyond which no descent step is considered to exist.
const LAMBDA_MAX: f64 = 1e16;

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate("/bounds")?;
        let positive = [
            ("/lambda0", self.lambda0),
            ("/step_tolerance", self.step_tolerance),
            ("/loss_tolerance", self.loss_tolerance),
            ("/fd_step", self.fd_step),
        ];
        for (path, v) in positive {
            if !(v > 0.0) {
                return Err(LpplsError::config(path, "must be > 0"));
            }
        }
        for (path, v) in [("/lambda_up", self.lambda_up), ("/lambda_down", self.lambda_down)] {
            if !(v > 1.0) {
                return Err(LpplsError::config(path, "must be > 1"));
            }
        }
        if self.starts == 0 {
            return Err(LpplsError::config("/starts", "must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(LpplsError::config("/max_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut x = 0.0;
    while i > 0 {
        x += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    x
}

/// `count` Halton points (bases 2, 3, 5) in `bounds`, with a seeded random shift modulo 1.
pub fn start_points(bounds: &Bounds, count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = stream_rng(seed, u64::MAX);
    let shift: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
    let (lo, hi) = (bounds.lower(), bounds.upper());
    (0..count)
        .map(|i| {
            let q = [
                radical_inverse(i as u64 + 1, 2),
                radical_inverse(i as u64 + 1, 3),
                radical_inverse(i as u64 + 1, 5),
            ];
            std::array::from_fn(|k| {
                let u = (q[k] + shift[k]).fract();
                lo[k] + u * (hi[k] - lo[k])
            })
        })
        .collect()
}

/// Outcome of one LM descent.
#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub point: [f64; 3],
    pub projection: Projection,
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss at the start and after each accepted step.
    pub trace: Vec<f64>,
    pub note: Option<String>,
}

fn evaluate(series: &Series, p: [f64; 3]) -> Result<Projection> {
    project(series, NonlinearParams::from_array(p))
}

/// Jacobian of the projected residual vector, column-major as three columns.
fn jacobian(series: &Series, p: [f64; 3], bounds: &Bounds, fd_step: f64, at_p: &[f64]) -> Result<[Vec<f64>; 3]> {
    let (lo, hi) = (bounds.lower(), bounds.upper());
    let mut cols: [Vec<f64>; 3] = Default::default();
    for k in 0..3 {
        let h = fd_step * p[k].abs().max(1e-3);
        let mut fwd = p;
        let mut bwd = p;
        fwd[k] += h;
        bwd[k] -= h;
        cols[k] = if fwd[k] <= hi[k] && bwd[k] >= lo[k] {
            let rf = evaluate(series, fwd)?.residuals;
            let rb = evaluate(series, bwd)?.residuals;
            rf.iter().zip(&rb).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        } else if fwd[k] <= hi[k] {
            let rf = evaluate(series, fwd)?.residuals;
            rf.iter().zip(at_p).map(|(a, b)| (a - b) / h).collect()
        } else {
            let rb = evaluate(series, bwd)?.residuals;
            at_p.iter().zip(&rb).map(|(a, b)| (a - b) / h).collect()
        };
    }
    Ok(cols)
}

/// Run one damped Gauss-Newton descent from `start` inside `bounds` (already
/// made effective for the series).
pub fn descend(series: &Series, start: [f64; 3], bounds: &Bounds, config: &LmConfig) -> Result<StartOutcome> {
    let mut p = bounds.project(start);
    let mut proj = evaluate(series, p)?;
    let mut loss = proj.mse();
    let mut trace = vec![loss];
    let mut lambda = config.lambda0;
    let mut converged = false;
    let mut note = None;
    let mut iterations = 0;

    let flat = series.values().windows(2).all(|w| w[0] == w[1]);
    if flat {
        note = Some("flat series: (tc, m, omega) are not identifiable".into());
    }
    while !flat && iterations < config.max_iterations {
        iterations += 1;
        let cols = jacobian(series, p, bounds, config.fd_step, &proj.residuals)?;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for a in 0..3 {
            jtr[a] = cols[a].iter().zip(&proj.residuals).map(|(j, r)| j * r).sum::<f64>();
            for b in a..3 {
                let v: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }
        if !jtj.iter().all(|v| v.is_finite()) {
            return Err(LpplsError::NonFinite("LM Jacobian".into()));
        }
        if jtj.diagonal().iter().all(|d| *d == 0.0) {
            note = Some("residuals do not depend on (tc, m, omega); series is degenerate".into());
            break;
        }
        let scale = jtj.diagonal().map(|d| d.max(1e-300));

        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * scale[k];
            }
            let step = damped.lu().solve(&(-jtr));
            let trial = step.map(|s| bounds.project([p[0] + s[0], p[1] + s[1], p[2] + s[2]]));
            let candidate = trial.and_then(|q| evaluate(series, q).ok().map(|pr| (q, pr)));
            match candidate {
                Some((q, pr)) if pr.mse() < loss => {
                    let new_loss = pr.mse();
                    let moved = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
                    let dropped = loss - new_loss;
                    p = q;
                    proj = pr;
                    loss = new_loss;
                    trace.push(loss);
                    lambda = (lambda / config.lambda_down).max(1e-300);
                    accepted = true;
                    if moved < config.step_tolerance || dropped < config.loss_tolerance {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= config.lambda_up,
            }
        }
        if !accepted {
            // no damping produces a decrease: stationary to working precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(StartOutcome {
        point: p,
        mse: loss,
        projection: proj,
        iterations,
        converged,
        trace,
        note,
    })
}

fn assemble(
    outcome: StartOutcome,
    bounds: &Bounds,
    start_index: Option<usize>,
    failed: usize,
    started: Instant,
) -> CalibrationResult {
    let params = LpplsParams::from_parts(NonlinearParams::from_array(outcome.point), outcome.projection.linear);
    CalibrationResult {
        method: Method::Lm,
        params,
        final_mse: outcome.mse,
        converged: outcome.converged,
        iterations: outcome.iterations,
        wall_clock: started.elapsed().as_secs_f64(),
        diagnostics: Diagnostics {
            start_index,
            failed_starts: failed,
            loss_trace: outcome.trace,
            boundary: bounds.on_boundary(outcome.point),
            note: outcome.note,
            ..Diagnostics::default()
        },
    }
}

/// Calibrate `series` from the configured multi-starts and keep the lowest-loss descent.
pub fn lm_fit(series: &Series, config: &LmConfig) -> Result<CalibrationResult> {
    let started = Instant::now();
    config.validate()?;
    let bounds = config.bounds.effective(series.last_time())?;
    let starts = start_points(&bounds, config.starts, config.seed);
    let run = |x0: &[f64; 3]| descend(series, *x0, &bounds, config);
    let outcomes: Vec<Result<StartOutcome>> = if config.parallel {
        starts.par_iter().map(run).collect()
    } else {
        starts.iter().map(run).collect()
    };

    let mut best: Option<(usize, StartOutcome)> = None;
    let mut failed = 0;
    let mut last_err = String::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                // strict comparison keeps the lowest index among ties
                if best.as_ref().is_none_or(|(_, b)| o.mse < b.mse) {
                    best = Some((i, o));
                }
            }
            Err(e) => {
                failed += 1;
                last_err = e.to_string();
            }
        }
    }
    let (index, outcome) = best.ok_or(LpplsError::AllStartsFailed {
        starts: config.starts,
        last: last_err,
    })?;
    Ok(assemble(outcome, &bounds, Some(index), failed, started))
}

/// Single descent from a given starting point.
pub fn lm_fit_from(series: &Series, start: NonlinearParams, config: &LmConfig) -> Result<CalibrationResult> {
    let started = Instant::now();
    config.validate()?;
    let bounds = config.bounds.effective(series.last_time())?;
    let outcome = descend(series, start.to_array(), &bounds, config)?;
    Ok(assemble(outcome, &bounds, None, 0, started))
}
