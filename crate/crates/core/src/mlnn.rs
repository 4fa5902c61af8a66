//! Per-series network calibrator.
//!
//! A fresh MLP maps the scaled series to three raw outputs, which a sigmoid
//! squashes onto a slightly inflated parameter box. The linear coefficients
//! are solved from the normal equations on the tape, so the reconstruction
//! loss is differentiated through the solve as well as through the basis.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Adam, AdamConfig, Graph, Mlp, MlpNodes, NodeId, Tensor};
use crate::calibration::{Bounds, CalibrationResult, Diagnostics, Method, TC_MARGIN};
use crate::error::{LpplsError, Result};
use crate::model::{residual_mse, solve_linear, LpplsParams, NonlinearParams, Series};
use crate::noise::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlnnConfig {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the bound-violation hinge.
    pub penalty: f64,
    pub bounds: Bounds,
    /// Outputs may exceed each bound by this fraction of its range.
    pub squash_margin: f64,
    pub seed: u64,
}

impl Default for MlnnConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 32],
            epochs: 5000,
            learning_rate: 1e-2,
            penalty: 1.0,
            bounds: Bounds::default(),
            squash_margin: 0.05,
            seed: 0,
        }
    }
}

impl MlnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(LpplsError::config("/hidden", "widths must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(LpplsError::config("/epochs", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(LpplsError::config("/learning_rate", "must be > 0"));
        }
        if !(self.penalty >= 0.0) {
            return Err(LpplsError::config("/penalty", "must be >= 0"));
        }
        if !(self.squash_margin >= 0.0) {
            return Err(LpplsError::config("/squash_margin", "must be >= 0"));
        }
        self.bounds.validate("/bounds")
    }

    /// Range `[lo, hi]` the output squash maps onto, per parameter. The `tc`
    /// floor keeps the singularity after the last observation.
    pub fn output_range(&self, last_time: f64) -> Result<([f64; 3], [f64; 3])> {
        let (lo, hi) = (self.bounds.lower(), self.bounds.upper());
        let mut out_lo = [0.0; 3];
        let mut out_hi = [0.0; 3];
        for k in 0..3 {
            let pad = self.squash_margin * (hi[k] - lo[k]);
            out_lo[k] = lo[k] - pad;
            out_hi[k] = hi[k] + pad;
        }
        out_lo[0] = out_lo[0].max(last_time + TC_MARGIN);
        out_lo[1] = out_lo[1].max(f64::MIN_POSITIVE);
        if !(out_lo[0] < out_hi[0]) {
            return Err(LpplsError::config(
                "/bounds/tc",
                "upper bound leaves no room after the last observation",
            ));
        }
        Ok((out_lo, out_hi))
    }
}

/// `alpha * Σ_k [max(0, lo_k - θ_k) + max(0, θ_k - hi_k)]`.
pub fn penalty(theta: [f64; 3], bounds: &Bounds, alpha: f64) -> f64 {
    let (lo, hi) = (bounds.lower(), bounds.upper());
    alpha
        * (0..3)
            .map(|k| (lo[k] - theta[k]).max(0.0) + (theta[k] - hi[k]).max(0.0))
            .sum::<f64>()
}

/// Map raw network outputs to `(tc, m, omega)`.
pub fn squash(z: &[f64], lo: &[f64; 3], hi: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| lo[k] + (hi[k] - lo[k]) * sigmoid(z[k]))
}

/// The total loss recorded on a tape.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub theta: NodeId,
    pub mse: NodeId,
    pub net: MlpNodes,
}

/// Record reconstruction MSE plus penalty for `net` on `series`.
pub fn loss_graph(net: &Mlp, series: &Series, config: &MlnnConfig) -> Result<LossGraph> {
    let (lo, hi) = config.output_range(series.last_time())?;
    let n = series.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(series.values().to_vec()));
    let nodes = net.forward(&mut g, x)?;

    let span = g.constant(Tensor::vector((0..3).map(|k| hi[k] - lo[k]).collect()));
    let base = g.constant(Tensor::vector(lo.to_vec()));
    let s = g.sigmoid(nodes.output);
    let scaled = g.mul(s, span)?;
    let theta = g.add(scaled, base)?;
    let tc = g.select(theta, 0)?;
    let m = g.select(theta, 1)?;
    let omega = g.select(theta, 2)?;

    let times = g.constant(Tensor::vector(series.times().to_vec()));
    let v = g.constant(Tensor::vector(series.values().to_vec()));
    let dt = g.sub(tc, times)?;
    let f = g.power(dt, m)?;
    let ln_dt = g.log(dt)?;
    let phase = g.mul(omega, ln_dt)?;
    let cos = g.cos(phase);
    let sin = g.sin(phase);
    let gc = g.mul(f, cos)?;
    let hc = g.mul(f, sin)?;

    // normal equations over the columns {1, f, g, h}
    let count = g.constant(Tensor::scalar(n as f64));
    let cols = [f, gc, hc];
    let mut entries = [[count; 4]; 4];
    for i in 0..3 {
        let s = g.sum(cols[i]);
        entries[0][i + 1] = s;
        entries[i + 1][0] = s;
        for j in i..3 {
            let p = g.mul(cols[i], cols[j])?;
            let s = g.sum(p);
            entries[i + 1][j + 1] = s;
            entries[j + 1][i + 1] = s;
        }
    }
    let flat: Vec<NodeId> = entries.iter().flatten().copied().collect();
    let stacked = g.stack(&flat)?;
    let gram = g.reshape(stacked, &[4, 4])?;
    let mut rhs_items = vec![g.sum(v)];
    for c in cols {
        let p = g.mul(c, v)?;
        rhs_items.push(g.sum(p));
    }
    let rhs = g.stack(&rhs_items)?;
    let lin = g.solve(gram, rhs)?;

    let mut recon = g.select(lin, 0)?;
    for (k, c) in cols.iter().enumerate() {
        let coef = g.select(lin, k + 1)?;
        let term = g.mul(coef, *c)?;
        recon = g.add(recon, term)?;
    }
    let mse = g.mse(recon, v)?;

    let lo_b = g.constant(Tensor::vector(config.bounds.lower().to_vec()));
    let hi_b = g.constant(Tensor::vector(config.bounds.upper().to_vec()));
    let below = g.sub(lo_b, theta)?;
    let above = g.sub(theta, hi_b)?;
    let below = g.relu(below);
    let above = g.relu(above);
    let below = g.sum(below);
    let above = g.sum(above);
    let hinge = g.add(below, above)?;
    let hinge = g.scale(hinge, config.penalty);
    let loss = g.add(mse, hinge)?;

    Ok(LossGraph {
        graph: g,
        loss,
        theta,
        mse,
        net: nodes,
    })
}

/// Parameters implied by `net` and the loss, computed without the tape.
pub fn evaluate(net: &Mlp, series: &Series, config: &MlnnConfig) -> Result<(LpplsParams, f64)> {
    let (lo, hi) = config.output_range(series.last_time())?;
    let theta = squash(&net.predict(series.values())?, &lo, &hi);
    let nl = NonlinearParams::from_array(theta);
    let lin = solve_linear(series, nl.tc, nl.m, nl.omega)?;
    let params = LpplsParams::from_parts(nl, lin);
    let loss = residual_mse(series, &params)? + penalty(theta, &config.bounds, config.penalty);
    Ok((params, loss))
}

/// Train a network on `series` alone and return its lowest-loss snapshot.
pub fn mlnn_fit(series: &Series, config: &MlnnConfig) -> Result<CalibrationResult> {
    let started = Instant::now();
    config.validate()?;
    let mut rng = stream_rng(config.seed, 0);
    let widths = [series.len(), config.hidden[0], config.hidden[1], 3];
    let mut net = Mlp::new(&widths, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), net.params());

    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Mlp)> = None;
    for epoch in 0..config.epochs {
        let mut lg = loss_graph(&net, series, config)?;
        let loss = lg.graph.scalar(lg.loss);
        if !loss.is_finite() {
            return Err(LpplsError::NonFinite(format!("M-LNN loss at epoch {epoch}")));
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, epoch, net.clone()));
        }
        lg.graph.backward(lg.loss)?;
        let grads: Vec<Tensor> = lg
            .net
            .params
            .iter()
            .map(|id| {
                lg.graph
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros_like(lg.graph.value(*id)))
            })
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam.step(&mut net.params_mut(), &grad_refs)?;
    }

    let (_, best_epoch, best_net) = best.expect("at least one epoch");
    let (params, _) = evaluate(&best_net, series, config)?;
    let final_mse = residual_mse(series, &params)?;
    Ok(CalibrationResult {
        method: Method::Mlnn,
        params,
        final_mse,
        converged: true,
        iterations: config.epochs,
        wall_clock: started.elapsed().as_secs_f64(),
        diagnostics: Diagnostics {
            loss_trace: trace,
            best_epoch: Some(best_epoch),
            boundary: !config.bounds.contains(params.nonlinear().to_array()),
            ..Diagnostics::default()
        },
    })
}
