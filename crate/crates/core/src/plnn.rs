//! Supervised estimator: an MLP trained on labelled synthetic windows that
//! maps a 252-point series straight to `(tc, m, omega)`.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Mlp, NodeId, Tensor};
use crate::calibration::{CalibrationResult, Diagnostics, Method};
use crate::dataset::{read_header, write_header};
use crate::error::{LpplsError, Result};
use crate::model::{residual_mse, solve_linear, LpplsParams, NonlinearParams, Series};
use crate::noise::{stream_rng, tc_from_days, Dataset, NoiseKind, M_RANGE, OMEGA_RANGE, TC_DAYS_RANGE, WINDOW_LEN};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LPPLSNN\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub input_transform: InputTransform,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-5,
            hidden: vec![256, 128, 64, 32],
            input_transform: InputTransform::CenterRowMean,
            seed: 0,
        }
    }
}

/// Preprocessing applied to every input window before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputTransform {
    /// The min-max scaled values as they are.
    Raw,
    /// Subtract the window's own mean, leaving only its shape.
    CenterRowMean,
}

impl InputTransform {
    pub fn apply(self, values: impl IntoIterator<Item = f64>) -> Vec<f64> {
        let mut x: Vec<f64> = values.into_iter().collect();
        if self == InputTransform::CenterRowMean && !x.is_empty() {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            for v in &mut x {
                *v -= mean;
            }
        }
        x
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(LpplsError::config("/epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(LpplsError::config("/batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(LpplsError::config("/learning_rate", "must be > 0"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(LpplsError::config("/hidden", "needs at least one positive width"));
        }
        Ok(())
    }
}

/// Per-label affine normalization onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    /// `(lo, hi)` for `tc`, `m`, `omega`.
    pub ranges: [(f64, f64); 3],
}

impl LabelNorm {
    /// The generator ranges for windows of `n` points.
    pub fn for_window(n: usize) -> Self {
        Self {
            ranges: [
                (tc_from_days(TC_DAYS_RANGE.0, n), tc_from_days(TC_DAYS_RANGE.1, n)),
                M_RANGE,
                OMEGA_RANGE,
            ],
        }
    }

    pub fn normalize(&self, y: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| {
            let (lo, hi) = self.ranges[k];
            (y[k] - lo) / (hi - lo)
        })
    }

    pub fn denormalize(&self, z: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| {
            let (lo, hi) = self.ranges[k];
            lo + z[k] * (hi - lo)
        })
    }
}

/// How a model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub val_dataset_hash: String,
    pub noise_kind: NoiseKind,
    pub train_count: usize,
    pub val_count: usize,
    pub config: TrainConfig,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch.
    pub val_loss: Vec<f64>,
    /// Epoch whose weights are stored (1-based).
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    widths: Vec<usize>,
    norm: LabelNorm,
    input_transform: InputTransform,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlnnModel {
    pub net: Mlp,
    pub norm: LabelNorm,
    pub input_transform: InputTransform,
    pub provenance: Provenance,
}

/// Final-epoch model and the best-validation snapshot.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: PlnnModel,
    pub best_val: PlnnModel,
}

fn row_input(d: &Dataset, i: usize, transform: InputTransform) -> Vec<f64> {
    transform.apply(d.row(i).iter().map(|&v| v as f64))
}

/// Mean over a dataset of the per-example loss `Σ_k (ŷ_k - y_k)^2` on normalized labels.
pub fn dataset_loss(model: &PlnnModel, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for i in 0..d.len() {
        let out = model.net.predict(&row_input(d, i, model.input_transform))?;
        let y = model.norm.normalize(d.label(i));
        acc += (0..3).map(|k| (out[k] - y[k]).powi(2)).sum::<f64>();
    }
    Ok(acc / d.len() as f64)
}

/// Record the loss of the mini-batch `idx` on a fresh tape. Returns the
/// graph, the loss node and the parameter nodes of `model.net`.
pub fn batch_graph(model: &PlnnModel, d: &Dataset, idx: &[usize]) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let (net, norm) = (&model.net, &model.norm);
    let n = d.width();
    let mut xs = Vec::with_capacity(idx.len() * n);
    let mut ys = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        xs.extend(row_input(d, i, model.input_transform));
        ys.extend(norm.normalize(d.label(i)));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(idx.len(), n, xs)?);
    let y = g.constant(Tensor::matrix(idx.len(), 3, ys)?);
    let nodes = net.forward(&mut g, x)?;
    let mse = g.mse(nodes.output, y)?;
    // mean over the batch of the sum over the three labels
    let loss = g.scale(mse, 3.0);
    Ok((g, loss, nodes.params))
}

/// Mini-batch Adam on `train`, validating after every epoch.
pub fn plnn_train(train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if train.width() != WINDOW_LEN || (!val.is_empty() && val.width() != WINDOW_LEN) {
        return Err(LpplsError::ShapeMismatch(format!(
            "datasets must have {WINDOW_LEN} features, got {} and {}",
            train.width(),
            val.width()
        )));
    }
    if train.is_empty() {
        return Err(LpplsError::ShapeMismatch("empty training dataset".into()));
    }
    if train.labels.iter().any(|l| !l.is_finite()) {
        return Err(LpplsError::NonFinite("training labels".into()));
    }
    let mut widths = vec![WINDOW_LEN];
    widths.extend(&config.hidden);
    widths.push(3);
    let mut provenance = Provenance {
        dataset_hash: train.content_hash()?,
        val_dataset_hash: val.content_hash()?,
        noise_kind: train.header.spec.noise_kind,
        train_count: train.len(),
        val_count: val.len(),
        config: config.clone(),
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        epoch: 0,
    };
    let mut model = PlnnModel {
        net: Mlp::new(&widths, &mut stream_rng(config.seed, 0))?,
        norm: LabelNorm::for_window(WINDOW_LEN),
        input_transform: config.input_transform,
        provenance: provenance.clone(),
    };
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), model.net.params());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Mlp)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream_rng(config.seed, epoch as u64 + 1));
        let mut acc = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (mut g, loss, params) = batch_graph(&model, train, batch)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(LpplsError::NonFinite(format!("training loss in epoch {}", epoch + 1)));
            }
            acc += l * batch.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|id| g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros_like(g.value(*id))))
                .collect();
            let refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut model.net.params_mut(), &refs)?;
        }
        let t = acc / train.len() as f64;
        provenance.train_loss.push(t);
        let v = if val.is_empty() { t } else { dataset_loss(&model, val)? };
        provenance.val_loss.push(v);
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            best = Some((v, epoch + 1, model.net.clone()));
        }
    }

    let (_, best_epoch, best_net) = best.expect("epochs >= 1");
    let best_val = PlnnModel {
        net: best_net,
        provenance: Provenance {
            epoch: best_epoch,
            ..provenance.clone()
        },
        ..model.clone()
    };
    model.provenance = Provenance {
        epoch: config.epochs,
        ..provenance
    };
    Ok(Trained { model, best_val })
}

/// One forward pass and de-normalization. Total: any finite input gives a triple.
pub fn predict(model: &PlnnModel, values: &[f64]) -> Result<NonlinearParams> {
    let z = model
        .net
        .predict(&model.input_transform.apply(values.iter().copied()))?;
    Ok(NonlinearParams::from_array(model.norm.denormalize([z[0], z[1], z[2]])))
}

/// Estimate all seven parameters of `series`. A predicted `tc` at or before
/// the last observation is returned as a domain error naming the estimate.
pub fn plnn_infer(model: &PlnnModel, series: &Series) -> Result<CalibrationResult> {
    let started = Instant::now();
    if series.len() != model.net.inputs() {
        return Err(LpplsError::ShapeMismatch(format!(
            "model expects {} points, series has {}",
            model.net.inputs(),
            series.len()
        )));
    }
    let nl = predict(model, series.values())?;
    if !(nl.tc > series.last_time()) || !(nl.m > 0.0) {
        return Err(LpplsError::Domain(format!(
            "unusable estimate tc = {}, m = {} (tc must follow the last observation)",
            nl.tc, nl.m
        )));
    }
    let lin = solve_linear(series, nl.tc, nl.m, nl.omega)?;
    let params = LpplsParams::from_parts(nl, lin);
    let final_mse = residual_mse(series, &params)?;
    let method = Method::plnn(model.provenance.noise_kind);
    Ok(CalibrationResult {
        method,
        params,
        final_mse,
        converged: true,
        iterations: 1,
        wall_clock: started.elapsed().as_secs_f64(),
        diagnostics: Diagnostics {
            boundary: !crate::calibration::Bounds::default().contains(nl.to_array()),
            ..Diagnostics::default()
        },
    })
}

impl PlnnModel {
    pub fn method(&self) -> Method {
        Method::plnn(self.provenance.noise_kind)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            widths: self.net.widths(),
            norm: self.norm,
            input_transform: self.input_transform,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.net.num_params());
        write_header(&mut out, MAGIC, &json);
        for t in self.net.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = read_header(bytes, MAGIC, "model")?;
        let header: ModelHeader =
            serde_json::from_slice(header).map_err(|e| LpplsError::Version(format!("unreadable model header: {e}")))?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(LpplsError::Version(format!(
                "model format {} (supported: {MODEL_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let w = &header.widths;
        if w.len() < 2 || w[0] != WINDOW_LEN || w[w.len() - 1] != 3 || w.contains(&0) {
            return Err(LpplsError::Version(format!("unsupported layer widths {w:?}")));
        }
        // seed is irrelevant: every weight is overwritten below
        let mut net = Mlp::new(w, &mut stream_rng(0, 0))?;
        let expected = 8 * net.num_params();
        if body.len() != expected {
            return Err(LpplsError::Format(format!(
                "model body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut chunks = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in net.params_mut() {
            for v in t.data_mut() {
                *v = chunks.next().expect("length checked");
            }
        }
        if !net.is_finite() {
            return Err(LpplsError::Format("non-finite weights".into()));
        }
        Ok(Self {
            net,
            norm: header.norm,
            input_transform: header.input_transform,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Train one model per configuration and report its final validation loss.
/// A desk-scale stand-in for a full hyperparameter search.
pub fn sweep(train: &Dataset, val: &Dataset, grid: &[TrainConfig]) -> Result<Vec<(TrainConfig, f64)>> {
    use rayon::prelude::*;
    grid.par_iter()
        .map(|cfg| {
            let t = plnn_train(train, val, cfg)?;
            let last = *t.model.provenance.val_loss.last().expect("epochs >= 1");
            Ok((cfg.clone(), last))
        })
        .collect()
}
