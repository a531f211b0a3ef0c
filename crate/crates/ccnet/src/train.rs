//! Pearson-correlation training: the objective, Adam, and the epoch loop.
//!
//! The loss is the negated mean Pearson correlation over all target subbands
//! (envelope included when the model emits 11); validation scores only the
//! last 10 subbands, which are the mel rows. Per-window gradients inside a
//! batch are independent, so they are computed in parallel and reduced in
//! window order, which keeps training bitwise reproducible at any thread
//! count.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, FoldSpec, RecordingSample, Split};
use crate::graph::{Graph, GraphError, ParamSet, PEARSON_EPS, PEARSON_VAR_FLOOR};
use crate::model::{Model, ModelError};
use crate::tensor::{Mat, ShapeError, Tensor3};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training spec: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("adam_step called before any backward pass populated gradients")]
    AdamBeforeBackward,
}

/// Worker pool for per-window gradient computation; `CCN_THREADS` caps its
/// size.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("CCN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build thread pool")
    })
}

/// Pearson correlation of two equal-length series (length >= 2).
///
/// `r = sum(cx*cy) / sqrt(sum(cx^2) * sum(cy^2) + 1e-8)`; if either side has
/// population variance below 1e-12 the result is defined as 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, ShapeError> {
    if x.len() != y.len() {
        return Err(ShapeError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(ShapeError::TimeTooShort {
            need: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (xv, yv) in x.iter().zip(y) {
        let cx = xv - xbar;
        let cy = yv - ybar;
        sxy += cx * cy;
        sxx += cx * cx;
        syy += cy * cy;
    }
    if sxx / n < PEARSON_VAR_FLOOR || syy / n < PEARSON_VAR_FLOOR {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy + PEARSON_EPS).sqrt())
}

/// Adam state: learning rate, moment decays, and the shared step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter, from the gradients
/// currently in `Parameter.grad`. Increments `step_count`.
pub fn adam_step(params: &mut ParamSet, hyper: &mut AdamHyper) -> Result<(), TrainError> {
    if !params.grads_ready() {
        return Err(TrainError::AdamBeforeBackward);
    }
    hyper.validate()?;
    hyper.step_count += 1;
    let t = hyper.step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for p in params.iter_mut() {
        for i in 0..p.value.data.len() {
            let g = p.grad.data[i];
            p.adam_m.data[i] = hyper.beta1 * p.adam_m.data[i] + (1.0 - hyper.beta1) * g;
            p.adam_v.data[i] = hyper.beta2 * p.adam_v.data[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = p.adam_m.data[i] / bc1;
            let v_hat = p.adam_v.data[i] / bc2;
            p.value.data[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Numeric width of stored parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl TryFrom<u8> for Precision {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl Precision {
    pub fn dtype(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Rounds every parameter value through f32. Under 32-bit precision this runs
/// after init and after each optimizer step, so stored values are exactly
/// representable in the checkpoint payload and round-trips stay bitwise.
pub fn round_params_f32(params: &mut ParamSet) {
    for p in params.iter_mut() {
        for v in &mut p.value.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Training-run shape: windowing, batching, stopping, seed and precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    /// Window length in samples (320 = 5 s at 64 Hz).
    pub window_len: usize,
    pub window_hop: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamHyper,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            window_len: 320,
            window_hop: 64,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            precision: Precision::F32,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.window_len < 2 {
            return Err(TrainError::Config("window_len must be >= 2".into()));
        }
        if self.window_hop < 1 {
            return Err(TrainError::Config("window_hop must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        self.adam.validate()
    }
}

/// What a training run did: per-epoch curves and the best checkpointed state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub fold_id: Option<u32>,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub epoch_losses: Vec<f64>,
    pub epoch_val_scores: Vec<f64>,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
}

/// Builds the (1, S, len) target tensor for a window's fused 11 x len target,
/// dropping the envelope row when the model emits 10 subbands.
fn target_tensor(fused: &Mat, output_subbands: usize) -> Result<Tensor3, TrainError> {
    match output_subbands {
        11 => Ok(fused.to_tensor3()),
        10 => Ok(fused.slice_rows(1, 11).to_tensor3()),
        other => Err(TrainError::Config(format!(
            "training requires 10 or 11 output subbands, model has {other}"
        ))),
    }
}

/// Mean Pearson over the last 10 subbands of `pred` vs the (mel) rows of the
/// fused target; the validation metric.
pub fn window_score(pred: &Tensor3, fused_target: &Mat) -> Result<f64, TrainError> {
    let s = pred.channels();
    assert!(s >= 10, "prediction needs at least 10 subbands");
    let mel = fused_target.slice_rows(1, 11);
    let mut acc = 0.0;
    for band in 0..10 {
        let row = pred.row(0, s - 10 + band);
        acc += pearson(row, mel.row(band))?;
    }
    Ok(acc / 10.0)
}

/// Mean [`window_score`] of the model over a window list (inference mode,
/// parallel over windows, reduced in window order).
pub fn validation_score(model: &Model, windows: &[(Mat, Mat)]) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::Config("validation window list is empty".into()));
    }
    let scores: Vec<Result<f64, TrainError>> = thread_pool().install(|| {
        windows
            .par_iter()
            .map(|(eeg, tgt)| {
                let pred = model.forward(&eeg.to_tensor3())?;
                window_score(&pred, tgt)
            })
            .collect()
    });
    let mut acc = 0.0;
    for s in scores {
        acc += s?;
    }
    Ok(acc / windows.len() as f64)
}

/// Trains on explicit window lists. Windows are `(eeg, fused 11-band target)`
/// pairs; the model's `output_subbands` decides whether the envelope row is
/// kept in the loss. Keeps the parameters of the best validation epoch.
///
/// Batches are full-sized; the final partial batch of each epoch is dropped
/// unless the epoch would otherwise have no batch at all.
pub fn train_on_windows(
    model: &mut Model,
    train_windows: &[(Mat, Mat)],
    val_windows: &[(Mat, Mat)],
    spec: &TrainSpec,
) -> Result<TrainReport, TrainError> {
    spec.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::Config("no training windows".into()));
    }
    if val_windows.is_empty() {
        return Err(TrainError::Config("no validation windows".into()));
    }
    let subbands = model.config.output_subbands;
    for (eeg, tgt) in train_windows.iter().chain(val_windows) {
        if eeg.rows() != model.config.eeg_channels {
            return Err(ShapeError::ChannelMismatch {
                expected: model.config.eeg_channels,
                got: eeg.rows(),
            }
            .into());
        }
        if tgt.rows() != 11 {
            return Err(TrainError::Config("window targets must have 11 rows".into()));
        }
    }

    if spec.precision == Precision::F32 {
        round_params_f32(&mut model.params);
    }
    let mut hyper = spec.adam.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_values: Vec<Vec<f64>> = Vec::new();
    let mut stale_epochs = 0;
    let mut epoch_losses = Vec::new();
    let mut epoch_val_scores = Vec::new();
    let mut steps = 0;

    for epoch in 1..=spec.max_epochs {
        order.shuffle(&mut rng);
        let full_batches = order.len() / spec.batch_size;
        let batches: Vec<&[usize]> = if full_batches == 0 {
            vec![&order[..]]
        } else {
            order.chunks_exact(spec.batch_size).collect()
        };

        let mut loss_acc = 0.0;
        for batch in &batches {
            let frozen: &Model = model;
            let results: Vec<Result<(f64, crate::graph::GradStore), TrainError>> =
                thread_pool().install(|| {
                    batch
                        .par_iter()
                        .map(|&wi| {
                            let (eeg, tgt) = &train_windows[wi];
                            let eeg_t = eeg.to_tensor3();
                            let tgt_t = target_tensor(tgt, subbands)?;
                            let mut g = Graph::new(&frozen.params);
                            let pred = frozen.forward_graph(&mut g, &eeg_t)?;
                            let loss_var = g.pearson_loss(pred, &tgt_t)?;
                            let loss = g.value(loss_var).scalar().expect("loss is scalar");
                            let store = g.backward(loss_var)?;
                            Ok((loss, store))
                        })
                        .collect()
                });
            let inv = 1.0 / batch.len() as f64;
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, store) = r?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                batch_loss += loss * inv;
                model.params.accumulate_grads(&store, inv);
            }
            adam_step(&mut model.params, &mut hyper)?;
            if spec.precision == Precision::F32 {
                round_params_f32(&mut model.params);
            }
            steps += 1;
            loss_acc += batch_loss;
        }
        epoch_losses.push(loss_acc / batches.len() as f64);

        let val = validation_score(model, val_windows)?;
        epoch_val_scores.push(val);
        if val > best_val {
            best_val = val;
            best_epoch = epoch;
            best_values = model.params.iter().map(|p| p.value.data.clone()).collect();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= spec.patience {
                break;
            }
        }
    }

    // restore the best-scoring parameters
    if !best_values.is_empty() {
        for (p, vals) in model.params.iter_mut().zip(best_values) {
            p.value.data = vals;
        }
    }
    Ok(TrainReport {
        fold_id: None,
        epochs_run: epoch_losses.len(),
        steps,
        best_epoch,
        best_val_score: best_val,
        epoch_losses,
        epoch_val_scores,
        n_train_windows: train_windows.len(),
        n_val_windows: val_windows.len(),
    })
}

/// Trains one model on a fold of a dataset: selects the fold's train and
/// validation recordings, windows them, and runs [`train_on_windows`].
pub fn train(
    model: &mut Model,
    dataset: &[RecordingSample],
    fold: &FoldSpec,
    spec: &TrainSpec,
) -> Result<TrainReport, TrainError> {
    spec.validate()?;
    if spec.window_len < model.config.context_kernel {
        return Err(TrainError::Config(format!(
            "window_len {} must be >= context_kernel {}",
            spec.window_len, model.config.context_kernel
        )));
    }
    let train_windows =
        data::select_windows(dataset, fold, Split::Train, spec.window_len, spec.window_hop)?;
    let val_windows =
        data::select_windows(dataset, fold, Split::Val, spec.window_len, spec.window_hop)?;
    let mut report = train_on_windows(model, &train_windows, &val_windows, spec)?;
    report.fold_id = Some(fold.fold_id);
    Ok(report)
}
