//! Mini-batch training with Adam, early stopping on validation masked MAE,
//! and deterministic data-parallel gradient accumulation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{Forecaster, Sample};
use crate::params::{clip_grad_norm, Adam, ParamSet};

/// Anything trainable by [`train`].
pub trait Model: Sync {
    type Sample: Send;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn make_sample(&self, ds: &WindowedDataset, k: usize) -> Self::Sample;
    /// Summed masked absolute error, scored entry count, and the gradient of
    /// the summed error.
    fn error_and_grad(&self, s: &Self::Sample) -> Result<(f64, f64, Vec<Array2<f64>>)>;
    fn predict(&self, s: &Self::Sample) -> Result<Array2<f64>>;
    fn target<'a>(&self, s: &'a Self::Sample) -> (&'a Array2<f64>, &'a Array2<f64>);
}

impl Model for Forecaster {
    type Sample = Sample;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn make_sample(&self, ds: &WindowedDataset, k: usize) -> Sample {
        self.sample(ds, k)
    }

    fn error_and_grad(&self, s: &Sample) -> Result<(f64, f64, Vec<Array2<f64>>)> {
        Forecaster::error_and_grad(self, s)
    }

    fn predict(&self, s: &Sample) -> Result<Array2<f64>> {
        Forecaster::predict(self, s)
    }

    fn target<'a>(&self, s: &'a Sample) -> (&'a Array2<f64>, &'a Array2<f64>) {
        (&s.target, &s.target_mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 100,
            patience: 15,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "train.learning_rate and train.batch_size must be positive".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// The per-epoch callback asked to stop.
    Requested,
    Diverged { stage: String },
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub optimizer: Adam,
    pub best_params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub stop: Option<StopReason>,
}

impl TrainState {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            optimizer: Adam::new(params, cfg.learning_rate),
            best_params: params.clone(),
            history: Vec::new(),
            stop: None,
        }
    }
}

/// Seed of the shuffling stream of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn run_batch<M: Model>(model: &M, ds: &WindowedDataset, batch: &[usize]) -> Result<(f64, f64, Vec<Array2<f64>>)> {
    let parts: Vec<Result<(f64, f64, Vec<Array2<f64>>)>> = batch
        .par_iter()
        .map(|&k| {
            let s = model.make_sample(ds, k);
            model.error_and_grad(&s)
        })
        .collect();
    let mut err = 0.0;
    let mut count = 0.0;
    let mut grads = model.params().zeros_like();
    for p in parts {
        let (e, c, g) = p?;
        err += e;
        count += c;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    Ok((err, count, grads))
}

/// Masked MAE of `model` over a dataset (`None` if nothing is scored).
pub fn dataset_mae<M: Model>(model: &M, ds: &WindowedDataset) -> Result<Option<f64>> {
    let parts: Vec<Result<(f64, f64)>> = (0..ds.len())
        .into_par_iter()
        .map(|k| {
            let s = model.make_sample(ds, k);
            let y = model.predict(&s)?;
            let (t, m) = model.target(&s);
            let e = ndarray::Zip::from(&y)
                .and(t)
                .and(m)
                .fold(0.0, |acc, &p, &y, &m| acc + m * (p - y).abs());
            Ok((e, m.sum()))
        })
        .collect();
    let (mut e, mut c) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        e += a;
        c += b;
    }
    Ok((c > 0.0).then(|| e / c))
}

/// Predictions with their targets and masks, in dataset order.
pub fn predict_dataset<M: Model>(
    model: &M,
    ds: &WindowedDataset,
) -> Result<Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>> {
    (0..ds.len())
        .into_par_iter()
        .map(|k| {
            let s = model.make_sample(ds, k);
            let y = model.predict(&s)?;
            let (t, m) = model.target(&s);
            Ok((y, t.clone(), m.clone()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stop: StopReason,
}

/// Returned by the per-epoch callback of [`train_from`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains from scratch; on return the model holds the best-validation
/// parameters.
pub fn train<M: Model>(
    model: &mut M,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let mut state = TrainState::new(model.params(), cfg);
    train_from(model, train_ds, val_ds, cfg, seed, &mut state, |_, _| Ok(Control::Continue))
}

/// Continues from `state`. `on_epoch` runs after every epoch with the model
/// holding that epoch's parameters (e.g. to checkpoint) and may end the run.
/// On return the model holds the best-validation parameters.
pub fn train_from<M: Model, F>(
    model: &mut M,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&M, &TrainState) -> Result<Control>,
{
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::InsufficientHistory {
            split: if train_ds.is_empty() { "train" } else { "val" }.into(),
            reason: "no windows to train or validate on".into(),
        });
    }
    let mut stop = state.stop.clone();
    while stop.is_none() && state.epoch < cfg.max_epochs {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
        let (mut err, mut count) = (0.0, 0.0);
        let mut diverged = None;
        for batch in order.chunks(cfg.batch_size) {
            let (e, c, mut grads) = match run_batch(model, train_ds, batch) {
                Ok(r) => r,
                Err(Error::NonFinite { stage }) => {
                    diverged = Some(stage);
                    break;
                }
                Err(e) => return Err(e),
            };
            if !e.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                diverged = Some("loss".to_string());
                break;
            }
            err += e;
            count += c;
            if c == 0.0 {
                continue;
            }
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x / c);
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            state.optimizer.update(model.params_mut(), &grads);
            if !model.params().all_finite() {
                diverged = Some("optimizer step".to_string());
                break;
            }
        }
        if let Some(stage) = diverged {
            stop = Some(StopReason::Diverged { stage });
            break;
        }
        let val = match dataset_mae(model, val_ds) {
            Ok(v) => v,
            Err(Error::NonFinite { stage }) => {
                stop = Some(StopReason::Diverged { stage });
                break;
            }
            Err(e) => return Err(e),
        };
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            train_mae: if count > 0.0 { err / count } else { 0.0 },
            val_mae: val,
            seconds: started.elapsed().as_secs_f64(),
        });
        let v = val.unwrap_or(f64::INFINITY);
        if v < state.best_val || state.best_epoch == 0 {
            state.best_val = v;
            state.best_epoch = epoch;
            state.best_params = model.params().clone();
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs > cfg.patience {
                stop = Some(StopReason::EarlyStopped);
            }
        }
        state.stop = stop.clone();
        if on_epoch(model, state)? == Control::Stop && stop.is_none() {
            stop = Some(StopReason::Requested);
            state.stop = stop.clone();
        }
    }
    let stop = stop.unwrap_or(StopReason::MaxEpochs);
    state.stop = Some(stop.clone());
    *model.params_mut() = state.best_params.clone();
    Ok(TrainReport {
        history: state.history.clone(),
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        stop,
    })
}

/// Writes `epoch,train_mae,val_mae,seconds`; an undefined validation MAE is
/// left empty.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_mae,val_mae,seconds\n");
    for r in history {
        let val = r.val_mae.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.train_mae, val, r.seconds));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
