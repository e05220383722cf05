//! Mini-batch gradient descent with early stopping.

use std::time::Instant;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Activation;
use super::network::{evaluate_mse, gradients};
use super::params::{ModelDims, ModelParams, HEAD_TENSORS};
use crate::error::{HintError, Result};
use crate::sample::{SampleSource, SubregionSample};

const DIVERGENCE_LOSS: f64 = 1e6;
const VALIDATION_SUBSET_SEED: u64 = 0x7a11d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Window side length (odd).
    pub w: usize,
    pub h: usize,
    pub h_l: usize,
    pub s_d: usize,
    /// Width of the dense layer feeding the LSTM.
    pub lstm_input: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Momentum coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    pub activation: Activation,
    /// Training samples drawn per epoch (0 = all).
    pub samples_per_epoch: usize,
    /// Size of the fixed validation subset (0 = all).
    pub max_val_samples: usize,
    /// Update only the output layer.
    pub train_head_only: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            w: 5,
            h: 16,
            h_l: 32,
            s_d: 16,
            lstm_input: 16,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            patience: 10,
            seed: 0,
            momentum: 0.0,
            activation: Activation::Relu,
            samples_per_epoch: 0,
            max_val_samples: 0,
            train_head_only: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("w", self.w),
            ("h", self.h),
            ("h_l", self.h_l),
            ("s_d", self.s_d),
            ("lstm_input", self.lstm_input),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = positive.iter().find(|p| p.1 == 0) {
            return Err(HintError::InvalidInput(format!("hyperparameter {name} must be positive")));
        }
        if self.w % 2 == 0 {
            return Err(HintError::InvalidInput(format!("window size w = {} must be odd", self.w)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(HintError::InvalidInput(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HintError::InvalidInput(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn dims(&self, n_st: usize, n_s: usize, n_t: usize) -> ModelDims {
        ModelDims {
            w: self.w,
            n_st,
            n_s,
            n_t,
            h: self.h,
            m: self.lstm_input,
            h_l: self.h_l,
            s_d: self.s_d,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, measured during the epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch.
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were returned (0 = the initial ones).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Same report without the wall time, for reproducibility checks.
    pub fn timeless(&self) -> TrainReport {
        TrainReport { wall_time_s: 0.0, ..self.clone() }
    }
}

fn fetch(source: &dyn SampleSource, idx: &[usize]) -> Result<Vec<SubregionSample>> {
    idx.iter().map(|&i| source.get(i)).collect()
}

/// Trains one level's model. Early stopping watches validation MSE (or the
/// training loss when no validation samples exist) and the parameters of the
/// best epoch are returned.
pub fn train_level(
    train: &dyn SampleSource,
    validation: Option<&dyn SampleSource>,
    init: ModelParams,
    hyper: &HyperParams,
) -> Result<(ModelParams, TrainReport)> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(HintError::InsufficientData("no training samples".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);

    // fixed validation subset, independent of the training seed
    let val_samples: Option<Vec<SubregionSample>> = match validation {
        Some(v) if !v.is_empty() => {
            let mut idx: Vec<usize> = if hyper.max_val_samples > 0 && v.len() > hyper.max_val_samples {
                let mut val_rng = ChaCha8Rng::seed_from_u64(VALIDATION_SUBSET_SEED);
                index::sample(&mut val_rng, v.len(), hyper.max_val_samples).into_vec()
            } else {
                (0..v.len()).collect()
            };
            idx.sort_unstable();
            Some(fetch(v, &idx)?)
        }
        _ => None,
    };
    let frozen: Vec<bool> = super::params::TENSOR_NAMES
        .iter()
        .map(|n| hyper.train_head_only && !HEAD_TENSORS.contains(n))
        .collect();

    let mut params = init;
    let mut velocity = (hyper.momentum > 0.0).then(|| ModelParams::zeros(params.dims));
    let initial_val = match &val_samples {
        Some(v) => evaluate_mse(v, &params)?,
        None => f64::INFINITY,
    };
    let mut best = (initial_val, 0usize, params.clone());
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: initial_val,
        wall_time_s: 0.0,
    };
    let per_epoch = if hyper.samples_per_epoch > 0 { hyper.samples_per_epoch.min(train.len()) } else { train.len() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0usize;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order[..per_epoch].chunks(hyper.batch_size) {
            let batch = fetch(train, chunk)?;
            let (loss, grads) = gradients(&batch, &params)?;
            if !(loss <= DIVERGENCE_LOSS) {
                return Err(HintError::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            apply_update(&mut params, &grads, velocity.as_mut(), hyper, &frozen);
        }
        let train_loss = loss_sum / per_epoch as f64;
        let val_loss = match &val_samples {
            Some(v) => evaluate_mse(v, &params)?,
            None => train_loss,
        };
        if !(val_loss <= DIVERGENCE_LOSS) {
            return Err(HintError::Diverged { epoch, loss: val_loss });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.epochs_run = epoch;
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                info!("early stop after epoch {epoch}, best epoch {}", best.1);
                break;
            }
        }
    }
    report.best_epoch = best.1;
    report.best_val_loss = best.0;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((best.2, report))
}

fn apply_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: Option<&mut ModelParams>,
    hyper: &HyperParams,
    frozen: &[bool],
) {
    let lr = hyper.learning_rate;
    match velocity {
        None => {
            for (k, ((_, p), (_, g))) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
                if frozen[k] {
                    continue;
                }
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= lr * gi;
                }
            }
        }
        Some(vel) => {
            let mu = hyper.momentum;
            for (k, (((_, p), (_, g)), (_, v))) in
                params.tensors_mut().into_iter().zip(grads.tensors()).zip(vel.tensors_mut()).enumerate()
            {
                if frozen[k] {
                    continue;
                }
                for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mu * *vi - lr * gi;
                    *pi += *vi;
                }
            }
        }
    }
}
