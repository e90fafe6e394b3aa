//! Optimization loop: Adam with reduce-on-plateau learning-rate scheduling
//! driven by validation loss.
//!
//! Defaults: at most 100 epochs, batch size 16, Adam at 2e-4, plateau
//! halving with patience 10 and threshold 1e-4 down to a floor of 1e-7.
//! With a validation set the weights of the lowest-validation-loss epoch
//! are returned; without one, training runs the full epoch budget at a
//! fixed rate and the final weights are returned.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fcn::{FcnModel, ModelError, Scalar, ScoreMap};
use crate::loss::{self, LossBreakdown, LossError};
use crate::preprocess::DataCube;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub min_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    /// Weight of the per-cell loss component.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 16,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            min_lr: 1e-7,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            lambda: loss::DEFAULT_LAMBDA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > self.min_lr && self.min_lr > 0.0) {
            return Err(TrainError::InvalidConfig(
                "need learning_rate > min_lr > 0".into(),
            ));
        }
        if self.plateau_patience == 0 {
            return Err(TrainError::InvalidConfig("plateau_patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule. `observe` is called once per epoch with the
/// monitored loss; the returned rate applies from the next epoch on.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    min_lr: f64,
    best: Option<f64>,
    stalled: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        PlateauScheduler {
            lr: lr0,
            factor,
            patience,
            threshold,
            min_lr,
            best: None,
            stalled: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(
            cfg.learning_rate,
            cfg.plateau_factor,
            cfg.plateau_patience,
            cfg.plateau_threshold,
            cfg.min_lr,
        )
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's monitored loss; an improvement is a drop of more
    /// than `threshold` below the best seen so far.
    pub fn observe(&mut self, monitored: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => monitored < best - self.threshold,
        };
        if improved {
            self.best = Some(monitored);
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stalled = 0;
            }
        }
        self.lr
    }
}

/// Adam moment state; moments are kept in f64 whatever the model's
/// parameter type.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn for_slices(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over aligned parameter/gradient slices.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..param.len() {
            let g = grad[i].as_f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let update = lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            param[i] = param[i] - T::of(update);
        }
    }
}

/// One labeled training sample. The cube is shared so fold-level views of
/// one dataset stay cheap.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub cube: std::sync::Arc<DataCube>,
    pub label: u8,
}

impl TrainSample {
    pub fn new(cube: DataCube, label: u8) -> Self {
        TrainSample {
            cube: std::sync::Arc::new(cube),
            label,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_gap: f64,
    pub train_patch: f64,
    pub val_total: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were returned (lowest validation loss), when a
    /// validation set was used.
    pub best_epoch: Option<usize>,
}

fn batch_input<T: Scalar>(samples: &[&TrainSample]) -> Array4<T> {
    let (c, h, w) = samples[0].cube.data().dim();
    let mut input = Array4::<T>::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        ndarray::Zip::from(&mut input.index_axis_mut(Axis(0), i))
            .and(s.cube.data())
            .for_each(|d, &v| *d = T::of(v as f64));
    }
    input
}

/// Mean per-sample total loss in inference mode (frozen batch norm).
pub fn validation_loss<T: Scalar>(
    model: &FcnModel<T>,
    samples: &[TrainSample],
    batch_size: usize,
    lambda: f64,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let probs = model.infer_batch(&batch_input::<T>(&refs))?;
        for (i, s) in chunk.iter().enumerate() {
            let map = ScoreMap::new(probs.index_axis(Axis(0), i).mapv(|v| v.as_f64()));
            sum += loss::total_loss(&map, s.label, lambda)?.total;
        }
    }
    Ok(sum / samples.len() as f64)
}

/// Trains the model. With a validation set the plateau schedule monitors
/// the validation loss and the best-validation-loss weights are returned;
/// without one the rate stays fixed and the final weights are returned.
/// Deterministic in `cfg.seed` (per-epoch shuffle included).
pub fn train<T: Scalar>(
    mut model: FcnModel<T>,
    train_set: &[TrainSample],
    val_set: Option<&[TrainSample]>,
    cfg: &TrainConfig,
) -> Result<(FcnModel<T>, TrainHistory), TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.zero_gradients().flat().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::for_slices(&sizes);
    let mut scheduler = PlateauScheduler::from_config(cfg);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, usize, Vec<(String, Vec<usize>, Vec<T>)>)> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let lr = scheduler.lr();
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_gap, mut sum_patch) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&TrainSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let input = batch_input::<T>(&samples);
            let caches = model.train_forward(&input)?;
            let probs = model.cached_probs(&caches);
            let (n, hm, wm) = probs.dim();
            let mut d_probs = Array3::<T>::zeros((n, hm, wm));
            for (i, s) in samples.iter().enumerate() {
                let map = ScoreMap::new(probs.index_axis(Axis(0), i).mapv(|v| v.as_f64()));
                let breakdown: LossBreakdown = loss::total_loss(&map, s.label, cfg.lambda)?;
                sum_total += breakdown.total;
                sum_gap += breakdown.l_gap;
                sum_patch += breakdown.l_patch;
                let grad = loss::total_loss_map_grad(&map, s.label, cfg.lambda)?;
                let scale = 1.0 / n as f64;
                d_probs
                    .index_axis_mut(Axis(0), i)
                    .assign(&grad.mapv(|g| T::of(g * scale)));
            }
            let grads = model.backward(&caches, &d_probs);
            let flat = grads.flat();
            adam_step(&mut model.param_slices_mut(), &flat, &mut adam, lr, cfg);
        }

        let n = train_set.len() as f64;
        let mut stats = EpochStats {
            epoch,
            train_total: sum_total / n,
            train_gap: sum_gap / n,
            train_patch: sum_patch / n,
            val_total: None,
            lr,
        };
        if let Some(val) = val_set {
            let val_total = validation_loss(&model, val, cfg.batch_size, cfg.lambda)?;
            stats.val_total = Some(val_total);
            let is_best = best.as_ref().map_or(true, |(b, _, _)| val_total < *b);
            if is_best {
                best = Some((val_total, epoch, model.snapshot()));
            }
            scheduler.observe(val_total);
        }
        history.epochs.push(stats);
    }

    if let Some((_, epoch, snapshot)) = best {
        model.load_named_tensors(&snapshot)?;
        history.best_epoch = Some(epoch);
    }
    Ok((model, history))
}
