//! Adam optimization and the epoch loop: seeded mini-batch shuffling,
//! validation-loss early stopping with parameter snapshots, and batch-mode
//! prediction.

use super::ops::Tensor;
use super::{forward, loss_and_gradients, CnnError, CnnModel, CnnParams, ForwardMode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta_l2: f64,
    pub keep_prob: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta_l2: 0.01,
            keep_prob: 0.75,
            batch_size: 29,
            max_epochs: 300,
            patience: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// First/second moment estimates per parameter group, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &CnnParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam step on a single parameter group.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Advance the step counter and update every parameter group.
pub fn adam_update(
    params: &mut CnnParams,
    grads: &CnnParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t;
    let grad_groups = grads.groups().map(|g| g.as_slice() as *const [f64]);
    for (i, group) in params.groups_mut().into_iter().enumerate() {
        // Groups are disjoint; the raw pointer only sidesteps borrowing
        // params and grads with matching lifetimes.
        let g = unsafe { &*grad_groups[i] };
        adam_step(group, g, &mut state.m[i], &mut state.v[i], t, cfg);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

fn evaluate(model: &CnnModel, xs: &[Tensor], ys: &[usize]) -> Result<(f64, f64), CnnError> {
    let probs = predict(model, xs)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ((p, &y), x) in probs.iter().zip(ys).zip(xs) {
        let _ = x;
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == y {
            correct += 1;
        }
    }
    Ok((loss / ys.len() as f64, correct as f64 / ys.len() as f64))
}

/// Mini-batch Adam with early stopping: epochs run seeded shuffles in
/// batches of `cfg.batch_size` (last batch may be smaller), validation
/// loss is checked after every epoch, and training stops once it fails to
/// improve for `cfg.patience` consecutive epochs. Returns the parameters
/// from the best-validation epoch and the full history.
pub fn train(
    model_init: CnnModel,
    train_x: &[Tensor],
    train_y: &[usize],
    val_x: &[Tensor],
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<(CnnModel, Vec<EpochStats>), CnnError> {
    if cfg.max_epochs == 0 {
        return Ok((model_init, Vec::new()));
    }
    if train_x.is_empty() || train_x.len() != train_y.len() {
        return Err(CnnError::EmptyTrainingSet);
    }
    if val_x.is_empty() || val_x.len() != val_y.len() {
        return Err(CnnError::EmptyValidationSet);
    }
    let mut model = model_init;
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut epochs_without_improvement = 0usize;

    let mut indices: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch_indices in indices.chunks(cfg.batch_size) {
            let batch: Vec<Tensor> = batch_indices.iter().map(|&i| train_x[i].clone()).collect();
            let labels: Vec<usize> = batch_indices.iter().map(|&i| train_y[i]).collect();
            let dropout_seed = rng.gen::<u64>();
            let out = forward(
                &model,
                &batch,
                ForwardMode::Train { dropout_seed, keep_prob: cfg.keep_prob },
            )?;
            let (loss, grads) =
                loss_and_gradients(&model, &batch, &labels, &out.trace, cfg.beta_l2)?;
            adam_update(&mut model.params, &grads, &mut state, cfg);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_x.len() as f64;
        let (val_loss, val_accuracy) = evaluate(&model, val_x, val_y)?;
        history.push(EpochStats { epoch, train_loss, val_loss, val_accuracy });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_params = model.params.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok((model, history))
}

/// Eval-mode class probabilities, one row per image.
pub fn predict(model: &CnnModel, images: &[Tensor]) -> Result<Vec<Vec<f64>>, CnnError> {
    let out: Result<Vec<Vec<f64>>, CnnError> = images
        .par_iter()
        .map(|x| {
            let batch_out = forward(model, std::slice::from_ref(x), ForwardMode::Eval)?;
            Ok(batch_out.probs.into_iter().next().unwrap())
        })
        .collect();
    out
}
