//! Convolutional classifier: three conv/ReLU/max-pool blocks (VALID, 3x3
//! kernels, stride-1 conv, stride-2 pool) into two fully connected layers
//! with inverted dropout on the first and softmax on the output. Gradients
//! are exact reverse-mode through recorded traces; training is Adam with
//! early stopping on validation loss. Everything is 64-bit and
//! deterministic for a fixed seed.

pub mod checkpoint;
pub mod classify;
pub mod ops;
pub mod train;

pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use classify::CnnClassifier;
pub use ops::Tensor;
pub use train::{predict, train, AdamState, EpochStats, TrainConfig};

use ops::{
    conv2d_backward, conv2d_valid, fc_backward, fc_forward, log_softmax_at, maxpool2,
    maxpool2_backward, relu_backward_inplace, relu_inplace, softmax,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace mismatch: {0}")]
    TraceMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("checkpoint version/format mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static network shape. `conv_channels` and `fc1_width` default to the
/// 32/32/64 + 128 production sizes; miniatures shrink them for tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_side: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub conv_channels: [usize; 3],
    pub fc1_width: usize,
}

impl Architecture {
    pub fn standard(input_side: usize, in_channels: usize, n_classes: usize) -> Self {
        Architecture { input_side, in_channels, n_classes, conv_channels: [32, 32, 64], fc1_width: 128 }
    }

    /// Spatial sides after each layer: conv subtracts 2, pool maps
    /// n -> (n-2)/2 + 1. Errors when a layer cannot apply.
    pub fn shape_chain(input_side: usize) -> Result<[usize; 6], CnnError> {
        let mut side = input_side;
        let mut chain = [0usize; 6];
        for block in 0..3 {
            if side < 3 {
                return Err(CnnError::ShapeMismatch(format!(
                    "conv{} needs side >= 3, got {side} (from input {input_side})",
                    block + 1
                )));
            }
            side -= 2;
            chain[2 * block] = side;
            if side < 2 {
                return Err(CnnError::ShapeMismatch(format!(
                    "pool{} needs side >= 2, got {side} (from input {input_side})",
                    block + 1
                )));
            }
            side = (side - 2) / 2 + 1;
            chain[2 * block + 1] = side;
        }
        Ok(chain)
    }

    /// Side of the Pool3 maps.
    pub fn pool3_side(&self) -> Result<usize, CnnError> {
        Ok(Self::shape_chain(self.input_side)?[5])
    }

    fn flat_len(&self) -> Result<usize, CnnError> {
        let side = self.pool3_side()?;
        Ok(side * side * self.conv_channels[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub cin: usize,
    pub cout: usize,
    /// `[ky][kx][cin][cout]`, flattened.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    pub din: usize,
    pub dout: usize,
    /// `(din x dout)`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub conv: [ConvParams; 3],
    pub fc1: FcParams,
    pub fc2: FcParams,
}

impl CnnParams {
    pub fn zeros_like(&self) -> CnnParams {
        let zc = |c: &ConvParams| ConvParams {
            cin: c.cin,
            cout: c.cout,
            weights: vec![0.0; c.weights.len()],
            bias: vec![0.0; c.bias.len()],
        };
        let zf = |f: &FcParams| FcParams {
            din: f.din,
            dout: f.dout,
            weights: vec![0.0; f.weights.len()],
            bias: vec![0.0; f.bias.len()],
        };
        CnnParams {
            conv: [zc(&self.conv[0]), zc(&self.conv[1]), zc(&self.conv[2])],
            fc1: zf(&self.fc1),
            fc2: zf(&self.fc2),
        }
    }

    /// Parameter groups in a fixed order, shared by Adam, checkpoints, and
    /// the finite-difference walker.
    pub fn group_names() -> [&'static str; 10] {
        [
            "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "fc1_w", "fc1_b",
            "fc2_w", "fc2_b",
        ]
    }

    pub fn groups(&self) -> [&Vec<f64>; 10] {
        [
            &self.conv[0].weights,
            &self.conv[0].bias,
            &self.conv[1].weights,
            &self.conv[1].bias,
            &self.conv[2].weights,
            &self.conv[2].bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 10] {
        let [c1, c2, c3] = &mut self.conv;
        [
            &mut c1.weights,
            &mut c1.bias,
            &mut c2.weights,
            &mut c2.bias,
            &mut c3.weights,
            &mut c3.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
        ]
    }

    pub fn add_assign(&mut self, other: &CnnParams) {
        for (mine, theirs) in self.groups_mut().into_iter().zip(other.groups()) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub arch: Architecture,
    pub params: CnnParams,
}

impl CnnModel {
    /// Fan-in-scaled Gaussian weights (std = sqrt(2 / fan_in)), zero
    /// biases, drawn from the seed in a fixed group order.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, CnnError> {
        let flat = arch.flat_len()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let conv_io = [
            (arch.in_channels, arch.conv_channels[0]),
            (arch.conv_channels[0], arch.conv_channels[1]),
            (arch.conv_channels[1], arch.conv_channels[2]),
        ];
        let conv = conv_io.map(|(cin, cout)| ConvParams {
            cin,
            cout,
            weights: draw(9 * cin * cout, 9 * cin),
            bias: vec![0.0; cout],
        });
        let fc1 = FcParams {
            din: flat,
            dout: arch.fc1_width,
            weights: draw(flat * arch.fc1_width, flat),
            bias: vec![0.0; arch.fc1_width],
        };
        let fc2 = FcParams {
            din: arch.fc1_width,
            dout: arch.n_classes,
            weights: draw(arch.fc1_width * arch.n_classes, arch.fc1_width),
            bias: vec![0.0; arch.n_classes],
        };
        Ok(CnnModel { arch, params: CnnParams { conv, fc1, fc2 } })
    }

    fn check_input(&self, x: &Tensor) -> Result<(), CnnError> {
        if x.h != self.arch.input_side || x.w != self.arch.input_side || x.c != self.arch.in_channels
        {
            return Err(CnnError::ShapeMismatch(format!(
                "input {}x{}x{} does not match model input {}x{}x{}",
                x.h, x.w, x.c, self.arch.input_side, self.arch.input_side, self.arch.in_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    Eval,
    /// Inverted dropout on fc1 with the given keep probability; masks are
    /// drawn from the seed in example order.
    Train { dropout_seed: u64, keep_prob: f64 },
}

/// Everything the backward pass needs for one example.
#[derive(Clone, Debug)]
pub struct ExampleTrace {
    /// Post-ReLU conv outputs, one per block.
    pub conv_act: [Tensor; 3],
    /// Pool outputs; `pool_out[2]` is the Pool3 feature map stack.
    pub pool_out: [Tensor; 3],
    pub pool_routes: [Vec<u32>; 3],
    /// Post-ReLU fc1 activations, before dropout.
    pub fc1_act: Vec<f64>,
    /// Inverted-dropout scale per fc1 unit (0 or 1/keep_prob); None in eval.
    pub dropout_mask: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub examples: Vec<ExampleTrace>,
    pub train_mode: bool,
}

pub struct BatchOutput {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub trace: ForwardTrace,
}

fn forward_example(
    params: &CnnParams,
    x: &Tensor,
    mask: Option<&[f64]>,
) -> Result<ExampleTrace, CnnError> {
    let mut conv_act: Vec<Tensor> = Vec::with_capacity(3);
    let mut pool_out: Vec<Tensor> = Vec::with_capacity(3);
    let mut pool_routes: Vec<Vec<u32>> = Vec::with_capacity(3);
    let mut cursor = x;
    for conv in &params.conv {
        let mut act = conv2d_valid(cursor, &conv.weights, &conv.bias, conv.cout)?;
        relu_inplace(&mut act.data);
        let (pooled, routes) = maxpool2(&act)?;
        conv_act.push(act);
        pool_out.push(pooled);
        pool_routes.push(routes);
        cursor = pool_out.last().unwrap();
    }
    let flat = &pool_out[2].data;
    if flat.len() != params.fc1.din {
        return Err(CnnError::ShapeMismatch(format!(
            "pool3 flattens to {}, fc1 expects {}",
            flat.len(),
            params.fc1.din
        )));
    }
    let mut fc1_act = fc_forward(flat, &params.fc1.weights, &params.fc1.bias);
    relu_inplace(&mut fc1_act);
    let dropped: Vec<f64> = match mask {
        Some(m) => fc1_act.iter().zip(m).map(|(a, s)| a * s).collect(),
        None => fc1_act.clone(),
    };
    let logits = fc_forward(&dropped, &params.fc2.weights, &params.fc2.bias);
    let probs = softmax(&logits);
    Ok(ExampleTrace {
        conv_act: conv_act.try_into().expect("three blocks"),
        pool_out: pool_out.try_into().expect("three blocks"),
        pool_routes: pool_routes.try_into().expect("three blocks"),
        fc1_act,
        dropout_mask: mask.map(<[f64]>::to_vec),
        logits,
        probs,
    })
}

/// Full forward pass over a batch. Train mode records dropout masks so the
/// backward pass can route through them; eval mode is deterministic.
pub fn forward(
    model: &CnnModel,
    batch: &[Tensor],
    mode: ForwardMode,
) -> Result<BatchOutput, CnnError> {
    for x in batch {
        model.check_input(x)?;
    }
    let masks: Option<Vec<Vec<f64>>> = match mode {
        ForwardMode::Eval => None,
        ForwardMode::Train { dropout_seed, keep_prob } => {
            assert!(keep_prob > 0.0 && keep_prob <= 1.0, "keep_prob in (0,1]");
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            Some(
                (0..batch.len())
                    .map(|_| {
                        (0..model.arch.fc1_width)
                            .map(|_| {
                                if rng.gen::<f64>() < keep_prob {
                                    1.0 / keep_prob
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect(),
            )
        }
    };
    let examples: Result<Vec<ExampleTrace>, CnnError> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| forward_example(&model.params, x, masks.as_ref().map(|m| m[i].as_slice())))
        .collect();
    let examples = examples?;
    Ok(BatchOutput {
        logits: examples.iter().map(|e| e.logits.clone()).collect(),
        probs: examples.iter().map(|e| e.probs.clone()).collect(),
        trace: ForwardTrace { examples, train_mode: masks.is_some() },
    })
}

/// Backward pass for one example; gradients accumulate into `acc` scaled by
/// `scale` (1 / batch size).
fn backward_example(
    params: &CnnParams,
    x: &Tensor,
    tr: &ExampleTrace,
    label: usize,
    scale: f64,
    acc: &mut CnnParams,
) {
    let n_classes = params.fc2.dout;
    let mut delta_logits = tr.probs.clone();
    delta_logits[label] -= 1.0;
    for d in &mut delta_logits {
        *d *= scale;
    }

    let dropped: Vec<f64> = match &tr.dropout_mask {
        Some(m) => tr.fc1_act.iter().zip(m).map(|(a, s)| a * s).collect(),
        None => tr.fc1_act.clone(),
    };
    let (mut d_fc1_out, dw2, db2) = fc_backward(&dropped, &params.fc2.weights, &delta_logits);
    debug_assert_eq!(db2.len(), n_classes);
    if let Some(mask) = &tr.dropout_mask {
        for (d, s) in d_fc1_out.iter_mut().zip(mask) {
            *d *= s;
        }
    }
    relu_backward_inplace(&mut d_fc1_out, &tr.fc1_act);
    let (d_flat, dw1, db1) = fc_backward(&tr.pool_out[2].data, &params.fc1.weights, &d_fc1_out);

    // Back through the three conv blocks.
    let p3 = &tr.pool_out[2];
    let mut d_pool = Tensor::from_data(p3.h, p3.w, p3.c, d_flat).expect("flat matches pool3");
    for block in (0..3).rev() {
        let act = &tr.conv_act[block];
        let mut d_act = maxpool2_backward(&d_pool, &tr.pool_routes[block], act.h, act.w);
        relu_backward_inplace(&mut d_act.data, &act.data);
        let input = if block == 0 { x } else { &tr.pool_out[block - 1] };
        let conv = &params.conv[block];
        let (d_input, dk, db) = conv2d_backward(input, &conv.weights, conv.cout, &d_act, block > 0);
        for (a, b) in acc.conv[block].weights.iter_mut().zip(&dk) {
            *a += b;
        }
        for (a, b) in acc.conv[block].bias.iter_mut().zip(&db) {
            *a += b;
        }
        if let Some(d_input) = d_input {
            d_pool = d_input;
        }
    }

    for (a, b) in acc.fc1.weights.iter_mut().zip(&dw1) {
        *a += b;
    }
    for (a, b) in acc.fc1.bias.iter_mut().zip(&db1) {
        *a += b;
    }
    for (a, b) in acc.fc2.weights.iter_mut().zip(&dw2) {
        *a += b;
    }
    for (a, b) in acc.fc2.bias.iter_mut().zip(&db2) {
        *a += b;
    }
}

/// Examples per accumulation chunk. Fixed so the gradient reduction tree
/// is identical regardless of worker count.
const GRAD_CHUNK: usize = 4;

/// Loss and exact gradients for a train-mode trace:
/// `mean(-log p[label]) + beta_l2 * (|fc1 w|^2 + |fc2 w|^2)`.
pub fn loss_and_gradients(
    model: &CnnModel,
    batch: &[Tensor],
    labels: &[usize],
    trace: &ForwardTrace,
    beta_l2: f64,
) -> Result<(f64, CnnParams), CnnError> {
    if trace.examples.len() != batch.len() || labels.len() != batch.len() {
        return Err(CnnError::TraceMismatch(format!(
            "{} trace examples, {} inputs, {} labels",
            trace.examples.len(),
            batch.len(),
            labels.len()
        )));
    }
    if !trace.train_mode {
        return Err(CnnError::TraceMismatch("backward needs a train-mode trace".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.arch.n_classes) {
        return Err(CnnError::ShapeMismatch(format!(
            "label {bad} out of range for {} classes",
            model.arch.n_classes
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    let ranges: Vec<std::ops::Range<usize>> = (0..batch.len())
        .step_by(GRAD_CHUNK)
        .map(|start| start..(start + GRAD_CHUNK).min(batch.len()))
        .collect();
    let partials: Vec<(f64, CnnParams)> = ranges
        .into_par_iter()
        .map(|range| {
            let mut acc = model.params.zeros_like();
            let mut loss = 0.0;
            for i in range {
                let tr = &trace.examples[i];
                loss -= log_softmax_at(&tr.logits, labels[i]);
                backward_example(&model.params, &batch[i], tr, labels[i], scale, &mut acc);
            }
            (loss, acc)
        })
        .collect();

    let mut grads = model.params.zeros_like();
    let mut ce_sum = 0.0;
    for (loss, partial) in &partials {
        ce_sum += loss;
        grads.add_assign(partial);
    }

    let penalty: f64 = model.params.fc1.weights.iter().map(|w| w * w).sum::<f64>()
        + model.params.fc2.weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in grads.fc1.weights.iter_mut().zip(&model.params.fc1.weights) {
        *g += 2.0 * beta_l2 * w;
    }
    for (g, w) in grads.fc2.weights.iter_mut().zip(&model.params.fc2.weights) {
        *g += 2.0 * beta_l2 * w;
    }
    Ok((ce_sum * scale + beta_l2 * penalty, grads))
}

/// Pool3 feature maps for one image (eval mode), for attribution.
pub fn pool3_maps(model: &CnnModel, x: &Tensor) -> Result<Tensor, CnnError> {
    model.check_input(x)?;
    let mut cursor = x.clone();
    for conv in &model.params.conv {
        let mut act = conv2d_valid(&cursor, &conv.weights, &conv.bias, conv.cout)?;
        relu_inplace(&mut act.data);
        let (pooled, _) = maxpool2(&act)?;
        cursor = pooled;
    }
    Ok(cursor)
}
