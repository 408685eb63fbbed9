//! Fold classifier: builds, trains, and applies the convolutional network
//! inside the cross-validation harness.

use super::ops::Tensor;
use super::train::{predict, train, TrainConfig};
use super::{Architecture, CnnModel};
use crate::eval::FoldModel;
use crate::util::sub_seed;

/// Trains one network per fold with the configured recipe. The input side
/// and channel count come from the images; initialization and shuffling
/// seeds derive from the fold seed.
#[derive(Clone, Debug)]
pub struct CnnClassifier {
    pub n_classes: usize,
    pub conv_channels: [usize; 3],
    pub fc1_width: usize,
    pub config: TrainConfig,
}

impl CnnClassifier {
    pub fn standard(n_classes: usize, config: TrainConfig) -> Self {
        CnnClassifier { n_classes, conv_channels: [32, 32, 64], fc1_width: 128, config }
    }
}

impl FoldModel<Tensor> for CnnClassifier {
    fn fit_predict(
        &self,
        xs: &[Tensor],
        ys: &[usize],
        train_idx: &[usize],
        val_idx: &[usize],
        test_idx: &[usize],
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, String> {
        let first = xs.first().ok_or("no images")?;
        let arch = Architecture {
            input_side: first.h,
            in_channels: first.c,
            n_classes: self.n_classes,
            conv_channels: self.conv_channels,
            fc1_width: self.fc1_width,
        };
        let gather = |idx: &[usize]| -> (Vec<Tensor>, Vec<usize>) {
            (idx.iter().map(|&i| xs[i].clone()).collect(), idx.iter().map(|&i| ys[i]).collect())
        };
        let (train_x, train_y) = gather(train_idx);
        let (val_x, val_y) = gather(val_idx);
        let (test_x, _) = gather(test_idx);

        let model =
            CnnModel::new(arch, sub_seed(seed, "init")).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { seed: sub_seed(seed, "train"), ..self.config };
        let (trained, _history) =
            train(model, &train_x, &train_y, &val_x, &val_y, &cfg).map_err(|e| e.to_string())?;
        predict(&trained, &test_x).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::run_cv;
    use rand::{Rng, SeedableRng};

    /// Tiny separable image set: class decides which half is bright.
    fn toy_images(n: usize, side: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let mut data = vec![0.0; side * side];
            for y in 0..side {
                for x in 0..side {
                    let bright = if class == 0 { y < side / 2 } else { y >= side / 2 };
                    let base: f64 = if bright { 0.85 } else { 0.15 };
                    data[y * side + x] = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                }
            }
            xs.push(Tensor { h: side, w: side, c: 1, data });
            ys.push(class);
        }
        (xs, ys)
    }

    #[test]
    fn cnn_classifier_learns_toy_split_under_cv() {
        let (xs, ys) = toy_images(36, 22, 5);
        let config = TrainConfig {
            max_epochs: 120,
            patience: 120,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let classifier = CnnClassifier {
            n_classes: 2,
            conv_channels: [4, 4, 6],
            fc1_width: 12,
            config,
        };
        let result = run_cv(&xs, &ys, 2, 3, 11, &classifier).unwrap();
        assert!(
            result.summary.mean_accuracy > 0.9,
            "mean accuracy {}",
            result.summary.mean_accuracy
        );
    }
}
