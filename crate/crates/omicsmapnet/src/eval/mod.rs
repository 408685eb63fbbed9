//! Evaluation harness: stratified k-fold splits, cross-validation over a
//! pluggable fold classifier, label-permutation control, and the summary
//! statistics (accuracy CI, per-class ROC/AUC).

pub mod logreg;
pub mod stats;

pub use logreg::{logreg_cv, logreg_fit, LogRegCvResult};
pub use stats::{enrich_hypergeom, hypergeom_sf, ranksum_test, roc_auc, EnrichmentRow};

use crate::util::{median, rng_for, sub_seed};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {class:?} has {size} members, fewer than {k}")]
    ClassTooSmall { class: String, size: usize, k: usize },
    #[error("ROC needs both classes present")]
    OneClassOnly,
    #[error("feature matrix contains a non-finite value")]
    NonFiniteFeature,
    #[error("selected id {0:?} is not in the background")]
    SelectionNotInBackground(String),
    #[error("group {0:?} contains ids outside the background")]
    GroupNotInBackground(String),
    #[error("bad binary labels: {0}")]
    BadBinaryLabels(String),
    #[error("fold model failed: {0}")]
    Model(String),
}

/// Per class, shuffled members are dealt round-robin into `k` folds, so
/// per-class fold sizes differ by at most one. Deterministic per seed.
pub fn stratified_kfold(
    labels: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, EvalError> {
    assert!(k >= 1, "k must be at least 1");
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = rng_for(seed, "stratified-kfold");
    let mut folds = vec![Vec::new(); k];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(EvalError::ClassTooSmall {
                class: class.to_string(),
                size: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for (slot, idx) in members.into_iter().enumerate() {
            folds[slot % k].push(idx);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// A classifier trained per fold. `fit_predict` sees the full sample and
/// label slices plus index sets and returns one probability row per test
/// index. Honest models read labels only at the train/val indices; the
/// validation indices are the fold's internal early-stopping split, which
/// models without early stopping may ignore.
pub trait FoldModel<X: Sync>: Sync {
    fn fit_predict(
        &self,
        xs: &[X],
        ys: &[usize],
        train: &[usize],
        val: &[usize],
        test: &[usize],
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, String>;
}

#[derive(Clone, Debug)]
pub struct ClassRoc {
    pub class_index: usize,
    pub curve: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Clone, Debug)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_size: usize,
    pub accuracy: f64,
    /// Row-major true-class x predicted-class counts.
    pub confusion: Vec<usize>,
    pub class_roc: Vec<ClassRoc>,
}

#[derive(Clone, Debug)]
pub struct CvSummary {
    pub mean_accuracy: f64,
    pub median_accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_auc_per_class: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: Vec<FoldMetrics>,
    pub summary: CvSummary,
}

impl CvResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }
}

fn summarize(folds: &[FoldMetrics], n_classes: usize) -> CvSummary {
    let accuracies: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let k = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / k;
    let sd = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / k.sqrt();
    let mean_auc_per_class = (0..n_classes)
        .map(|c| {
            folds.iter().map(|f| f.class_roc[c].auc).sum::<f64>() / folds.len() as f64
        })
        .collect();
    CvSummary {
        mean_accuracy: mean,
        median_accuracy: median(&accuracies),
        ci_low: mean - half,
        ci_high: mean + half,
        mean_auc_per_class,
    }
}

/// Size of the early-stopping split: one part in ten of the fold's
/// training pool, stratified, shrunk only when a class is too small.
fn carve_validation(
    pool: &[usize],
    ys: &[usize],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    let pool_labels: Vec<usize> = pool.iter().map(|&i| ys[i]).collect();
    let mut min_class = usize::MAX;
    let n_classes = pool_labels.iter().max().map_or(0, |&m| m + 1);
    for class in 0..n_classes {
        let count = pool_labels.iter().filter(|&&l| l == class).count();
        if count > 0 {
            min_class = min_class.min(count);
        }
    }
    let k_val = 10.min(min_class);
    if k_val < 2 {
        // Too small to carve; train and validate on the pool.
        return Ok((pool.to_vec(), pool.to_vec()));
    }
    let sub_folds = stratified_kfold(&pool_labels, k_val, seed)?;
    let val: Vec<usize> = sub_folds[0].iter().map(|&i| pool[i]).collect();
    let train: Vec<usize> =
        pool.iter().copied().filter(|i| !val.contains(i)).collect();
    Ok((train, val))
}

/// Stratified k-fold cross-validation: each fold trains the model on the
/// remaining samples (with an internal early-stop split) and scores the
/// held-out fold. Folds run in parallel; metrics are reduced in fold
/// order.
pub fn run_cv<X: Sync>(
    xs: &[X],
    ys: &[usize],
    n_classes: usize,
    k: usize,
    seed: u64,
    model: &dyn FoldModel<X>,
) -> Result<CvResult, EvalError> {
    let folds = stratified_kfold(ys, k, sub_seed(seed, "folds"))?;
    let metrics: Result<Vec<FoldMetrics>, EvalError> = folds
        .par_iter()
        .enumerate()
        .map(|(fold_no, test)| {
            let pool: Vec<usize> = (0..ys.len()).filter(|i| !test.contains(i)).collect();
            let (train, val) =
                carve_validation(&pool, ys, sub_seed(seed, &format!("fold{fold_no}/val")))?;
            let probs = model
                .fit_predict(
                    xs,
                    ys,
                    &train,
                    &val,
                    test,
                    sub_seed(seed, &format!("fold{fold_no}/train")),
                )
                .map_err(EvalError::Model)?;
            if probs.len() != test.len() {
                return Err(EvalError::Model(format!(
                    "model returned {} rows for {} test samples",
                    probs.len(),
                    test.len()
                )));
            }

            let mut confusion = vec![0usize; n_classes * n_classes];
            let mut correct = 0usize;
            for (row, &i) in probs.iter().zip(test.iter()) {
                let predicted = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                confusion[ys[i] * n_classes + predicted] += 1;
                if predicted == ys[i] {
                    correct += 1;
                }
            }
            let mut class_roc = Vec::with_capacity(n_classes);
            for class in 0..n_classes {
                let scores: Vec<f64> = probs.iter().map(|row| row[class]).collect();
                let labels: Vec<bool> = test.iter().map(|&i| ys[i] == class).collect();
                let (curve, auc) = roc_auc(&scores, &labels)?;
                class_roc.push(ClassRoc { class_index: class, curve, auc });
            }
            Ok(FoldMetrics {
                fold: fold_no,
                test_size: test.len(),
                accuracy: correct as f64 / test.len() as f64,
                confusion,
                class_roc,
            })
        })
        .collect();
    let metrics = metrics?;
    let summary = summarize(&metrics, n_classes);
    Ok(CvResult { folds: metrics, summary })
}

/// Permute the full label vector once with the run's permutation
/// sub-seed, then run the identical cross-validation. Returns the metrics
/// and the permuted labels.
pub fn permutation_control<X: Sync>(
    xs: &[X],
    ys: &[usize],
    n_classes: usize,
    k: usize,
    seed: u64,
    model: &dyn FoldModel<X>,
) -> Result<(CvResult, Vec<usize>), EvalError> {
    let mut permuted = ys.to_vec();
    let mut rng = rng_for(seed, "permutation");
    permuted.shuffle(&mut rng);
    let result = run_cv(xs, &permuted, n_classes, k, seed, model)?;
    Ok((result, permuted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn paper_scale_class_sizes_split_evenly() {
        // 215 / 239 / 153 into 10 folds.
        let mut labels = Vec::new();
        labels.extend(std::iter::repeat(0usize).take(215));
        labels.extend(std::iter::repeat(1usize).take(239));
        labels.extend(std::iter::repeat(2usize).take(153));
        let folds = stratified_kfold(&labels, 10, 1).unwrap();
        for fold in &folds {
            let count = |c: usize| fold.iter().filter(|&&i| labels[i] == c).count();
            assert!([21, 22].contains(&count(0)), "{}", count(0));
            assert!([23, 24].contains(&count(1)), "{}", count(1));
            assert!([15, 16].contains(&count(2)), "{}", count(2));
        }
    }

    #[test]
    fn k_equals_one_is_a_single_fold() {
        let labels = vec![0, 1, 0, 1, 1];
        let folds = stratified_kfold(&labels, 1, 3).unwrap();
        assert_eq!(folds.len(), 1);
        assert_eq!(folds[0], vec![0, 1, 2, 3, 4]);
    }

    // Oracle: set algebra. Folds partition the samples for any labels/seed.
    #[test]
    fn folds_partition_the_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = rng.gen_range(30..120);
            let n_classes = rng.gen_range(2..4usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            let k = rng.gen_range(2..6usize);
            let min_class =
                (0..n_classes).map(|c| labels.iter().filter(|&&l| l == c).count()).min().unwrap();
            let result = stratified_kfold(&labels, k, trial);
            if min_class < k {
                assert!(matches!(result, Err(EvalError::ClassTooSmall { .. })));
                continue;
            }
            let folds = result.unwrap();
            let mut seen = vec![false; n];
            for fold in &folds {
                for &i in fold {
                    assert!(!seen[i], "index {i} appears twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
            // Per-class fold sizes differ by at most one.
            for c in 0..n_classes {
                let sizes: Vec<usize> = folds
                    .iter()
                    .map(|f| f.iter().filter(|&&i| labels[i] == c).count())
                    .collect();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                assert!(hi - lo <= 1, "class {c}: {sizes:?}");
            }
        }
    }

    #[test]
    fn kfold_is_deterministic_per_seed() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        assert_eq!(
            stratified_kfold(&labels, 5, 9).unwrap(),
            stratified_kfold(&labels, 5, 9).unwrap()
        );
        assert_ne!(
            stratified_kfold(&labels, 5, 9).unwrap(),
            stratified_kfold(&labels, 5, 10).unwrap()
        );
    }

    /// Stub that peeks at the true test labels: the perfect classifier.
    struct PerfectOracle(usize);
    impl FoldModel<f64> for PerfectOracle {
        fn fit_predict(
            &self,
            _xs: &[f64],
            ys: &[usize],
            _train: &[usize],
            _val: &[usize],
            test: &[usize],
            _seed: u64,
        ) -> Result<Vec<Vec<f64>>, String> {
            Ok(test
                .iter()
                .map(|&i| {
                    let mut row = vec![0.0; self.0];
                    row[ys[i]] = 1.0;
                    row
                })
                .collect())
        }
    }

    /// Stub that predicts class 0 with probability 0.9 regardless of input.
    struct ConstantModel(usize);
    impl FoldModel<f64> for ConstantModel {
        fn fit_predict(
            &self,
            _xs: &[f64],
            _ys: &[usize],
            _train: &[usize],
            _val: &[usize],
            test: &[usize],
            _seed: u64,
        ) -> Result<Vec<Vec<f64>>, String> {
            let mut row = vec![0.1 / (self.0 - 1) as f64; self.0];
            row[0] = 0.9;
            Ok(vec![row; test.len()])
        }
    }

    #[test]
    fn perfect_oracle_scores_one() {
        let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let model = PerfectOracle(2);
        let result = run_cv(&xs, &ys, 2, 4, 7, &model).unwrap();
        assert_eq!(result.folds.len(), 4);
        for fold in &result.folds {
            assert_eq!(fold.accuracy, 1.0);
            for roc in &fold.class_roc {
                assert_eq!(roc.auc, 1.0);
            }
        }
        assert_eq!(result.summary.mean_accuracy, 1.0);
        assert_eq!(result.summary.ci_low, result.summary.ci_high);
    }

    #[test]
    fn constant_model_is_at_chance_on_balanced_data() {
        let ys: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let xs: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let result = run_cv(&xs, &ys, 2, 5, 3, &ConstantModel(2)).unwrap();
        for fold in &result.folds {
            assert!((fold.accuracy - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn confusion_rows_sum_to_fold_test_size() {
        let ys: Vec<usize> = (0..45).map(|i| i % 3).collect();
        let xs: Vec<f64> = (0..45).map(|i| i as f64).collect();
        let result = run_cv(&xs, &ys, 3, 5, 11, &PerfectOracle(3)).unwrap();
        for fold in &result.folds {
            let total: usize = fold.confusion.iter().sum();
            assert_eq!(total, fold.test_size);
        }
    }

    #[test]
    fn permutation_preserves_label_marginals() {
        let ys: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let (_, permuted) = permutation_control(&xs, &ys, 3, 3, 5, &ConstantModel(3)).unwrap();
        let count = |labels: &[usize], c: usize| labels.iter().filter(|&&l| l == c).count();
        for c in 0..3 {
            assert_eq!(count(&ys, c), count(&permuted, c));
        }
        assert_ne!(permuted, ys, "seeded shuffle should move labels");
        // Same seed, same permutation.
        let (_, again) = permutation_control(&xs, &ys, 3, 3, 5, &ConstantModel(3)).unwrap();
        assert_eq!(permuted, again);
    }

    /// Nearest class centroid on a scalar feature: a real (if crude)
    /// learner. On intact labels it classifies the toy data perfectly; on
    /// permuted labels it can only hit chance.
    struct CentroidModel(usize);
    impl FoldModel<f64> for CentroidModel {
        fn fit_predict(
            &self,
            xs: &[f64],
            ys: &[usize],
            train: &[usize],
            _val: &[usize],
            test: &[usize],
            _seed: u64,
        ) -> Result<Vec<Vec<f64>>, String> {
            let mut sums = vec![0.0; self.0];
            let mut counts = vec![0usize; self.0];
            for &i in train {
                sums[ys[i]] += xs[i];
                counts[ys[i]] += 1;
            }
            let centroids: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::INFINITY })
                .collect();
            Ok(test
                .iter()
                .map(|&i| {
                    let class = centroids
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (a.1 - xs[i]).abs().total_cmp(&(b.1 - xs[i]).abs()))
                        .unwrap()
                        .0;
                    let mut row = vec![0.05; self.0];
                    row[class] = 0.9;
                    row
                })
                .collect())
        }
    }

    #[test]
    fn permuted_labels_hold_learners_at_chance() {
        // Three balanced classes with a perfectly learnable feature.
        let ys: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let xs: Vec<f64> = ys.iter().map(|&c| c as f64 * 10.0).collect();
        let intact = run_cv(&xs, &ys, 3, 3, 0, &CentroidModel(3)).unwrap();
        assert_eq!(intact.summary.mean_accuracy, 1.0);
        let mut means = Vec::new();
        for seed in 0..8 {
            let (result, permuted) =
                permutation_control(&xs, &ys, 3, 3, seed, &CentroidModel(3)).unwrap();
            assert_ne!(permuted, ys, "seed {seed}: permutation left labels intact");
            means.push(result.summary.mean_accuracy);
        }
        let grand_mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!(
            (0.2..=0.5).contains(&grand_mean),
            "permuted-label accuracy {grand_mean} outside chance band: {means:?}"
        );
    }
}
