//! L2-regularized logistic regression baseline. Minimizes
//! `C * sum log(1 + exp(-y (x.w + c))) + 0.5 w.w` by gradient descent
//! with Armijo backtracking to gradient norm < 1e-6; the C value is chosen
//! from a grid by internal stratified 10-fold AUC.

use super::stats::roc_auc;
use super::EvalError;

/// log(1 + exp(t)) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// sigmoid(t) = 1 / (1 + exp(-t)).
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub struct LogRegFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Accepted line-search costs, non-increasing by construction.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
}

/// Cost of Eq-style objective at (w, c).
pub fn logreg_cost(x: &[Vec<f64>], y: &[f64], w: &[f64], c: f64, cap: f64) -> f64 {
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let f: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + c;
            softplus(-yi * f)
        })
        .sum();
    cap * data + 0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of the cost w.r.t. (w, c).
pub fn logreg_gradient(x: &[Vec<f64>], y: &[f64], w: &[f64], c: f64, cap: f64) -> (Vec<f64>, f64) {
    let mut gw = w.to_vec();
    let mut gc = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let f: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + c;
        let s = cap * -yi * sigmoid(-yi * f);
        for (g, &v) in gw.iter_mut().zip(xi) {
            *g += s * v;
        }
        gc += s;
    }
    (gw, gc)
}

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 50_000;

/// Fit at a fixed C by steepest descent with backtracking line search.
pub fn logreg_fit(x: &[Vec<f64>], y: &[f64], cap: f64) -> LogRegFit {
    let d = x.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    let mut c = 0.0;
    let mut cost = logreg_cost(x, y, &w, c, cap);
    let mut trace = vec![cost];
    let mut step: f64 = 1.0;
    let mut converged = false;
    for _ in 0..MAX_ITERS {
        let (gw, gc) = logreg_gradient(x, y, &w, c, cap);
        let g2: f64 = gw.iter().map(|v| v * v).sum::<f64>() + gc * gc;
        if g2.sqrt() < GRAD_TOL {
            converged = true;
            break;
        }
        // Armijo backtracking from an adaptive initial step.
        step = (step * 2.0).min(1e6);
        loop {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let c_new = c - step * gc;
            let cost_new = logreg_cost(x, y, &w_new, c_new, cap);
            if cost_new <= cost - 1e-4 * step * g2 {
                w = w_new;
                c = c_new;
                cost = cost_new;
                trace.push(cost);
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                // No descent at machine precision.
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
    }
    LogRegFit { weights: w, intercept: c, cost_trace: trace, converged }
}

#[derive(Clone, Debug)]
pub struct LogRegCvResult {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub chosen_c: f64,
    /// Held-out AUC per internal fold at the chosen C.
    pub fold_aucs: Vec<f64>,
}

/// Deterministic stratified folds by index order (no shuffling).
fn stratified_folds_by_order(y: &[f64], k: usize) -> Vec<Vec<usize>> {
    let mut folds = vec![Vec::new(); k];
    for sign in [1.0, -1.0] {
        for (slot, idx) in (0..y.len()).filter(|&i| y[i] == sign).enumerate() {
            folds[slot % k].push(idx);
        }
    }
    folds
}

/// Select C from the grid by internal 10-fold CV AUC (ties to the smaller
/// C), then refit on all data.
pub fn logreg_cv(
    x: &[Vec<f64>],
    y: &[f64],
    c_grid: &[f64],
) -> Result<LogRegCvResult, EvalError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(EvalError::BadBinaryLabels("empty or mismatched inputs".into()));
    }
    for row in x {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFiniteFeature);
        }
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(EvalError::BadBinaryLabels("labels must be -1 or +1".into()));
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    let n_neg = y.len() - n_pos;
    let k = 10.min(n_pos).min(n_neg);
    if k < 2 {
        return Err(EvalError::ClassTooSmall {
            class: (if n_pos < n_neg { "+1" } else { "-1" }).into(),
            size: n_pos.min(n_neg),
            k: 2,
        });
    }
    let folds = stratified_folds_by_order(y, k);
    let mut grid: Vec<f64> = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);

    let mut best: Option<(f64, f64, Vec<f64>)> = None; // (mean auc, C, fold aucs)
    for &cap in &grid {
        let mut aucs = Vec::with_capacity(k);
        for fold in &folds {
            let test: &Vec<usize> = fold;
            let train: Vec<usize> = (0..y.len()).filter(|i| !test.contains(i)).collect();
            let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fit = logreg_fit(&xt, &yt, cap);
            let scores: Vec<f64> = test
                .iter()
                .map(|&i| {
                    x[i].iter().zip(&fit.weights).map(|(a, b)| a * b).sum::<f64>() + fit.intercept
                })
                .collect();
            let labels: Vec<bool> = test.iter().map(|&i| y[i] == 1.0).collect();
            let (_, auc) = roc_auc(&scores, &labels)?;
            aucs.push(auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        // Strict improvement keeps the smaller C on ties.
        if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
            best = Some((mean, cap, aucs));
        }
    }
    let (_, chosen_c, fold_aucs) = best.expect("grid is nonempty");
    let fit = logreg_fit(x, y, chosen_c);
    Ok(LogRegCvResult { weights: fit.weights, intercept: fit.intercept, chosen_c, fold_aucs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn separable_1d_reaches_full_accuracy() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { i as f64 / 10.0 } else { 1.5 + (i - 10) as f64 / 10.0 }])
            .collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { -1.0 } else { 1.0 }).collect();
        let fit = logreg_fit(&x, &y, 1000.0);
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| {
                let f = xi[0] * fit.weights[0] + fit.intercept;
                (f > 0.0) == (yi > 0.0)
            })
            .count();
        assert_eq!(correct, 20);
    }

    // Oracle: central finite differences on the cost.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let d = 4;
        let x: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = 0.3;
        let cap = 2.5;
        let (gw, gc) = logreg_gradient(&x, &y, &w, c, cap);
        let h = 1e-6;
        for i in 0..d {
            let mut plus = w.clone();
            plus[i] += h;
            let mut minus = w.clone();
            minus[i] -= h;
            let fd =
                (logreg_cost(&x, &y, &plus, c, cap) - logreg_cost(&x, &y, &minus, c, cap)) / (2.0 * h);
            let rel = (fd - gw[i]).abs() / fd.abs().max(gw[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "w[{i}]: {fd} vs {}", gw[i]);
        }
        let fd = (logreg_cost(&x, &y, &w, c + h, cap) - logreg_cost(&x, &y, &w, c - h, cap))
            / (2.0 * h);
        assert!((fd - gc).abs() / fd.abs().max(gc.abs()).max(1e-8) < 1e-6);
    }

    #[test]
    fn zero_features_fit_class_prior() {
        // 3 positives, 1 negative: intercept should hit log(3).
        let x: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 4];
        let y = vec![1.0, 1.0, 1.0, -1.0];
        let fit = logreg_fit(&x, &y, 1.0);
        assert!(fit.weights.iter().all(|&w| w.abs() < 1e-6), "{:?}", fit.weights);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-4, "intercept {}", fit.intercept);
    }

    // Property: accepted line-search iterates never increase the cost.
    #[test]
    fn line_search_costs_are_non_increasing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> =
            (0..30).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let fit = logreg_fit(&x, &y, 5.0);
        for pair in fit.cost_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        assert!(fit.converged);
    }

    #[test]
    fn cv_selects_from_grid_and_reports_fold_aucs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let n = 60;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let signal = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![signal + rng.gen_range(-0.4..0.4), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let result = logreg_cv(&x, &y, &[0.01, 1.0, 100.0]).unwrap();
        assert_eq!(result.fold_aucs.len(), 10);
        assert!(result.fold_aucs.iter().all(|&a| a > 0.9), "{:?}", result.fold_aucs);
        assert!([0.01, 1.0, 100.0].contains(&result.chosen_c));
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let x = vec![vec![f64::NAN], vec![0.0]];
        let y = vec![1.0, -1.0];
        assert!(matches!(logreg_cv(&x, &y, &[1.0]).unwrap_err(), EvalError::NonFiniteFeature));
        let x2 = vec![vec![0.0], vec![1.0]];
        let y2 = vec![0.5, 1.0];
        assert!(matches!(
            logreg_cv(&x2, &y2, &[1.0]).unwrap_err(),
            EvalError::BadBinaryLabels(_)
        ));
    }
}
