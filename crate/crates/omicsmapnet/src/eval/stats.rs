//! Statistical primitives: one-vs-rest ROC/AUC, the two-sample rank-sum
//! test (exact by enumeration for small samples, normal approximation with
//! tie and continuity corrections otherwise), and hypergeometric
//! enrichment with Holm step-down correction.

use super::EvalError;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeSet;

/// Midranks (1-based, ties averaged) of the values.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// ROC curve points (fpr, tpr) from thresholds at distinct scores, plus
/// the AUC as the fraction of (positive, negative) pairs ranked correctly
/// with ties counting one half. The two agree with the trapezoidal area
/// under the curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64), EvalError> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClassOnly);
    }

    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;

    // Sweep thresholds from high to low, emitting a point per distinct score.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok((curve, auc))
}

/// Trapezoidal area under a (fpr, tpr) polyline.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Count combinations of `choose` ranks with sum below / equal to / above
/// `target`, over all subsets of the rank list.
fn enumerate_rank_sums(
    ranks: &[f64],
    choose: usize,
    target: f64,
    start: usize,
    sum: f64,
    counts: &mut (u64, u64, u64),
) {
    if choose == 0 {
        if sum < target - 1e-9 {
            counts.0 += 1;
        } else if sum > target + 1e-9 {
            counts.2 += 1;
        } else {
            counts.1 += 1;
        }
        return;
    }
    // Not enough items left.
    if ranks.len() - start < choose {
        return;
    }
    enumerate_rank_sums(ranks, choose - 1, target, start + 1, sum + ranks[start], counts);
    enumerate_rank_sums(ranks, choose, target, start + 1, sum, counts);
}

const EXACT_LIMIT: usize = 24;

/// Two-sided Mann-Whitney rank-sum p-value. Exact null distribution by
/// enumerating all C(n+m, n) rank splits when n+m <= 24; otherwise the
/// normal approximation with tie and continuity corrections.
pub fn ranksum_test(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "both samples must be nonempty");
    let combined: Vec<f64> = a.iter().chain(b).cloned().collect();
    let ranks = midranks(&combined);
    let w: f64 = ranks[..a.len()].iter().sum();
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;

    if a.len() + b.len() <= EXACT_LIMIT {
        let mut counts = (0u64, 0u64, 0u64);
        enumerate_rank_sums(&ranks, a.len(), w, 0, 0.0, &mut counts);
        let total = (counts.0 + counts.1 + counts.2) as f64;
        let p_le = (counts.0 + counts.1) as f64 / total;
        let p_ge = (counts.1 + counts.2) as f64 / total;
        return (2.0 * p_le.min(p_ge)).min(1.0);
    }

    // Tie correction: sum of t^3 - t over tied groups.
    let mut sorted = combined.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let mean = n1 * (n + 1.0) / 2.0;
    let variance = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / variance.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// P[X >= k] for X ~ Hypergeometric(N, K, n): draw n from a population of
/// N with K marked.
pub fn hypergeom_sf(k: u64, population: u64, marked: u64, drawn: u64) -> f64 {
    let lo = drawn.saturating_sub(population - marked);
    if k <= lo {
        return 1.0;
    }
    let hi = marked.min(drawn);
    if k > hi {
        return 0.0;
    }
    let ln_total = ln_choose(population, drawn);
    let mut p = 0.0;
    for i in k..=hi {
        p += (ln_choose(marked, i) + ln_choose(population - marked, drawn - i) - ln_total).exp();
    }
    p.min(1.0)
}

/// Enrichment of one gene group in the selection.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrichmentRow {
    pub label: String,
    pub overlap: u64,
    pub group_size: u64,
    pub selected_size: u64,
    pub background_size: u64,
    pub p_raw: f64,
    pub p_corrected: f64,
}

/// Hypergeometric over-representation of `selected` in each group, with
/// Holm step-down correction across the groups. Rows come back ordered by
/// raw p-value ascending (label ascending on ties).
pub fn enrich_hypergeom(
    selected: &BTreeSet<String>,
    background: &BTreeSet<String>,
    groups: &[(String, BTreeSet<String>)],
) -> Result<Vec<EnrichmentRow>, EvalError> {
    if let Some(missing) = selected.iter().find(|s| !background.contains(*s)) {
        return Err(EvalError::SelectionNotInBackground(missing.clone()));
    }
    for (label, members) in groups {
        if members.iter().any(|m| !background.contains(m)) {
            return Err(EvalError::GroupNotInBackground(label.clone()));
        }
    }
    let population = background.len() as u64;
    let drawn = selected.len() as u64;
    let mut rows: Vec<EnrichmentRow> = groups
        .iter()
        .map(|(label, members)| {
            let marked = members.len() as u64;
            let overlap = members.intersection(selected).count() as u64;
            EnrichmentRow {
                label: label.clone(),
                overlap,
                group_size: marked,
                selected_size: drawn,
                background_size: population,
                p_raw: hypergeom_sf(overlap, population, marked, drawn),
                p_corrected: f64::NAN,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.p_raw.total_cmp(&b.p_raw).then_with(|| a.label.cmp(&b.label)));
    let m = rows.len();
    let mut running_max = 0.0f64;
    for (i, row) in rows.iter_mut().enumerate() {
        let adjusted = ((m - i) as f64 * row.p_raw).min(1.0);
        running_max = running_max.max(adjusted);
        row.p_corrected = running_max;
    }
    Ok(rows)
}
