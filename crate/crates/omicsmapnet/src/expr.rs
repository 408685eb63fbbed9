//! Count matrices and their normalization: TSV loading, trimmed-mean-of-M
//! scaling factors with log2-CPM values, low-expression filtering, gene-id
//! mapping, and seeded synthetic datasets for desk-scale runs.

use crate::hierarchy::HierarchyTree;
use crate::util::atomic_write;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("matrix has no genes or no samples")]
    EmptyMatrix,
    #[error("sample {0:?} has zero library size")]
    DegenerateLibrary(String),
    #[error("normalization needs at least 2 samples")]
    TooFewSamples,
    #[error("planted category {0:?} not in tree")]
    UnknownCategory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw counts, genes x samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountMatrix {
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub counts: Vec<u64>,
}

impl CountMatrix {
    pub fn get(&self, gene: usize, sample: usize) -> u64 {
        self.counts[gene * self.sample_ids.len() + sample]
    }

    pub fn library_sizes(&self) -> Vec<u64> {
        let n = self.sample_ids.len();
        let mut libs = vec![0u64; n];
        for (i, &c) in self.counts.iter().enumerate() {
            libs[i % n] += c;
        }
        libs
    }
}

/// Log2 normalized abundances plus the per-sample scaling factors that
/// produced them. Factors are re-centered to geometric mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub values: Vec<f64>,
    pub norm_factors: Vec<f64>,
}

impl ExpressionMatrix {
    pub fn get(&self, gene: usize, sample: usize) -> f64 {
        self.values[gene * self.sample_ids.len() + sample]
    }

    pub fn row(&self, gene: usize) -> &[f64] {
        let n = self.sample_ids.len();
        &self.values[gene * n..(gene + 1) * n]
    }

    pub fn sample_column(&self, sample: usize) -> Vec<f64> {
        (0..self.gene_ids.len()).map(|g| self.get(g, sample)).collect()
    }

    /// Per-gene lookup of one sample's values.
    pub fn sample_values(&self, sample: usize) -> HashMap<String, f64> {
        self.gene_ids
            .iter()
            .enumerate()
            .map(|(g, id)| (id.clone(), self.get(g, sample)))
            .collect()
    }
}

/// Sample-to-class assignments in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleLabels {
    pub sample_ids: Vec<String>,
    pub classes: Vec<String>,
}

impl SampleLabels {
    /// Distinct class labels, sorted.
    pub fn class_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.classes.iter().collect();
        set.into_iter().cloned().collect()
    }

    /// Class index per sample under the sorted class-name order.
    pub fn class_indices(&self) -> (Vec<String>, Vec<usize>) {
        let names = self.class_names();
        let lookup: HashMap<&String, usize> =
            names.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let idx = self.classes.iter().map(|c| lookup[c]).collect();
        (names, idx)
    }

    pub fn class_of(&self, sample_id: &str) -> Option<&str> {
        self.sample_ids
            .iter()
            .position(|s| s == sample_id)
            .map(|i| self.classes[i].as_str())
    }
}

pub fn load_counts(path: &Path) -> Result<CountMatrix, ExprError> {
    parse_counts(&std::fs::read_to_string(path)?)
}

pub fn parse_counts(text: &str) -> Result<CountMatrix, ExprError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(ExprError::EmptyMatrix)?;
    let mut cols = header.split('\t');
    cols.next(); // corner cell
    let sample_ids: Vec<String> = cols.map(str::to_string).collect();
    let mut seen = HashSet::new();
    for id in &sample_ids {
        if !seen.insert(id) {
            return Err(ExprError::DuplicateSample(id.clone()));
        }
    }
    let mut gene_ids = Vec::new();
    let mut counts = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        gene_ids.push(cells.next().unwrap().to_string());
        let mut n = 0usize;
        for cell in cells {
            let v: u64 = cell.parse().map_err(|_| ExprError::Parse {
                line: idx + 1,
                msg: format!("expected a non-negative integer, got {cell:?}"),
            })?;
            counts.push(v);
            n += 1;
        }
        if n != sample_ids.len() {
            return Err(ExprError::Parse {
                line: idx + 1,
                msg: format!("expected {} cells, got {n}", sample_ids.len()),
            });
        }
    }
    if gene_ids.is_empty() || sample_ids.is_empty() {
        return Err(ExprError::EmptyMatrix);
    }
    Ok(CountMatrix { gene_ids, sample_ids, counts })
}

pub fn write_counts(matrix: &CountMatrix, path: &Path) -> Result<(), ExprError> {
    let mut out = String::from("gene_id");
    for s in &matrix.sample_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for (g, id) in matrix.gene_ids.iter().enumerate() {
        out.push_str(id);
        for s in 0..matrix.sample_ids.len() {
            out.push('\t');
            out.push_str(&matrix.get(g, s).to_string());
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<SampleLabels, ExprError> {
    let text = std::fs::read_to_string(path)?;
    let mut sample_ids = Vec::new();
    let mut classes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (sample, class) = line.split_once('\t').ok_or_else(|| ExprError::Parse {
            line: idx + 1,
            msg: "expected sample_id<TAB>class".to_string(),
        })?;
        sample_ids.push(sample.to_string());
        classes.push(class.to_string());
    }
    Ok(SampleLabels { sample_ids, classes })
}

pub fn write_labels(labels: &SampleLabels, path: &Path) -> Result<(), ExprError> {
    let mut out = String::new();
    for (s, c) in labels.sample_ids.iter().zip(&labels.classes) {
        out.push_str(&format!("{s}\t{c}\n"));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// `gene_id<TAB>kegg_id` rows; later rows win on duplicate gene ids.
pub fn load_mapping(path: &Path) -> Result<HashMap<String, String>, ExprError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (gene, kegg) = line.split_once('\t').ok_or_else(|| ExprError::Parse {
            line: idx + 1,
            msg: "expected gene_id<TAB>kegg_id".to_string(),
        })?;
        map.insert(gene.to_string(), kegg.to_string());
    }
    Ok(map)
}

pub fn load_expression(path: &Path) -> Result<ExpressionMatrix, ExprError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(ExprError::EmptyMatrix)?;
    let mut cols = header.split('\t');
    cols.next();
    let sample_ids: Vec<String> = cols.map(str::to_string).collect();
    let mut gene_ids = Vec::new();
    let mut values = Vec::new();
    let mut norm_factors = vec![1.0; sample_ids.len()];
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let id = cells.next().unwrap().to_string();
        let row: Result<Vec<f64>, _> = cells.map(str::parse::<f64>).collect();
        let row = row.map_err(|e| ExprError::Parse { line: idx + 1, msg: e.to_string() })?;
        if id == "#factors" {
            norm_factors = row;
            continue;
        }
        if row.len() != sample_ids.len() {
            return Err(ExprError::Parse {
                line: idx + 1,
                msg: format!("expected {} cells, got {}", sample_ids.len(), row.len()),
            });
        }
        gene_ids.push(id);
        values.extend(row);
    }
    if gene_ids.is_empty() || sample_ids.is_empty() {
        return Err(ExprError::EmptyMatrix);
    }
    Ok(ExpressionMatrix { gene_ids, sample_ids, values, norm_factors })
}

/// The `#factors` pseudo-row keeps the per-sample scaling factors with the
/// values so downstream stages need a single file.
pub fn write_expression(expr: &ExpressionMatrix, path: &Path) -> Result<(), ExprError> {
    let mut out = String::from("gene_id");
    for s in &expr.sample_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    out.push_str("#factors");
    for f in &expr.norm_factors {
        out.push_str(&format!("\t{f}"));
    }
    out.push('\n');
    for (g, id) in expr.gene_ids.iter().enumerate() {
        out.push_str(id);
        for s in 0..expr.sample_ids.len() {
            out.push_str(&format!("\t{}", expr.get(g, s)));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Type-7 quantile (R default): linear interpolation between order
/// statistics.
fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Keep the middle ranks after dropping `floor(n * trim)` entries per side.
/// Ties are broken by the original index so the result never depends on
/// sort stability.
fn double_trim_keep(values: &[(usize, f64)], trim: f64) -> HashSet<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].1.total_cmp(&values[b].1).then(values[a].0.cmp(&values[b].0)));
    let drop = (values.len() as f64 * trim).floor() as usize;
    order[drop..values.len() - drop].iter().map(|&i| values[i].0).collect()
}

const M_TRIM: f64 = 0.30;
const A_TRIM: f64 = 0.05;

fn tmm_factor(counts: &CountMatrix, libs: &[f64], sample: usize, reference: usize) -> f64 {
    let n_samples = counts.sample_ids.len();
    let mut m_values: Vec<(usize, f64)> = Vec::new();
    let mut a_values: Vec<(usize, f64)> = Vec::new();
    for g in 0..counts.gene_ids.len() {
        let ys = counts.counts[g * n_samples + sample] as f64;
        let yr = counts.counts[g * n_samples + reference] as f64;
        if ys == 0.0 || yr == 0.0 {
            continue;
        }
        let fs = ys / libs[sample];
        let fr = yr / libs[reference];
        m_values.push((g, (fs / fr).log2()));
        a_values.push((g, 0.5 * (fs * fr).log2()));
    }
    if m_values.is_empty() {
        return 1.0;
    }
    let keep_m = double_trim_keep(&m_values, M_TRIM);
    let keep_a = double_trim_keep(&a_values, A_TRIM);
    let mut num = 0.0;
    let mut den = 0.0;
    for &(g, m) in &m_values {
        if !keep_m.contains(&g) || !keep_a.contains(&g) {
            continue;
        }
        let ys = counts.counts[g * n_samples + sample] as f64;
        let yr = counts.counts[g * n_samples + reference] as f64;
        // Inverse asymptotic variance of M under binomial sampling.
        let w = 1.0 / ((libs[sample] - ys) / (libs[sample] * ys)
            + (libs[reference] - yr) / (libs[reference] * yr));
        num += w * m;
        den += w;
    }
    if den == 0.0 {
        1.0
    } else {
        (num / den).exp2()
    }
}

/// Trimmed-mean-of-M normalization. The reference sample is the one whose
/// upper-quartile count fraction is closest to the mean of those fractions;
/// factors are re-centered to geometric mean 1 and values become
/// `log2(count * 1e6 / (library_size * factor) + 0.5)`.
pub fn tmm_normalize(counts: &CountMatrix) -> Result<ExpressionMatrix, ExprError> {
    let n_samples = counts.sample_ids.len();
    if n_samples < 2 {
        return Err(ExprError::TooFewSamples);
    }
    let libs: Vec<f64> = counts.library_sizes().iter().map(|&l| l as f64).collect();
    for (s, &lib) in libs.iter().enumerate() {
        if lib <= 0.0 {
            return Err(ExprError::DegenerateLibrary(counts.sample_ids[s].clone()));
        }
    }

    let f75: Vec<f64> = (0..n_samples)
        .map(|s| {
            let fractions: Vec<f64> =
                (0..counts.gene_ids.len()).map(|g| counts.get(g, s) as f64 / libs[s]).collect();
            quantile(&fractions, 0.75)
        })
        .collect();
    let mean_f75 = f75.iter().sum::<f64>() / n_samples as f64;
    let reference = (0..n_samples)
        .min_by(|&a, &b| (f75[a] - mean_f75).abs().total_cmp(&(f75[b] - mean_f75).abs()))
        .unwrap();

    let mut factors: Vec<f64> =
        (0..n_samples).map(|s| tmm_factor(counts, &libs, s, reference)).collect();
    let log_mean = factors.iter().map(|f| f.ln()).sum::<f64>() / n_samples as f64;
    let geo_mean = log_mean.exp();
    for f in &mut factors {
        *f /= geo_mean;
    }

    let mut values = Vec::with_capacity(counts.counts.len());
    for g in 0..counts.gene_ids.len() {
        for s in 0..n_samples {
            let cpm = counts.get(g, s) as f64 * 1e6 / (libs[s] * factors[s]);
            values.push((cpm + 0.5).log2());
        }
    }
    Ok(ExpressionMatrix {
        gene_ids: counts.gene_ids.clone(),
        sample_ids: counts.sample_ids.clone(),
        values,
        norm_factors: factors,
    })
}

/// Keep a gene iff its maximum over samples exceeds `threshold`.
pub fn filter_low_expression(expr: &ExpressionMatrix, threshold: f64) -> ExpressionMatrix {
    let n = expr.sample_ids.len();
    let mut gene_ids = Vec::new();
    let mut values = Vec::new();
    for (g, id) in expr.gene_ids.iter().enumerate() {
        let row = expr.row(g);
        if row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > threshold {
            gene_ids.push(id.clone());
            values.extend_from_slice(&row[..n]);
        }
    }
    ExpressionMatrix {
        gene_ids,
        sample_ids: expr.sample_ids.clone(),
        values,
        norm_factors: expr.norm_factors.clone(),
    }
}

/// Re-key rows by mapped id. When several genes map to one id the row with
/// the highest mean wins, ties going to the lexicographically smaller
/// source gene. Unmapped genes are dropped; output keeps first-appearance
/// order of the mapped ids.
pub fn map_to_kegg(
    expr: &ExpressionMatrix,
    mapping: &HashMap<String, String>,
) -> ExpressionMatrix {
    let n = expr.sample_ids.len();
    // kegg id -> (winning gene row, mean, source gene id)
    let mut winners: HashMap<&str, (usize, f64, &str)> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (g, gene_id) in expr.gene_ids.iter().enumerate() {
        let Some(kegg) = mapping.get(gene_id) else { continue };
        let mean = expr.row(g).iter().sum::<f64>() / n as f64;
        match winners.get_mut(kegg.as_str()) {
            None => {
                winners.insert(kegg, (g, mean, gene_id));
                order.push(kegg);
            }
            Some(entry) => {
                if mean > entry.1 || (mean == entry.1 && gene_id.as_str() < entry.2) {
                    *entry = (g, mean, gene_id);
                }
            }
        }
    }
    let mut gene_ids = Vec::with_capacity(order.len());
    let mut values = Vec::with_capacity(order.len() * n);
    for kegg in order {
        let (g, _, _) = winners[kegg];
        gene_ids.push(kegg.to_string());
        values.extend_from_slice(expr.row(g));
    }
    ExpressionMatrix {
        gene_ids,
        sample_ids: expr.sample_ids.clone(),
        values,
        norm_factors: expr.norm_factors.clone(),
    }
}

/// Find the gene ids under each named category (level-3 label or full
/// slash-joined path).
fn planted_gene_ids(
    tree: &HierarchyTree,
    category: &str,
) -> Result<BTreeSet<String>, ExprError> {
    let mut out = BTreeSet::new();
    let mut matched = false;
    for (path, node) in tree.nodes_at_level(3) {
        if node.label == category || path.join("/") == category {
            matched = true;
            out.extend(node.gene_leaves.iter().map(|l| l.kegg_id.clone()));
        }
    }
    if !matched {
        return Err(ExprError::UnknownCategory(category.to_string()));
    }
    Ok(out)
}

/// Draw a labeled synthetic count matrix over the tree's genes. Counts are
/// `round(2^(base + shift + noise))` with per-gene base ~ U[2,10] log2
/// units and noise ~ N(0, 0.5); genes under a class's planted categories
/// get `effect` extra log2 units in that class. Deterministic per seed.
pub fn generate_synthetic(
    n_samples: usize,
    classes: &[String],
    tree: &HierarchyTree,
    planted: &BTreeMap<String, Vec<String>>,
    effect: f64,
    seed: u64,
) -> Result<(CountMatrix, SampleLabels, BTreeSet<String>), ExprError> {
    use rand::SeedableRng;
    let gene_ids = tree.gene_ids();
    let mut planted_by_class: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut planted_union = BTreeSet::new();
    for (class, categories) in planted {
        let mut ids = BTreeSet::new();
        for category in categories {
            ids.extend(planted_gene_ids(tree, category)?);
        }
        planted_union.extend(ids.iter().cloned());
        planted_by_class.insert(class.as_str(), ids);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let bases: Vec<f64> = (0..gene_ids.len()).map(|_| rng.gen_range(2.0..10.0)).collect();

    let sample_ids: Vec<String> = (1..=n_samples).map(|i| format!("S{i:04}")).collect();
    let sample_classes: Vec<String> =
        (0..n_samples).map(|i| classes[i % classes.len()].clone()).collect();

    let empty = BTreeSet::new();
    let mut counts = Vec::with_capacity(gene_ids.len() * n_samples);
    for (g, gene) in gene_ids.iter().enumerate() {
        for class in &sample_classes {
            let planted_here = planted_by_class.get(class.as_str()).unwrap_or(&empty);
            let shift = if planted_here.contains(gene) { effect } else { 0.0 };
            let log2_count = bases[g] + shift + noise.sample(&mut rng);
            counts.push(log2_count.exp2().round().max(0.0) as u64);
        }
    }
    Ok((
        CountMatrix { gene_ids, sample_ids: sample_ids.clone(), counts },
        SampleLabels { sample_ids, classes: sample_classes },
        planted_union,
    ))
}
