//! Pipeline wiring behind the command-line front end: configuration
//! merging (defaults, then config file, then flags), workdir artifact
//! paths, and one function per subcommand. All randomness flows from the
//! single configured seed through named sub-seeds, and every artifact is
//! written atomically.

use crate::attribution::{self, AttributionError};
use crate::cnn::{self, CnnClassifier, CnnError, Tensor, TrainConfig};
use crate::eval::{self, EvalError};
use crate::expr::{self, ExprError, ExpressionMatrix, SampleLabels};
use crate::hierarchy::{self, HierarchyError, HierarchyTree, ParseOptions};
use crate::render::{self, RenderError};
use crate::treemap::{self, TreemapError, TreemapLayout};
use crate::util::{atomic_write, median, rng_for, sub_seed};
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("missing {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Treemap(#[from] TreemapError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Documented configuration keys; unknown keys in a config file are
/// rejected. Every field has a flag of the same name in kebab case.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub hierarchy: Option<PathBuf>,
    pub sub_dir: Option<PathBuf>,
    pub branch: Option<String>,
    pub counts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub layout_side: Option<f64>,
    pub render_divisor: Option<usize>,
    pub channels: Option<usize>,
    pub filter_threshold: Option<f64>,
    pub loose_ids: Option<bool>,
    pub png: Option<bool>,
    pub cv_k: Option<usize>,
    pub attribution_frac: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta_l2: Option<f64>,
    pub keep_prob: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub synth_samples: Option<usize>,
    pub synth_classes: Option<String>,
    pub synth_level1: Option<usize>,
    pub synth_level2: Option<usize>,
    pub synth_level3: Option<usize>,
    pub synth_genes_per_category: Option<usize>,
    pub synth_planted: Option<String>,
    pub synth_effect: Option<f64>,
    pub logreg_classes: Option<String>,
    pub logreg_c_grid: Option<String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::MissingInput {
            path: path.to_path_buf(),
            hint: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub hierarchy: Option<PathBuf>,
    pub sub_dir: Option<PathBuf>,
    pub branch: String,
    pub counts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub workdir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub layout_side: f64,
    pub render_divisor: usize,
    pub channels: usize,
    pub filter_threshold: f64,
    pub loose_ids: bool,
    pub png: bool,
    pub cv_k: usize,
    pub attribution_frac: f64,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub learning_rate: f64,
    pub beta_l2: f64,
    pub keep_prob: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub synth_samples: usize,
    pub synth_classes: String,
    pub synth_level1: usize,
    pub synth_level2: usize,
    pub synth_level3: usize,
    pub synth_genes_per_category: usize,
    pub synth_planted: String,
    pub synth_effect: f64,
    pub logreg_classes: String,
    pub logreg_c_grid: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hierarchy: None,
            sub_dir: None,
            branch: "Genes and Proteins".into(),
            counts: None,
            labels: None,
            mapping: None,
            workdir: PathBuf::from("omicsmap-work"),
            cache_dir: None,
            layout_side: 1024.0,
            render_divisor: 2,
            channels: 1,
            filter_threshold: -5.0,
            loose_ids: false,
            png: false,
            cv_k: 10,
            attribution_frac: 0.1,
            seed: 0,
            jobs: None,
            learning_rate: 0.001,
            beta_l2: 0.01,
            keep_prob: 0.75,
            batch_size: 29,
            max_epochs: 300,
            patience: 10,
            synth_samples: 200,
            synth_classes: "II,III,IV".into(),
            synth_level1: 4,
            synth_level2: 2,
            synth_level3: 5,
            synth_genes_per_category: 12,
            synth_planted: "II:G03;III:G11,G27;IV:G35".into(),
            synth_effect: 3.0,
            logreg_classes: "II,III".into(),
            logreg_c_grid: "0.001,0.01,0.1,1,10,100".into(),
        }
    }
}

impl PipelineConfig {
    /// Apply config-file values over the defaults.
    pub fn apply_file(&mut self, file: &ConfigFile) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &file.$field { self.$field = v.clone().into(); })*
            };
        }
        set!(branch, workdir, layout_side, render_divisor, channels, filter_threshold);
        set!(loose_ids, png, cv_k, attribution_frac, seed, learning_rate, beta_l2);
        set!(keep_prob, batch_size, max_epochs, patience, synth_samples, synth_classes);
        set!(synth_level1, synth_level2, synth_level3, synth_genes_per_category);
        set!(synth_planted, synth_effect, logreg_classes, logreg_c_grid);
        if file.hierarchy.is_some() {
            self.hierarchy = file.hierarchy.clone();
        }
        if file.sub_dir.is_some() {
            self.sub_dir = file.sub_dir.clone();
        }
        if file.counts.is_some() {
            self.counts = file.counts.clone();
        }
        if file.labels.is_some() {
            self.labels = file.labels.clone();
        }
        if file.mapping.is_some() {
            self.mapping = file.mapping.clone();
        }
        if file.cache_dir.is_some() {
            self.cache_dir = file.cache_dir.clone();
        }
        if file.jobs.is_some() {
            self.jobs = file.jobs;
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.layout_side <= 0.0 {
            return Err(PipelineError::Usage("layout-side must be positive".into()));
        }
        if self.render_divisor == 0
            || (self.layout_side.round() as usize) % self.render_divisor != 0
        {
            return Err(PipelineError::Usage(
                "render-divisor must divide the layout side".into(),
            ));
        }
        if self.cv_k < 2 {
            return Err(PipelineError::Usage("cv-k must be at least 2".into()));
        }
        if !(0.0 < self.keep_prob && self.keep_prob <= 1.0) {
            return Err(PipelineError::Usage("keep-prob must be in (0, 1]".into()));
        }
        if !(0.0 < self.attribution_frac && self.attribution_frac <= 1.0) {
            return Err(PipelineError::Usage("attribution-frac must be in (0, 1]".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(PipelineError::Usage("channels must be 1 or 3".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta_l2: self.beta_l2,
            keep_prob: self.keep_prob,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: 0,
            ..TrainConfig::default()
        }
    }

    // Workdir artifact paths.
    pub fn tree_path(&self) -> PathBuf {
        self.workdir.join("tree.json")
    }
    pub fn layout_json_path(&self) -> PathBuf {
        self.workdir.join("layout.json")
    }
    pub fn layout_tsv_path(&self) -> PathBuf {
        self.workdir.join("layout.tsv")
    }
    pub fn expr_path(&self) -> PathBuf {
        self.workdir.join("expr.tsv")
    }
    pub fn counts_path(&self) -> PathBuf {
        self.counts.clone().unwrap_or_else(|| self.workdir.join("counts.tsv"))
    }
    pub fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.workdir.join("labels.tsv"))
    }
    pub fn image_path(&self, sample: &str) -> PathBuf {
        self.workdir.join("images").join(format!("{sample}.omnt"))
    }
    pub fn png_path(&self, sample: &str) -> PathBuf {
        self.workdir.join("png").join(format!("{sample}.png"))
    }
    pub fn model_path(&self) -> PathBuf {
        self.workdir.join("model.omck")
    }
    pub fn metrics_dir(&self) -> PathBuf {
        self.workdir.join("metrics")
    }
    pub fn attribution_path(&self) -> PathBuf {
        self.workdir.join("attribution.tsv")
    }
    pub fn enrichment_path(&self) -> PathBuf {
        self.workdir.join("enrichment.tsv")
    }
    pub fn cache_dir_path(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.workdir.join("cache"))
    }
}

fn require_file(path: &Path, hint: &str) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        });
    }
    Ok(())
}

fn load_tree(config: &PipelineConfig) -> Result<HierarchyTree, PipelineError> {
    let path = config.tree_path();
    require_file(&path, "run `omicsmap build-tree` or `omicsmap synth` first")?;
    Ok(hierarchy::parse_json(&std::fs::read_to_string(&path)?)?)
}

fn load_layout(config: &PipelineConfig) -> Result<TreemapLayout, PipelineError> {
    let path = config.layout_json_path();
    require_file(&path, "run `omicsmap layout` first")?;
    Ok(TreemapLayout::from_json(&std::fs::read_to_string(&path)?)?)
}

fn load_expr(config: &PipelineConfig) -> Result<ExpressionMatrix, PipelineError> {
    let path = config.expr_path();
    require_file(&path, "run `omicsmap normalize` first")?;
    Ok(expr::load_expression(&path)?)
}

fn load_labels_file(config: &PipelineConfig) -> Result<SampleLabels, PipelineError> {
    let path = config.labels_path();
    require_file(&path, "provide --labels or run `omicsmap synth` first")?;
    Ok(expr::load_labels(&path)?)
}

fn load_images(
    config: &PipelineConfig,
    samples: &[String],
) -> Result<Vec<Tensor>, PipelineError> {
    samples
        .iter()
        .map(|sample| {
            let path = config.image_path(sample);
            require_file(&path, "run `omicsmap render` first")?;
            let img = render::read_tensor(&path)?;
            Ok(Tensor { h: img.height, w: img.width, c: img.channels, data: img.data })
        })
        .collect()
}

fn parse_classes_pair(spec: &str) -> Result<(String, String), PipelineError> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Usage(format!(
            "logreg-classes must name two classes, got {spec:?}"
        )));
    }
    Ok((parts[0].to_string(), parts[1].to_string()))
}

fn parse_planted(spec: &str) -> Result<BTreeMap<String, Vec<String>>, PipelineError> {
    let mut planted = BTreeMap::new();
    for entry in spec.split(';').filter(|s| !s.trim().is_empty()) {
        let (class, categories) = entry.split_once(':').ok_or_else(|| {
            PipelineError::Usage(format!("synth-planted entry {entry:?} is not class:cat,cat"))
        })?;
        let cats: Vec<String> =
            categories.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
        planted.insert(class.trim().to_string(), cats);
    }
    Ok(planted)
}

/// Fetch (or reuse from cache) a hierarchy resource; prints the cache path.
pub fn cmd_fetch_hierarchy(
    config: &PipelineConfig,
    resource: &str,
) -> Result<PathBuf, PipelineError> {
    let cache = config.cache_dir_path();
    std::fs::create_dir_all(&cache)?;
    hierarchy::fetch_catalog(resource, &cache)?;
    Ok(cache.join(crate::util::percent_encode(resource)))
}

/// Parse the top catalog, locate the branch, parse one sub-file per branch
/// entry, and write the composed annotation tree.
pub fn cmd_build_tree(config: &PipelineConfig) -> Result<(), PipelineError> {
    let top_path = config
        .hierarchy
        .clone()
        .ok_or_else(|| PipelineError::Usage("build-tree needs --hierarchy".into()))?;
    require_file(&top_path, "provide the top catalog htext file")?;
    let sub_dir = config
        .sub_dir
        .clone()
        .ok_or_else(|| PipelineError::Usage("build-tree needs --sub-dir".into()))?;
    let opts = ParseOptions { loose_ids: config.loose_ids };
    let top = hierarchy::parse_htext_with(&std::fs::read(&top_path)?, opts)?;

    let branch = top
        .root
        .children
        .iter()
        .find(|n| n.label == config.branch)
        .ok_or_else(|| PipelineError::Usage(format!("branch {:?} not in catalog", config.branch)))?;
    let mut sub_files = BTreeMap::new();
    for entry in &branch.children {
        // Sub-file name: first token of the entry label without a "br:"
        // prefix, tried with .keg/.txt/bare extensions.
        let token = entry.label.split_whitespace().next().unwrap_or_default();
        let stem = token.strip_prefix("br:").unwrap_or(token);
        let candidate = ["keg", "txt"]
            .iter()
            .map(|ext| sub_dir.join(format!("{stem}.{ext}")))
            .chain(std::iter::once(sub_dir.join(stem)))
            .find(|p| p.exists());
        if let Some(path) = candidate {
            sub_files.insert(entry.label.clone(), hierarchy::parse_htext_with(&std::fs::read(path)?, opts)?);
        }
    }
    let tree = hierarchy::build_annotation_tree(&top, &config.branch, &sub_files)?;
    atomic_write(&config.tree_path(), hierarchy::serialize_json(&tree).as_bytes())?;
    Ok(())
}

/// TMM-normalize raw counts, filter low expression, and optionally map
/// gene ids.
pub fn cmd_normalize(config: &PipelineConfig) -> Result<(), PipelineError> {
    let counts_path = config.counts_path();
    require_file(&counts_path, "provide --counts or run `omicsmap synth` first")?;
    let counts = expr::load_counts(&counts_path)?;
    let normalized = expr::tmm_normalize(&counts)?;
    let filtered = expr::filter_low_expression(&normalized, config.filter_threshold);
    let finished = match &config.mapping {
        Some(path) => {
            require_file(path, "provide an existing --mapping file")?;
            let mapping = expr::load_mapping(path)?;
            expr::map_to_kegg(&filtered, &mapping)
        }
        None => filtered,
    };
    expr::write_expression(&finished, &config.expr_path())?;
    Ok(())
}

/// Attach the expression matrix's genes to the tree and freeze the layout.
pub fn cmd_layout(config: &PipelineConfig) -> Result<(), PipelineError> {
    let tree = load_tree(config)?;
    let matrix = load_expr(config)?;
    let ids: HashSet<String> = matrix.gene_ids.iter().cloned().collect();
    let attached = hierarchy::attach_genes(&tree, &ids);
    let medians: std::collections::HashMap<String, f64> = matrix
        .gene_ids
        .iter()
        .enumerate()
        .map(|(g, id)| (id.clone(), median(matrix.row(g))))
        .collect();
    let layout = treemap::build_layout(&attached, |id| medians[id], config.layout_side)?;
    atomic_write(&config.layout_json_path(), layout.to_json().as_bytes())?;
    treemap::export_structure(&layout, &config.layout_tsv_path())?;
    Ok(())
}

/// Rasterize every sample onto the frozen layout and write tensor files
/// (plus bordered PNGs when requested).
pub fn cmd_render(config: &PipelineConfig) -> Result<(), PipelineError> {
    let layout = load_layout(config)?;
    let matrix = load_expr(config)?;
    let side_px = config.layout_side.round() as usize;
    for (s, sample) in matrix.sample_ids.iter().enumerate() {
        let values = matrix.sample_values(s);
        let intensities = render::sample_intensities(&layout, &values)?;
        let full = render::rasterize(&layout, &intensities, side_px, config.channels, false)?;
        let small = render::downsample_mean(&full, config.render_divisor)?;
        render::write_tensor(&small, &config.image_path(sample))?;
        if config.png {
            let bordered = render::rasterize(&layout, &intensities, side_px, 3, true)?;
            render::write_png(&bordered, &config.png_path(sample))?;
        }
    }
    Ok(())
}

fn labeled_images(
    config: &PipelineConfig,
) -> Result<(Vec<Tensor>, Vec<usize>, Vec<String>, Vec<String>), PipelineError> {
    let labels = load_labels_file(config)?;
    let (class_names, class_idx) = labels.class_indices();
    let images = load_images(config, &labels.sample_ids)?;
    Ok((images, class_idx, class_names, labels.sample_ids))
}

fn history_csv(history: &[cnn::EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in history {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy));
    }
    out
}

/// Train one network on all labeled samples (with a stratified 10% early-
/// stop split) and checkpoint it.
pub fn cmd_train(config: &PipelineConfig) -> Result<(), PipelineError> {
    let (images, class_idx, class_names, _) = labeled_images(config)?;
    let seed = sub_seed(config.seed, "train");
    let pool: Vec<usize> = (0..images.len()).collect();
    let (train_idx, val_idx) = carve_train_val(&pool, &class_idx, sub_seed(seed, "val"))?;
    let first = images.first().ok_or_else(|| PipelineError::Usage("no images".into()))?;
    let arch = cnn::Architecture::standard(first.h, first.c, class_names.len());
    let model = cnn::CnnModel::new(arch, sub_seed(seed, "init"))?;
    let cfg = TrainConfig { seed: sub_seed(seed, "run"), ..config.train_config() };
    let gather = |idx: &[usize]| -> (Vec<Tensor>, Vec<usize>) {
        (idx.iter().map(|&i| images[i].clone()).collect(), idx.iter().map(|&i| class_idx[i]).collect())
    };
    let (train_x, train_y) = gather(&train_idx);
    let (val_x, val_y) = gather(&val_idx);
    let (trained, history) = cnn::train(model, &train_x, &train_y, &val_x, &val_y, &cfg)?;
    cnn::checkpoint_save(&trained, None, &config.model_path())?;
    atomic_write(&config.workdir.join("history.csv"), history_csv(&history).as_bytes())?;
    Ok(())
}

fn carve_train_val(
    pool: &[usize],
    ys: &[usize],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let pool_labels: Vec<usize> = pool.iter().map(|&i| ys[i]).collect();
    let n_classes = pool_labels.iter().max().map_or(0, |&m| m + 1);
    let min_class = (0..n_classes)
        .map(|c| pool_labels.iter().filter(|&&l| l == c).count())
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    let k = 10.min(min_class);
    if k < 2 {
        return Err(PipelineError::Usage(
            "too few samples per class for an early-stop split".into(),
        ));
    }
    let folds = eval::stratified_kfold(&pool_labels, k, seed).map_err(PipelineError::Eval)?;
    let val: Vec<usize> = folds[0].iter().map(|&i| pool[i]).collect();
    let train: Vec<usize> = pool.iter().copied().filter(|i| !val.contains(i)).collect();
    Ok((train, val))
}

/// Apply a checkpointed model to every labeled sample.
pub fn cmd_predict(config: &PipelineConfig) -> Result<(), PipelineError> {
    let (images, _, class_names, samples) = labeled_images(config)?;
    require_file(&config.model_path(), "run `omicsmap train` first")?;
    let (model, _) = cnn::checkpoint_load(&config.model_path())?;
    let probs = cnn::predict(&model, &images)?;
    let mut out = String::from("sample,predicted");
    for name in &class_names {
        out.push_str(&format!(",p_{name}"));
    }
    out.push('\n');
    for (sample, row) in samples.iter().zip(&probs) {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        out.push_str(&format!("{sample},{}", class_names[argmax]));
        for p in row {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    atomic_write(&config.workdir.join("predictions.csv"), out.as_bytes())?;
    Ok(())
}

fn fold_metrics_csv(result: &eval::CvResult, class_names: &[String]) -> String {
    let n = class_names.len();
    let mut out = String::from("fold,test_size,accuracy");
    for name in class_names {
        out.push_str(&format!(",auc_{name}"));
    }
    for t in class_names {
        for p in class_names {
            out.push_str(&format!(",conf_{t}_{p}"));
        }
    }
    out.push('\n');
    for fold in &result.folds {
        out.push_str(&format!("{},{},{}", fold.fold, fold.test_size, fold.accuracy));
        for roc in &fold.class_roc {
            out.push_str(&format!(",{}", roc.auc));
        }
        for t in 0..n {
            for p in 0..n {
                out.push_str(&format!(",{}", fold.confusion[t * n + p]));
            }
        }
        out.push('\n');
    }
    out
}

fn summary_csv(result: &eval::CvResult, class_names: &[String]) -> String {
    let s = &result.summary;
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("mean_accuracy,{}\n", s.mean_accuracy));
    out.push_str(&format!("median_accuracy,{}\n", s.median_accuracy));
    out.push_str(&format!("ci_low,{}\n", s.ci_low));
    out.push_str(&format!("ci_high,{}\n", s.ci_high));
    for (name, auc) in class_names.iter().zip(&s.mean_auc_per_class) {
        out.push_str(&format!("mean_auc_{name},{auc}\n"));
    }
    out
}

fn roc_points_csv(result: &eval::CvResult, class: usize) -> String {
    let mut out = String::from("fold,fpr,tpr\n");
    for fold in &result.folds {
        for (fpr, tpr) in &fold.class_roc[class].curve {
            out.push_str(&format!("{},{fpr},{tpr}\n", fold.fold));
        }
    }
    out
}

/// Standalone SVG with one ROC polyline per fold plus the chance diagonal.
fn roc_svg(result: &eval::CvResult, class: usize, class_name: &str) -> String {
    let size = 420.0;
    let margin = 40.0;
    let plot = size - 2.0 * margin;
    let x = |f: f64| margin + f * plot;
    let y = |t: f64| size - margin - t * plot;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{e}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{m}\" y2=\"{m}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{e}\" y2=\"{m}\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n\
         <text x=\"{mid}\" y=\"{title_y}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">ROC {class_name} (mean AUC {auc:.3})</text>\n\
         <text x=\"{mid}\" y=\"{xl}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">false positive rate</text>\n\
         <text x=\"12\" y=\"{mid}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\" transform=\"rotate(-90 12 {mid})\">true positive rate</text>\n",
        m = margin,
        b = size - margin,
        e = size - margin,
        mid = size / 2.0,
        title_y = margin / 2.0,
        xl = size - 8.0,
        auc = result.summary.mean_auc_per_class[class],
    );
    for fold in &result.folds {
        let points: Vec<String> = fold.class_roc[class]
            .curve
            .iter()
            .map(|(f, t)| format!("{:.2},{:.2}", x(*f), y(*t)))
            .collect();
        let hue = (fold.fold * 137) % 360;
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"hsl({hue},70%,45%)\" stroke-width=\"1.5\" \
             points=\"{}\"/>\n",
            points.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_cv_outputs(
    config: &PipelineConfig,
    result: &eval::CvResult,
    class_names: &[String],
    prefix: &str,
) -> Result<(), PipelineError> {
    let dir = config.metrics_dir();
    atomic_write(
        &dir.join(format!("{prefix}folds.csv")),
        fold_metrics_csv(result, class_names).as_bytes(),
    )?;
    atomic_write(
        &dir.join(format!("{prefix}summary.csv")),
        summary_csv(result, class_names).as_bytes(),
    )?;
    for (c, name) in class_names.iter().enumerate() {
        atomic_write(
            &dir.join(format!("{prefix}roc_{name}.csv")),
            roc_points_csv(result, c).as_bytes(),
        )?;
        atomic_write(
            &dir.join(format!("{prefix}roc_{name}.svg")),
            roc_svg(result, c, name).as_bytes(),
        )?;
    }
    Ok(())
}

fn read_accuracies(path: &Path) -> Result<Vec<f64>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() > 2 {
            if let Ok(v) = cells[2].parse::<f64>() {
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Stratified cross-validation of the standard network over the rendered
/// images.
pub fn cmd_cv(config: &PipelineConfig) -> Result<(), PipelineError> {
    let (images, class_idx, class_names, _) = labeled_images(config)?;
    let classifier = CnnClassifier::standard(class_names.len(), config.train_config());
    let result = eval::run_cv(
        &images,
        &class_idx,
        class_names.len(),
        config.cv_k,
        sub_seed(config.seed, "cv"),
        &classifier,
    )?;
    write_cv_outputs(config, &result, &class_names, "cv_")?;
    Ok(())
}

/// The identical cross-validation on once-permuted labels; writes the
/// rank-sum comparison when real metrics already exist.
pub fn cmd_permute_cv(config: &PipelineConfig) -> Result<(), PipelineError> {
    let (images, class_idx, class_names, _) = labeled_images(config)?;
    let classifier = CnnClassifier::standard(class_names.len(), config.train_config());
    let (result, _) = eval::permutation_control(
        &images,
        &class_idx,
        class_names.len(),
        config.cv_k,
        sub_seed(config.seed, "cv"),
        &classifier,
    )?;
    write_cv_outputs(config, &result, &class_names, "permuted_")?;

    let real_path = config.metrics_dir().join("cv_folds.csv");
    if real_path.exists() {
        let real = read_accuracies(&real_path)?;
        let permuted = result.accuracies();
        if !real.is_empty() && !permuted.is_empty() {
            let p = eval::ranksum_test(&real, &permuted);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let out = format!(
                "metric,value\nmean_accuracy,{}\npermuted_mean_accuracy,{}\nranksum_p,{p}\n",
                mean(&real),
                mean(&permuted),
            );
            atomic_write(&config.metrics_dir().join("comparison.csv"), out.as_bytes())?;
        }
    }
    Ok(())
}

/// Select each sample's strongest Pool3 map, take the top fraction of its
/// pixels, and project the selections back onto the gene rectangles.
pub fn cmd_attribute(config: &PipelineConfig) -> Result<(), PipelineError> {
    let (images, _, _, _) = labeled_images(config)?;
    let layout = load_layout(config)?;
    require_file(&config.model_path(), "run `omicsmap train` first")?;
    let (model, _) = cnn::checkpoint_load(&config.model_path())?;
    let pool_side = model.arch.pool3_side()?;
    let selected: Result<Vec<Vec<(usize, usize)>>, CnnError> = images
        .iter()
        .map(|image| {
            let maps = cnn::pool3_maps(&model, image)?;
            let (_, map) = attribution::strongest_feature_map(&maps);
            Ok(attribution::top_fraction_pixels(&map, maps.h, maps.w, config.attribution_frac))
        })
        .collect();
    let report = attribution::project_to_genes(&selected?, &layout, pool_side)?;
    attribution::export_report(&report, &config.attribution_path())?;
    Ok(())
}

/// Copy key used for enrichment: a gene rectangle, not a gene.
fn copy_key(kegg_id: &str, copy_index: u32) -> String {
    format!("{kegg_id}#{copy_index}")
}

/// Hypergeometric enrichment of the most-selected gene copies against the
/// level-3 categories.
pub fn cmd_enrich(config: &PipelineConfig) -> Result<(), PipelineError> {
    require_file(&config.attribution_path(), "run `omicsmap attribute` first")?;
    let report = attribution::read_report(&config.attribution_path())?;
    let rows = enrich_from_report(&report, config.attribution_frac)?;
    let mut out = String::from(
        "group\toverlap\tgroup_size\tselected_size\tbackground_size\tp_raw\tp_corrected\n",
    );
    for row in &rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.label,
            row.overlap,
            row.group_size,
            row.selected_size,
            row.background_size,
            row.p_raw,
            row.p_corrected,
        ));
    }
    atomic_write(&config.enrichment_path(), out.as_bytes())?;
    Ok(())
}

/// Top-fraction most-selected copies tested against level-3 category
/// groups, Holm-corrected.
pub fn enrich_from_report(
    report: &attribution::AttributionReport,
    frac: f64,
) -> Result<Vec<eval::EnrichmentRow>, PipelineError> {
    let background: BTreeSet<String> =
        report.rows.iter().map(|r| copy_key(&r.kegg_id, r.copy_index)).collect();
    let mut ordered: Vec<&attribution::ReportRow> = report.rows.iter().collect();
    ordered.sort_by(|a, b| {
        b.selection_count
            .cmp(&a.selection_count)
            .then_with(|| a.kegg_id.cmp(&b.kegg_id))
            .then_with(|| a.copy_index.cmp(&b.copy_index))
    });
    let k = ((report.rows.len() as f64) * frac).floor() as usize;
    // A copy that was never selected is not a "most-selected" copy, even
    // when fewer than k copies have nonzero counts.
    let selected: BTreeSet<String> = ordered
        .iter()
        .filter(|r| r.selection_count > 0)
        .take(k)
        .map(|r| copy_key(&r.kegg_id, r.copy_index))
        .collect();
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for row in &report.rows {
        let label = row.annotation_path.last().cloned().unwrap_or_default();
        groups.entry(label).or_default().insert(copy_key(&row.kegg_id, row.copy_index));
    }
    let groups: Vec<(String, BTreeSet<String>)> = groups.into_iter().collect();
    Ok(eval::enrich_hypergeom(&selected, &background, &groups)?)
}

/// Generate the synthetic tree, counts, labels, and planted-gene list.
pub fn cmd_synth(config: &PipelineConfig) -> Result<(), PipelineError> {
    let tree = hierarchy::synthetic_tree(
        config.synth_level1,
        config.synth_level2,
        config.synth_level3,
        config.synth_genes_per_category,
    );
    let classes: Vec<String> =
        config.synth_classes.split(',').map(|c| c.trim().to_string()).collect();
    let planted = parse_planted(&config.synth_planted)?;
    let (counts, labels, planted_genes) = expr::generate_synthetic(
        config.synth_samples,
        &classes,
        &tree,
        &planted,
        config.synth_effect,
        sub_seed(config.seed, "synth"),
    )?;
    atomic_write(&config.tree_path(), hierarchy::serialize_json(&tree).as_bytes())?;
    expr::write_counts(&counts, &config.counts_path())?;
    expr::write_labels(&labels, &config.labels_path())?;
    let planted_list: Vec<String> = planted_genes.into_iter().collect();
    atomic_write(
        &config.workdir.join("planted.txt"),
        (planted_list.join("\n") + "\n").as_bytes(),
    )?;
    Ok(())
}

/// Logistic-regression baseline on the expression matrix for a chosen
/// pair of classes.
pub fn cmd_baseline_logreg(config: &PipelineConfig) -> Result<(), PipelineError> {
    let matrix = load_expr(config)?;
    let labels = load_labels_file(config)?;
    let (pos, neg) = parse_classes_pair(&config.logreg_classes)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (s, sample) in matrix.sample_ids.iter().enumerate() {
        match labels.class_of(sample) {
            Some(class) if class == pos => {
                x.push(matrix.sample_column(s));
                y.push(1.0);
            }
            Some(class) if class == neg => {
                x.push(matrix.sample_column(s));
                y.push(-1.0);
            }
            _ => {}
        }
    }
    if x.is_empty() {
        return Err(PipelineError::Usage(format!(
            "no samples labeled {pos:?} or {neg:?} in the expression matrix"
        )));
    }
    let grid: Vec<f64> = config
        .logreg_c_grid
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Usage(format!("bad logreg-c-grid: {e}")))?;
    let result = eval::logreg_cv(&x, &y, &grid)?;
    let mean_auc = result.fold_aucs.iter().sum::<f64>() / result.fold_aucs.len() as f64;
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("chosen_c,{}\n", result.chosen_c));
    out.push_str(&format!("mean_auc,{mean_auc}\n"));
    for (i, auc) in result.fold_aucs.iter().enumerate() {
        out.push_str(&format!("fold{i}_auc,{auc}\n"));
    }
    out.push_str(&format!("intercept,{}\n", result.intercept));
    atomic_write(&config.metrics_dir().join("logreg.csv"), out.as_bytes())?;
    let mut weights = String::from("gene_id\tweight\n");
    for (gene, w) in matrix.gene_ids.iter().zip(&result.weights) {
        weights.push_str(&format!("{gene}\t{w}\n"));
    }
    atomic_write(&config.workdir.join("logreg_weights.tsv"), weights.as_bytes())?;
    Ok(())
}

/// Seed the permutation stream identically to `permutation_control` so the
/// CLI and library paths agree.
pub fn permutation_of(labels: &[usize], seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut permuted = labels.to_vec();
    permuted.shuffle(&mut rng_for(sub_seed(seed, "cv"), "permutation"));
    permuted
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults() {
        let mut config = PipelineConfig::default();
        let file: ConfigFile =
            toml::from_str("seed = 3\nlayout_side = 256.0\nbranch = \"Other\"").unwrap();
        config.apply_file(&file);
        assert_eq!(config.seed, 3);
        assert_eq!(config.layout_side, 256.0);
        assert_eq!(config.branch, "Other");
        assert_eq!(config.cv_k, 10);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = toml::from_str::<ConfigFile>("not_a_key = 1").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn validation_rejects_bad_divisor() {
        let config = PipelineConfig {
            layout_side: 100.0,
            render_divisor: 3,
            ..PipelineConfig::default()
        };
        assert!(matches!(config.validate(), Err(PipelineError::Usage(_))));
        let ok = PipelineConfig {
            layout_side: 256.0,
            render_divisor: 2,
            ..PipelineConfig::default()
        };
        ok.validate().unwrap();
    }

    #[test]
    fn planted_spec_parses() {
        let planted = parse_planted("II:G03;III:G11,G27;IV:G35").unwrap();
        assert_eq!(planted.len(), 3);
        assert_eq!(planted["III"], vec!["G11", "G27"]);
        assert!(parse_planted("junk").is_err());
    }

    #[test]
    fn class_pair_parses() {
        assert_eq!(parse_classes_pair("II,III").unwrap(), ("II".into(), "III".into()));
        assert!(parse_classes_pair("II").is_err());
        assert!(parse_classes_pair("II,III,IV").is_err());
    }
}
