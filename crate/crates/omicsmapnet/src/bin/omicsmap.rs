//! Command-line front end: subcommands for every pipeline stage, a TOML
//! config file, and flag overrides. Exit codes: 0 success, 1 domain
//! errors, 2 usage errors.

use clap::{ArgAction, Parser, Subcommand};
use omicsmapnet::pipeline::{self, ConfigFile, PipelineConfig, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "omicsmap",
    version,
    about = "Treemap-image pipeline: hierarchy-driven layouts of expression \
             matrices, CNN phenotype classification, and feature-map gene \
             attribution"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[arg(long, global = true)]
    hierarchy: Option<PathBuf>,
    #[arg(long, global = true)]
    sub_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    branch: Option<String>,
    #[arg(long, global = true)]
    counts: Option<PathBuf>,
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    mapping: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    layout_side: Option<f64>,
    #[arg(long, global = true)]
    render_divisor: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    filter_threshold: Option<f64>,
    /// Accept any first token of a D-line as a gene id.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    loose_ids: bool,
    /// Also write bordered PNG previews when rendering.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    png: bool,

    #[arg(long, global = true)]
    cv_k: Option<usize>,
    #[arg(long, global = true)]
    attribution_frac: Option<f64>,

    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    beta_l2: Option<f64>,
    #[arg(long, global = true)]
    keep_prob: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,

    #[arg(long, global = true)]
    synth_samples: Option<usize>,
    #[arg(long, global = true)]
    synth_classes: Option<String>,
    #[arg(long, global = true)]
    synth_level1: Option<usize>,
    #[arg(long, global = true)]
    synth_level2: Option<usize>,
    #[arg(long, global = true)]
    synth_level3: Option<usize>,
    #[arg(long, global = true)]
    synth_genes_per_category: Option<usize>,
    #[arg(long, global = true)]
    synth_planted: Option<String>,
    #[arg(long, global = true)]
    synth_effect: Option<f64>,

    #[arg(long, global = true)]
    logreg_classes: Option<String>,
    #[arg(long, global = true)]
    logreg_c_grid: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download (or reuse from cache) a hierarchy resource.
    FetchHierarchy {
        /// Resource id (e.g. br:br08902) or full URL.
        resource: String,
    },
    /// Compose the annotation tree from the catalog and its sub-files.
    BuildTree,
    /// TMM-normalize counts, filter low expression, and map gene ids.
    Normalize,
    /// Freeze the treemap geometry from the tree and expression matrix.
    Layout,
    /// Rasterize every sample into tensor files (and optional PNGs).
    Render,
    /// Train one network on all labeled samples and checkpoint it.
    Train,
    /// Apply the checkpointed model to every labeled sample.
    Predict,
    /// Stratified k-fold cross-validation with ROC/AUC metrics.
    Cv,
    /// The identical cross-validation on permuted labels.
    PermuteCv,
    /// Project strong Pool3 activations back to gene selection counts.
    Attribute,
    /// Hypergeometric enrichment of the most-selected gene copies.
    Enrich,
    /// Generate a labeled synthetic dataset with planted categories.
    Synth,
    /// Logistic-regression baseline on the expression matrix.
    BaselineLogreg,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let file = ConfigFile::load(path)?;
        config.apply_file(&file);
    }
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = &cli.$field { config.$field = v.clone(); })*
        };
    }
    take!(workdir, seed, branch, layout_side, render_divisor, channels, filter_threshold);
    take!(cv_k, attribution_frac, learning_rate, beta_l2, keep_prob, batch_size);
    take!(max_epochs, patience, synth_samples, synth_classes, synth_level1, synth_level2);
    take!(synth_level3, synth_genes_per_category, synth_planted, synth_effect);
    take!(logreg_classes, logreg_c_grid);
    if cli.hierarchy.is_some() {
        config.hierarchy = cli.hierarchy.clone();
    }
    if cli.sub_dir.is_some() {
        config.sub_dir = cli.sub_dir.clone();
    }
    if cli.counts.is_some() {
        config.counts = cli.counts.clone();
    }
    if cli.labels.is_some() {
        config.labels = cli.labels.clone();
    }
    if cli.mapping.is_some() {
        config.mapping = cli.mapping.clone();
    }
    if cli.cache_dir.is_some() {
        config.cache_dir = cli.cache_dir.clone();
    }
    if cli.jobs.is_some() {
        config.jobs = cli.jobs;
    }
    if cli.loose_ids {
        config.loose_ids = true;
    }
    if cli.png {
        config.png = true;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli, config: &PipelineConfig) -> Result<(), PipelineError> {
    match &cli.command {
        Command::FetchHierarchy { resource } => {
            let path = pipeline::cmd_fetch_hierarchy(config, resource)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::BuildTree => pipeline::cmd_build_tree(config),
        Command::Normalize => pipeline::cmd_normalize(config),
        Command::Layout => pipeline::cmd_layout(config),
        Command::Render => pipeline::cmd_render(config),
        Command::Train => pipeline::cmd_train(config),
        Command::Predict => pipeline::cmd_predict(config),
        Command::Cv => pipeline::cmd_cv(config),
        Command::PermuteCv => pipeline::cmd_permute_cv(config),
        Command::Attribute => pipeline::cmd_attribute(config),
        Command::Enrich => pipeline::cmd_enrich(config),
        Command::Synth => pipeline::cmd_synth(config),
        Command::BaselineLogreg => pipeline::cmd_baseline_logreg(config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match build_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("omicsmap: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(jobs) = config.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(PipelineError::Usage(msg)) => {
            eprintln!("omicsmap: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("omicsmap: {e}");
            ExitCode::from(1)
        }
    }
}
