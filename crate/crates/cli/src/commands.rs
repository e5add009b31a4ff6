//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use featinv::analysis::{cosine_similarity, norm_statistics, normalize_to_norm, pairwise_squared_distances, scale_feature};
use featinv::backbone::{train_toy_backbone, BackboneTrainConfig, ToyUnetConfig};
use featinv::dataset::{generate_shapes, read_dataset, write_dataset, ShapesConfig};
use featinv::extractor::{train_toy_extractor, ExtractorTrainConfig, FeatureExtractor, PooledMeanExtractor, ToyCnnConfig, ToyCnnExtractor};
use featinv::feature::{write_csv, FeatureVector};
use featinv::quantizer::QuantizedImage;
use featinv::schedule::ScheduleSpec;
use serde::Serialize;

use crate::config::{Prepared, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{execute_all, generate_jobs, summarize_trace, RunStatus};
use crate::sweep::{run_sweep, SweepParam};
use crate::S;

#[derive(Debug, Parser)]
#[command(name = "featinv", version, about = "Invert features into images with a guided diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run guided generation as described by a config file.
    Generate(GenerateArgs),
    /// Repeat generation over values of one guidance parameter.
    Sweep(SweepArgs),
    /// Encode images into feature files, optionally scaling or renormalising.
    Encode(EncodeArgs),
    /// Feature-space and trace reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train the toy diffusion backbone on a shapes dataset.
    TrainBackbone(TrainBackboneArgs),
    /// Train the toy CNN extractor on a shapes dataset.
    TrainExtractor(TrainExtractorArgs),
    /// Render a procedural shapes dataset.
    MakeDataset(MakeDatasetArgs),
}

/// Command-line overrides for config fields.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub guidance_weight: Option<f64>,
    #[arg(long)]
    pub clip_multiplier: Option<f64>,
    #[arg(long)]
    pub early_steps: Option<usize>,
    #[arg(long)]
    pub early_iterations: Option<usize>,
    #[arg(long)]
    pub late_iterations: Option<usize>,
    #[arg(long)]
    pub trace_every: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        let g = &mut cfg.guidance;
        macro_rules! set {
            ($($src:ident => $dst:expr),*) => { $( if let Some(v) = self.$src { $dst = v; } )* };
        }
        set!(
            runs => cfg.runs,
            workers => cfg.workers,
            seed => g.seed,
            guidance_weight => g.guidance_weight,
            clip_multiplier => g.clip_multiplier,
            early_steps => g.early_steps,
            early_iterations => g.early_iterations,
            late_iterations => g.late_iterations,
            trace_every => g.trace_every
        );
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// w_g, clip_multiplier or emphasis.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values; `on,off` for emphasis.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// PNG images or existing `.fvec` feature files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Toy CNN checkpoint; without it the pooled-mean extractor is used.
    #[arg(long)]
    pub cnn: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub grid: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(short, long)]
    pub out_dir: PathBuf,
    /// Also write every feature as one CSV row.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["normalize_to", "cohort_norm"])]
    pub scale: Option<f64>,
    #[arg(long, conflicts_with = "cohort_norm")]
    pub normalize_to: Option<f64>,
    /// Renormalise to the mean norm of these feature files.
    #[arg(long, num_args = 1..)]
    pub cohort_norm: Option<Vec<PathBuf>>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Pairwise squared distances of a feature cohort.
    Pairwise {
        #[arg(required = true, num_args = 2..)]
        features: Vec<PathBuf>,
        #[arg(long, default_value = "cohort")]
        cohort: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity and squared distance of two features.
    Compare { a: PathBuf, b: PathBuf },
    /// Norms of a feature set and their mean.
    Norms {
        #[arg(required = true)]
        features: Vec<PathBuf>,
    },
    /// Re-derive a run's summary numbers from its trace.
    Trace { run: PathBuf },
}

#[derive(Debug, Args)]
pub struct TrainBackboneArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ScheduleSpec::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = ScheduleSpec::default().beta_start)]
    pub beta_start: f64,
    #[arg(long, default_value_t = ScheduleSpec::default().beta_end)]
    pub beta_end: f64,
    #[arg(long, default_value_t = BackboneTrainConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = BackboneTrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = BackboneTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ToyUnetConfig::default().base_channels)]
    pub base_channels: usize,
    #[arg(long, default_value_t = ToyUnetConfig::default().embed_dim)]
    pub embed_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainExtractorArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ExtractorTrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = ExtractorTrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = ExtractorTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = ExtractorTrainConfig::default().holdout)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ToyCnnConfig::default().width)]
    pub width: usize,
    #[arg(long, default_value_t = ToyCnnConfig::default().feature_dim)]
    pub feature_dim: usize,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ShapesConfig::default().count)]
    pub count: usize,
    #[arg(long, default_value_t = ShapesConfig::default().image_size)]
    pub size: usize,
    #[arg(long, default_value_t = ShapesConfig::default().channels)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    crate::check_device()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Encode(a) => cmd_encode(&a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::TrainBackbone(a) => cmd_train_backbone(&a),
        Command::TrainExtractor(a) => cmd_train_extractor(&a),
        Command::MakeDataset(a) => cmd_make_dataset(&a),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> CliResult<Prepared> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    Prepared::load(cfg)
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(CliError::run)?);
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let prepared = load_config(&a.config, &a.overrides)?;
    let jobs = generate_jobs(&prepared.config);
    let summaries = execute_all(&prepared, &jobs, prepared.config.workers, !a.quiet);
    std::fs::create_dir_all(&prepared.config.output_dir).map_err(CliError::run)?;
    std::fs::write(
        prepared.config.output_dir.join("runs.json"),
        serde_json::to_string_pretty(&summaries).map_err(CliError::run)?,
    )
    .map_err(CliError::run)?;
    println!("{:<6} {:>12} {:>14} {:>12}", "run", "best", "best (t,k)", "final");
    for s in &summaries {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let step = s.best_step.map_or("-".to_string(), |(t, k)| format!("({t},{k})"));
        println!("{:<6} {:>12} {:>14} {:>12}", s.run_index, f(s.best_distance), step, f(s.final_distance));
    }
    let failed: Vec<_> = summaries.iter().filter(|s| s.status == RunStatus::Failed).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Run(format!(
            "{} of {} runs failed; first error: {}",
            failed.len(),
            summaries.len(),
            failed[0].error.as_deref().unwrap_or("unknown")
        )))
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let param: SweepParam = a.param.parse()?;
    let prepared = load_config(&a.config, &a.overrides)?;
    let report = run_sweep(&prepared, param, &a.values, prepared.config.workers, !a.quiet)?;
    print!("{}", report.table());
    if report.rows.iter().all(|r| r.failures == r.runs) {
        return Err(CliError::Run("every sweep run failed".into()));
    }
    Ok(())
}

fn is_feature_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "fvec")
}

/// Encode every input, apply the requested transform, write `<stem>.fvec`. Returns the written paths.
pub fn cmd_encode(a: &EncodeArgs) -> CliResult<Vec<PathBuf>> {
    let extractor: Option<Box<dyn FeatureExtractor<S>>> = match &a.cnn {
        Some(p) => Some(Box::new(ToyCnnExtractor::<S>::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)),
        None => None,
    };
    let cohort_mean = match &a.cohort_norm {
        Some(files) => {
            let feats = files.iter().map(|p| FeatureVector::<S>::load(p).map_err(CliError::config)).collect::<CliResult<Vec<_>>>()?;
            Some(norm_statistics(&feats).map_err(CliError::config)?.mean)
        }
        None => None,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(CliError::run)?;
    let mut rows = Vec::new();
    let mut written = Vec::new();
    for input in &a.inputs {
        let f = if is_feature_file(input) {
            FeatureVector::<S>::load(input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?
        } else {
            let channels = extractor.as_ref().map_or(a.channels, |e| e.image_shape()[0]);
            let img = QuantizedImage::<S>::load_png(input, channels).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            match &extractor {
                Some(e) => e.extract(&img),
                None => PooledMeanExtractor::new(img.shape(), a.grid).and_then(|e| e.extract(&img)),
            }
            .map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?
        };
        let f = if let Some(s) = a.scale {
            scale_feature(&f, s as S)
        } else if let Some(n) = a.normalize_to.map(|n| n as S).or(cohort_mean.map(|m| m as S)) {
            normalize_to_norm(&f, n)
        } else {
            Ok(f)
        }
        .map_err(CliError::config)?;
        let stem = input.file_stem().map_or("feature".into(), |s| s.to_string_lossy().into_owned());
        let out = a.out_dir.join(format!("{stem}.fvec"));
        f.save(&out).map_err(CliError::run)?;
        written.push(out);
        rows.push((stem, f));
    }
    if let Some(csv) = &a.csv {
        let file = std::fs::File::create(csv).map_err(CliError::run)?;
        write_csv(&rows, std::io::BufWriter::new(file)).map_err(CliError::run)?;
    }
    Ok(written)
}

fn load_features(paths: &[PathBuf]) -> CliResult<Vec<FeatureVector<S>>> {
    paths
        .iter()
        .map(|p| FeatureVector::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
        .collect()
}

pub fn cmd_analyze(a: &AnalyzeCommand) -> CliResult<()> {
    match a {
        AnalyzeCommand::Pairwise { features, cohort, out } => {
            let report = pairwise_squared_distances(cohort, &load_features(features)?).map_err(CliError::config)?;
            match out {
                Some(p) => std::fs::write(p, serde_json::to_string_pretty(&report).map_err(CliError::run)?).map_err(CliError::run),
                None => print_json(&report),
            }
        }
        AnalyzeCommand::Compare { a, b } => {
            let f = load_features(&[a.clone(), b.clone()])?;
            let cos = cosine_similarity(&f[0], &f[1]).map_err(CliError::config)?;
            let d = featinv::analysis::squared_distance(&f[0], &f[1]).map_err(CliError::config)?;
            print_json(&serde_json::json!({
                "cosine_similarity": cos,
                "squared_distance": d,
                "norms": [f[0].norm(), f[1].norm()],
            }))
        }
        AnalyzeCommand::Norms { features } => print_json(&norm_statistics(&load_features(features)?).map_err(CliError::config)?),
        AnalyzeCommand::Trace { run } => {
            let path = if run.is_dir() { run.join("trace.jsonl") } else { run.clone() };
            print_json(&summarize_trace(&path)?)
        }
    }
}

pub fn cmd_train_backbone(a: &TrainBackboneArgs) -> CliResult<()> {
    let (manifest, data) = read_dataset::<S>(&a.dataset).map_err(|e| CliError::Config(format!("{}: {e}", a.dataset.display())))?;
    let schedule = ScheduleSpec { steps: a.steps, beta_start: a.beta_start, beta_end: a.beta_end }.build::<S>().map_err(CliError::config)?;
    let net_cfg = ToyUnetConfig {
        image_channels: manifest.config.channels,
        image_size: manifest.config.image_size,
        base_channels: a.base_channels,
        embed_dim: a.embed_dim,
    };
    let cfg = BackboneTrainConfig { iterations: a.iterations, batch_size: a.batch_size, lr: a.lr, seed: a.seed, ..Default::default() };
    let images: Vec<_> = data.into_iter().map(|d| d.image).collect();
    let (net, report) = train_toy_backbone(&images, schedule, net_cfg, &cfg).map_err(CliError::run)?;
    net.save(&a.out).map_err(CliError::run)?;
    std::fs::write(a.out.with_extension("report.json"), serde_json::to_string_pretty(&report).map_err(CliError::run)?).map_err(CliError::run)?;
    eprintln!(
        "first/last epoch loss {:.5} -> {:.5} (ratio {:.3})",
        report.epoch_means.first().copied().unwrap_or(f64::NAN),
        report.epoch_means.last().copied().unwrap_or(f64::NAN),
        report.loss_ratio()
    );
    Ok(())
}

pub fn cmd_train_extractor(a: &TrainExtractorArgs) -> CliResult<()> {
    let (manifest, data) = read_dataset::<S>(&a.dataset).map_err(|e| CliError::Config(format!("{}: {e}", a.dataset.display())))?;
    let net_cfg = ToyCnnConfig {
        image_channels: manifest.config.channels,
        image_size: manifest.config.image_size,
        width: a.width,
        feature_dim: a.feature_dim,
        classes: manifest.classes.len(),
    };
    let cfg = ExtractorTrainConfig { epochs: a.epochs, batch_size: a.batch_size, lr: a.lr, holdout: a.holdout, seed: a.seed };
    let (net, report) = train_toy_extractor(&data, net_cfg, &cfg).map_err(CliError::run)?;
    net.save(&a.out).map_err(CliError::run)?;
    std::fs::write(a.out.with_extension("report.json"), serde_json::to_string_pretty(&report).map_err(CliError::run)?).map_err(CliError::run)?;
    eprintln!("train accuracy {:.3}, held-out accuracy {:.3}", report.train_accuracy, report.test_accuracy);
    Ok(())
}

pub fn cmd_make_dataset(a: &MakeDatasetArgs) -> CliResult<()> {
    let cfg = ShapesConfig { count: a.count, image_size: a.size, channels: a.channels, seed: a.seed };
    let items = generate_shapes::<S>(&cfg).map_err(CliError::config)?;
    write_dataset(&a.out, &cfg, &items).map_err(CliError::run)?;
    eprintln!("wrote {} images to {}", items.len(), a.out.display());
    Ok(())
}
