use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rnnp::datagen::{generate_mixture, write_embeddings, EmbeddingFormat};
use rnnp::harness::{self, default_mixture, DataSource, ExperimentConfig, MethodKind, SweepAxis};
use rnnp::{ClusteringMode, HybridLabeling, HybridSource, RnnpError};

#[derive(Parser)]
#[command(
    name = "rnnp",
    version,
    about = "Robust prototype few-shot evaluation under noisy support labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture embedding pool.
    Generate(GenerateArgs),
    /// Evaluate every configured method at every corruption rate.
    Eval(CommonArgs),
    /// Sweep alpha, beta or iterations of the first rnnp method.
    Sweep(SweepArgs),
    /// Count support labels fixed by refinement, per episode.
    Rectify(CommonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Soft,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum HybridArg {
    Same,
    Different,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelingArg {
    Unlabeled,
    Labeled,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Alpha,
    Beta,
    Iterations,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated corruption rates, e.g. 0,0.2,0.4
    #[arg(long, value_delimiter = ',')]
    corruption: Option<Vec<f64>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    hybrid: Option<HybridArg>,
    #[arg(long, value_enum)]
    labeling: Option<LabelingArg>,
    /// Embedding file (CSV or JSONL) to sample episodes from instead of the mixture.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    samples_per_class: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values for the swept parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

impl CommonArgs {
    fn build_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.episodes {
            cfg.n_episodes = v;
        }
        if let Some(v) = &self.corruption {
            cfg.corruption_rates = v.clone();
        }
        if let Some(v) = self.n_way {
            cfg.n_way = v;
        }
        if let Some(v) = self.k_shot {
            cfg.k_shot = v;
        }
        if let Some(v) = self.queries {
            cfg.queries_per_class = v;
        }
        if let Some(path) = &self.data {
            cfg.data = DataSource::File {
                path: path.clone(),
                format: None,
            };
        }
        if self.out.is_some() {
            cfg.output = self.out.clone();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        for m in cfg
            .methods
            .iter_mut()
            .filter(|m| m.kind == MethodKind::Rnnp)
        {
            if let Some(v) = self.alpha {
                m.alpha = Some(v);
            }
            if let Some(v) = self.beta {
                m.beta = Some(v);
            }
            if let Some(v) = self.iterations {
                m.iterations = Some(v);
            }
            if let Some(v) = self.mode {
                m.clustering_mode = Some(match v {
                    ModeArg::Soft => ClusteringMode::Soft,
                    ModeArg::Hard => ClusteringMode::Hard,
                });
            }
            if let Some(v) = self.hybrid {
                m.hybrid_source = Some(match v {
                    HybridArg::Same => HybridSource::SameClass,
                    HybridArg::Different => HybridSource::DifferentClass,
                    HybridArg::Noise => HybridSource::GaussianNoise,
                });
            }
            if let Some(v) = self.labeling {
                m.hybrid_labeling = Some(match v {
                    LabelingArg::Unlabeled => HybridLabeling::UnlabeledCluster,
                    LabelingArg::Labeled => HybridLabeling::LabeledDirect,
                });
            }
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.common.build_config()?;
            let mut spec = match &cfg.data {
                DataSource::Mixture(spec) => *spec,
                DataSource::File { .. } => default_mixture(),
            };
            if let Some(v) = args.common.seed {
                spec.seed = v;
            }
            if let Some(v) = args.classes {
                spec.num_classes = v;
            }
            if let Some(v) = args.dim {
                spec.dim = v;
            }
            if let Some(v) = args.separation {
                spec.separation = v;
            }
            if let Some(v) = args.samples_per_class {
                spec.samples_per_class = v;
            }
            let format = match args.format {
                FormatArg::Csv => EmbeddingFormat::Csv,
                FormatArg::Jsonl => EmbeddingFormat::Jsonl,
            };
            let set = generate_mixture(&spec)?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("embeddings.{}", format.extension()));
            write_embeddings(&set, &path, format)?;
            println!(
                "wrote {} vectors ({} classes, dim {}) to {}",
                set.len(),
                set.num_classes(),
                spec.dim,
                path.display()
            );
        }
        Command::Eval(args) => {
            let cfg = args.build_config()?;
            let reports = harness::run_experiment(&cfg)?;
            let dir = out_dir(&cfg);
            harness::write_experiment_outputs(&dir, &cfg, &reports)?;
            for r in &reports {
                println!(
                    "{:<24} corruption {:>4}  {:.2} ± {:.2} %  ({} episodes, {} skipped)",
                    r.method,
                    r.corruption_rate,
                    100.0 * r.mean_accuracy,
                    100.0 * r.ci95,
                    r.n_episodes(),
                    r.skipped_episodes
                );
            }
            println!("wrote {}", dir.join("report.json").display());
        }
        Command::Sweep(args) => {
            let cfg = args.common.build_config()?;
            let axis = match args.axis {
                AxisArg::Alpha => SweepAxis::Alpha,
                AxisArg::Beta => SweepAxis::Beta,
                AxisArg::Iterations => SweepAxis::Iterations,
            };
            let sweep = harness::run_sweep(&cfg, axis, &args.values)?;
            let dir = out_dir(&cfg);
            harness::write_sweep_outputs(&dir, &cfg, &sweep)?;
            for p in &sweep.points {
                println!(
                    "{}={:<6} corruption {:>4}  {:.2} ± {:.2} %",
                    axis.as_str(),
                    p.value,
                    p.report.corruption_rate,
                    100.0 * p.report.mean_accuracy,
                    100.0 * p.report.ci95
                );
            }
        }
        Command::Rectify(args) => {
            let cfg = args.build_config()?;
            let rows = harness::run_rectification_analysis(&cfg)?;
            let dir = out_dir(&cfg);
            harness::write_rectification_csv(&dir, &rows)?;
            let n = rows.len().max(1) as f64;
            let before = rows.iter().map(|r| r.correct_before as f64).sum::<f64>() / n;
            let after = rows.iter().map(|r| r.correct_after as f64).sum::<f64>() / n;
            println!(
                "{} episodes: correct supports {before:.3} -> {after:.3}",
                rows.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<RnnpError>() {
                Some(RnnpError::InvalidInput(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
