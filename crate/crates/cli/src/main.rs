use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multimatch::coordination::{CoordinationMode, PromptStyle};
use multimatch::eval::{ablate, sweep, write_sweep_csv, Stage, SweepParameter, SweepSpec};
use multimatch::pipeline::{run_pipeline, PipelineConfig};
use multimatch::synth::{generate, Corruption, SynthSpec};
use multimatch::tables::{load_dataset, read_clusters, write_dataset};

#[derive(Parser)]
#[command(name = "multimatch", version, about = "Multi-table entity matching")]
struct Cli {
    /// Log stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write artifacts.
    Match(MatchArgs),
    /// Score the pipeline over a grid of one threshold.
    Sweep(SweepArgs),
    /// Score the pipeline with stages bypassed.
    Ablate(AblateArgs),
    /// Write a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Compare two cluster files.
    Score {
        predicted: PathBuf,
        truth: PathBuf,
    },
}

/// Config file plus flag overrides shared by the pipeline commands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; unspecified keys keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dataset directory (one CSV per table, optional ground_truth.csv).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    rho_min: Option<usize>,
    /// rules-only, model-only or model-with-rule-fallback.
    #[arg(long)]
    coordination_mode: Option<CoordinationMode>,
    /// simple or difficult.
    #[arg(long)]
    prompt_style: Option<PromptStyle>,
    #[arg(long)]
    tm_endpoint: Option<String>,
    #[arg(long)]
    tm_model: Option<String>,
    /// Stage to bypass: mplac or dpm. Repeatable.
    #[arg(long = "disable", value_name = "STAGE")]
    disable: Vec<Stage>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.paths.dataset = v.clone();
        }
        if let Some(v) = &self.out_dir {
            c.paths.out_dir = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            c.paths.cache_dir = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lambda {
            c.tcem.lambda = v;
        }
        if let Some(v) = self.d {
            c.dpm.d = v;
        }
        if let Some(v) = self.rho_min {
            c.dpm.rho_min = v;
        }
        if let Some(v) = self.coordination_mode {
            c.coordination.mode = v;
        }
        if let Some(v) = self.prompt_style {
            c.coordination.style = v;
        }
        if let Some(v) = &self.tm_endpoint {
            c.coordination.text_model.endpoint = v.clone();
        }
        if let Some(v) = &self.tm_model {
            c.coordination.text_model.model_name = v.clone();
        }
        for stage in &self.disable {
            match stage {
                Stage::Mplac => c.eval.disable_mplac = true,
                Stage::Dpm => c.eval.disable_dpm = true,
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn dataset(&self, config: &PipelineConfig) -> Result<multimatch::Dataset> {
        let ds = load_dataset(&config.paths.dataset, &config.ingest)
            .with_context(|| format!("loading {}", config.paths.dataset.display()))?;
        if ds.ground_truth.is_none() {
            bail!("{} has no {}", config.paths.dataset.display(), config.ingest.truth_file);
        }
        Ok(ds)
    }
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// lambda or d.
    #[arg(long)]
    param: SweepParameter,
    /// start:end:step, inclusive.
    #[arg(long)]
    grid: String,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    tables: usize,
    #[arg(long, default_value_t = 100)]
    entities: usize,
    #[arg(long, default_value_t = 0.9)]
    presence: f64,
    #[arg(long, default_value_t = 0.0)]
    typo: f64,
    #[arg(long, default_value_t = 0.0)]
    unit_mangle: f64,
    #[arg(long, default_value_t = 0.0)]
    time_format: f64,
    #[arg(long, default_value_t = 0.0)]
    decoy: f64,
}

fn parse_grid(param: SweepParameter, grid: &str) -> Result<SweepSpec> {
    let parts: Vec<&str> = grid.split(':').collect();
    let [start, end, step] = parts.as_slice() else {
        bail!("--grid expects start:end:step, got {grid:?}");
    };
    let num = |s: &str| s.trim().parse::<f64>().with_context(|| format!("bad number {s:?} in --grid"));
    Ok(SweepSpec::grid(param, num(start)?, num(end)?, num(step)?)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Match(args) => {
            let config = args.config.resolve()?;
            if args.print_config {
                write!(stdout, "{}", config.to_toml()?)?;
                return Ok(());
            }
            let run = run_pipeline(&config)?;
            match &run.report {
                Some(r) => write!(stdout, "{}", r.to_table())?,
                None => writeln!(stdout, "clusters {}", run.result.clusters.len())?,
            }
            writeln!(stdout, "artifacts {}", config.paths.out_dir.display())?;
        }
        Command::Sweep(args) => {
            let config = args.config.resolve()?;
            let spec = parse_grid(args.param, &args.grid)?;
            let ds = args.config.dataset(&config)?;
            let rows = sweep(&ds, &config, &spec)?;
            match &args.out {
                Some(path) => write_sweep_csv(path, &rows)?,
                None => {
                    writeln!(stdout, "value,precision,recall,f1")?;
                    for (v, r) in &rows {
                        writeln!(stdout, "{v},{},{},{}", r.precision, r.recall, r.f1)?;
                    }
                }
            }
        }
        Command::Ablate(args) => {
            let config = args.config.resolve()?;
            let ds = args.config.dataset(&config)?;
            let report = ablate(&ds, &config, &HashSet::new())?;
            write!(stdout, "{}", report.to_table())?;
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                n_tables: a.tables,
                n_entities: a.entities,
                presence_prob: a.presence,
                corruption: Corruption {
                    typo_rate: a.typo,
                    unit_mangle_rate: a.unit_mangle,
                    time_format_rate: a.time_format,
                },
                decoy_rate: a.decoy,
                seed: a.seed,
            };
            let ds = generate(&spec)?;
            write_dataset(&a.out, &ds, &Default::default())?;
            writeln!(
                stdout,
                "wrote {} tables, {} records, {} truth clusters to {}",
                ds.n_tables(),
                ds.total_records(),
                ds.ground_truth.as_ref().map_or(0, Vec::len),
                a.out.display()
            )?;
        }
        Command::Score { predicted, truth } => {
            let report = multimatch::score(&read_clusters(&predicted)?, &read_clusters(&truth)?)?;
            write!(stdout, "{}", report.to_table())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(if cli.verbose { "info" } else { "warn" })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
