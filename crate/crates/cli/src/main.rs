use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sbal_core::config::{parse_override, parse_study};
use sbal_core::experiment::{aggregate_runs, describe_plan, load_runs, reselect_offline, run_experiment, RunOptions};
use sbal_core::report::{box_plot_svg, learning_curve_svg, parse_metric_key, write_report, PlotSpec, XAxis};
use sbal_core::selection::{PoolMode, PoolSize, SelectionConfig, Strategy};
use sbal_core::storage::write_synthetic_dataset;
use sbal_core::uncertainty::{ScoreTable, ScorerKind};

#[derive(Parser)]
#[command(name = "sbal", version, about = "Stochastic-batch active learning for slice segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) every method and seed of a study file.
    Run(RunArgs),
    /// Aggregate finished runs into tables and p-values.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to `<results>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw learning curves, or box plots across several result directories.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long, default_value = "3d_dsc")]
        metric: String,
        #[arg(long, value_enum, default_value_t = PlotKind::Curve)]
        kind: PlotKind,
        #[arg(long, value_enum, default_value_t = XArg::Labelled)]
        x: XArg,
        /// Also plot the initial labelled set.
        #[arg(long)]
        include_cycle0: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-select a batch offline from a stored score table.
    Score {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value = "stochastic_batch")]
        strategy: String,
        #[arg(long, default_value_t = 10)]
        budget: usize,
        #[arg(long, default_value = "auto")]
        q: String,
        #[arg(long, default_value = "partition")]
        pool_mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        volumes: usize,
        #[arg(long, default_value_t = 12)]
        slices: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Curve,
    Box,
}

#[derive(Clone, Copy, ValueEnum)]
enum XArg {
    Labelled,
    Cycle,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the seed list; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// Runs only this strategy instead of the configured methods.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    pool_mode: Option<String>,
    /// Dataset root for `kind = "directory"` datasets.
    #[arg(long, env = "SBAL_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Any dotted-path override, e.g. `--set train.epochs=10`.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Validate and print the cycle plan without training.
    #[arg(long)]
    dry_run: bool,
}

fn toml_string(s: &str) -> String {
    format!("{s:?}")
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut overrides = Vec::new();
    for o in &args.overrides {
        overrides.push(parse_override(o)?);
    }
    if !args.seed.is_empty() {
        let list: Vec<String> = args.seed.iter().map(u64::to_string).collect();
        overrides.push(("seeds".into(), format!("[{}]", list.join(", "))));
    }
    if let Some(b) = args.budget {
        overrides.push(("selection.budget".into(), b.to_string()));
    }
    if let Some(q) = &args.q {
        let q: PoolSize = q.parse()?;
        let raw = match q {
            PoolSize::Auto => toml_string("auto"),
            PoolSize::Fixed(n) => n.to_string(),
        };
        overrides.push(("selection.q".into(), raw));
    }
    if let Some(m) = &args.pool_mode {
        overrides.push(("selection.pool_mode".into(), toml_string(&m.parse::<PoolMode>()?.to_string())));
    }
    if let Some(s) = &args.scorer {
        overrides.push(("scorer".into(), toml_string(s.parse::<ScorerKind>()?.name())));
    }
    if let Some(root) = &args.data_root {
        if text.contains("\"directory\"") || overrides.iter().any(|(k, v)| k == "dataset.kind" && v.contains("directory")) {
            overrides.push(("dataset.root".into(), toml_string(&root.to_string_lossy())));
        }
    }
    let mut study = parse_study(&text, &overrides)?;
    if let Some(s) = &args.strategy {
        study.base.selection.strategy = s.parse::<Strategy>()?;
        study.methods.clear();
        study.validate()?;
    }
    let experiments = study.experiments();
    // load before touching the output directory so a bad dataset leaves no state behind
    let split = study.base.dataset.load().context("loading dataset")?;
    for e in &experiments {
        e.validate_for(&split)?;
    }
    if args.dry_run {
        for e in &experiments {
            print!("{}", describe_plan(e, &split)?);
        }
        return Ok(());
    }
    for e in &experiments {
        for &seed in &e.seeds {
            let out = run_experiment(e, &split, seed, &RunOptions::default())?;
            println!("{}: {} cycles, {:?}", out.manifest.experiment_id, out.results.len().saturating_sub(1), out.manifest.status);
        }
    }
    Ok(())
}

fn cmd_report(results: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let runs = load_runs(&results)?;
    if runs.is_empty() {
        bail!("no experiments found under {}", results.display());
    }
    let summary = aggregate_runs(&runs)?;
    let out = out.unwrap_or_else(|| results.join("report"));
    for path in write_report(&summary, &out)? {
        println!("wrote {}", path.display());
    }
    print!("{}", sbal_core::report::format_table(&summary));
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_plot(results: Vec<PathBuf>, metric: &str, kind: PlotKind, x: XArg, include_cycle0: bool, out: PathBuf) -> Result<()> {
    let metric = parse_metric_key(metric)?;
    let mut summaries = Vec::new();
    for dir in &results {
        let runs = load_runs(dir)?;
        if runs.is_empty() {
            bail!("no experiments found under {}", dir.display());
        }
        summaries.push(aggregate_runs(&runs)?);
    }
    let svg = match kind {
        PlotKind::Curve => {
            if summaries.len() != 1 {
                bail!("learning curves take exactly one results directory");
            }
            let x = match x {
                XArg::Labelled => XAxis::LabelledSize,
                XArg::Cycle => XAxis::Cycle,
            };
            learning_curve_svg(&summaries[0], &PlotSpec { metric, x, include_cycle0 })?
        }
        PlotKind::Box => box_plot_svg(&summaries, metric)?,
    };
    fs::write(&out, svg)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Report { results, out } => cmd_report(results, out),
        Command::Plot { results, metric, kind, x, include_cycle0, out } => cmd_plot(results, &metric, kind, x, include_cycle0, out),
        Command::Score { table, strategy, budget, q, pool_mode, seed } => (|| {
            let table = ScoreTable::load(&table)?;
            let sel = SelectionConfig { strategy: strategy.parse()?, budget, pool_mode: pool_mode.parse()?, q: q.parse()?, seed };
            let batch = reselect_offline(&table, &sel)?;
            println!("{}", serde_json::to_string_pretty(&batch)?);
            Ok(())
        })(),
        Command::Synth { out, seed, volumes, slices, size, classes } => {
            write_synthetic_dataset(&out, seed, volumes, slices, (size, size), classes).map_err(Into::into).map(|()| {
                println!("wrote {volumes} volumes to {}", out.display());
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
