use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ail_cli::plot::{figure, render_svg, Figure};
use ail_cli::report::{emit_csv, read_csv, write_csv, RunMeta};
use ail_core::workload::{check_results, oracle_answers, verify_run, Experiment};
use ail_core::{Aggregate, Column, ColumnId, ExperimentConfig, ExperimentResult, Latching, Method, Policy};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ail", version, about = "Adaptive indexing experiments: cracking, adaptive merging, crack-sort")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-query CSV.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Output CSV; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment (or re-check a CSV) against the scan oracle.
    Verify {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Check the results recorded in this CSV instead of running.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Run one experiment per value of an axis.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Directory receiving one CSV per value.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Draw a figure from result CSVs.
    Plot {
        #[arg(long)]
        figure: Figure,
        #[arg(long)]
        out: PathBuf,
        csvs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Clients,
    Selectivity,
    Latch,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    #[arg(long, default_value = "crack")]
    method: Method,
    #[arg(long, default_value = "piece")]
    latch: Latching,
    /// block, forgo or early:<ms>
    #[arg(long, default_value = "block")]
    policy: Policy,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 1024)]
    queries: usize,
    #[arg(long, default_value_t = 10_000_000)]
    tuples: usize,
    /// Fraction of tuples each query selects.
    #[arg(long, default_value_t = 0.0001)]
    selectivity: f64,
    #[arg(long, default_value = "sum")]
    agg: Aggregate,
    #[arg(long, env = "AIL_SEED", default_value_t = 42)]
    seed: u64,
    /// Initial run size for merge and hybrid; defaults to a quarter of the column.
    #[arg(long)]
    run_capacity: Option<usize>,
    /// Same as --latch none; single client only.
    #[arg(long, conflicts_with = "latch")]
    disable_cc: bool,
    /// Binary file of little-endian i64 keys to use instead of generated data.
    #[arg(long)]
    column_file: Option<PathBuf>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig {
            n_tuples: self.tuples,
            method: self.method,
            latching: if self.disable_cc { Latching::None } else { self.latch },
            policy: self.policy,
            clients: self.clients,
            total_queries: self.queries,
            selectivity: self.selectivity,
            agg: self.agg,
            seed: self.seed,
            run_capacity: self.run_capacity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn prepare(&self, cfg: ExperimentConfig) -> Result<Experiment> {
        Ok(match &self.column_file {
            Some(path) => Experiment::with_column(cfg, load_column(path)?)?,
            None => Experiment::prepare(cfg)?,
        })
    }
}

fn load_column(path: &Path) -> Result<Column> {
    Column::load(ColumnId(0), path).with_context(|| format!("loading column from {}", path.display()))
}

fn summary(r: &ExperimentResult) -> String {
    let c = &r.config;
    format!(
        "{} latch={} policy={} clients={} queries={} tuples={}: {:.3} s, {:.1} queries/s",
        c.method,
        c.latching,
        c.policy,
        c.clients,
        r.metrics.len(),
        c.n_tuples,
        r.elapsed_ns as f64 / 1e9,
        r.queries_per_second
    )
}

fn run(exp: &ExperimentArgs, out: Option<&Path>) -> Result<()> {
    let cfg = exp.config()?;
    let result = exp.prepare(cfg)?.run()?;
    eprintln!("{}", summary(&result));
    match out {
        Some(path) => emit_csv(&result, exp.column_file.as_deref(), path),
        None => write_csv(
            std::io::stdout().lock(),
            &RunMeta::from_result(&result, exp.column_file.as_deref()),
            &result.metrics,
        ),
    }
}

fn verify(exp: &ExperimentArgs, from: Option<&Path>) -> Result<()> {
    if let Some(path) = from {
        let file = read_csv(path)?;
        let cfg = file.meta.config;
        let column = match &file.meta.column_file {
            Some(f) => load_column(Path::new(f))?,
            None => ail_core::generate_column(cfg.n_tuples, cfg.seed),
        };
        let experiment = Experiment::with_column(cfg, column)?;
        if file.rows.len() != experiment.queries.len() {
            bail!(
                "{} holds {} results but its configuration issues {} queries",
                path.display(),
                file.rows.len(),
                experiment.queries.len()
            );
        }
        let expected = oracle_answers(&experiment.column, &experiment.queries);
        match check_results(&file.rows, &expected) {
            Ok(n) => println!("OK, {n} queries verified"),
            Err(d) => bail!("divergence: {d}"),
        }
        return Ok(());
    }
    let cfg = exp.config()?;
    let mut experiment = exp.prepare(cfg)?;
    let result = experiment.run()?;
    let report = verify_run(&mut experiment, &result);
    if !report.is_ok() {
        bail!("{report}");
    }
    println!("{report}");
    Ok(())
}

fn sweep(exp: &ExperimentArgs, axis: Axis, values: &[String], out_dir: &Path) -> Result<()> {
    let mut configs = Vec::new();
    for v in values {
        let mut e = exp.clone();
        match axis {
            Axis::Clients => e.clients = v.parse().with_context(|| format!("client count '{v}'"))?,
            Axis::Selectivity => e.selectivity = v.parse().with_context(|| format!("selectivity '{v}'"))?,
            Axis::Latch => {
                e.latch = v.parse().map_err(anyhow::Error::msg)?;
                e.disable_cc = false;
            }
        }
        let cfg = e.config().with_context(|| format!("sweep value {v}"))?;
        configs.push((v.clone(), cfg));
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let axis_name = match axis {
        Axis::Clients => "clients",
        Axis::Selectivity => "selectivity",
        Axis::Latch => "latch",
    };
    for (v, cfg) in configs {
        let result = exp.prepare(cfg)?.run()?;
        let path = out_dir.join(format!("{}_{}_{axis_name}-{v}.csv", cfg.method, cfg.latching));
        emit_csv(&result, exp.column_file.as_deref(), &path)?;
        println!("{} -> {}", summary(&result), path.display());
    }
    Ok(())
}

fn plot(fig: Figure, out: &Path, csvs: &[PathBuf]) -> Result<()> {
    let runs = csvs.iter().map(|p| read_csv(p)).collect::<Result<Vec<_>>>()?;
    let (chart, warnings) = figure(fig, &runs);
    for w in warnings {
        eprintln!("warning: {w}");
    }
    std::fs::write(out, render_svg(&chart)).with_context(|| format!("writing {}", out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { exp, out } => run(exp, out.as_deref()),
        Command::Verify { exp, from } => verify(exp, from.as_deref()),
        Command::Sweep {
            exp,
            axis,
            values,
            out_dir,
        } => sweep(exp, *axis, values, out_dir),
        Command::Plot { figure, out, csvs } => plot(*figure, out, csvs),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<ail_core::Error>(), Some(ail_core::Error::InvalidConfig(_))));
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
