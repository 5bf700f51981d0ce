//! `volley`: fit, check and use the volleyball results model from the
//! command line.
//!
//! Exit codes: 0 success, 1 validation or fatal sampler failure, 2 I/O or
//! parse error, 3 invalid configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use volley_core::data::SchemaVariant;
use volley_core::model::PriorVariant;
use volley_core::predictive::CovariatePolicy;
use volley_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "volley", version, about = "Bayesian volleyball results model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a season file and report every inconsistent row.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemaArg::Table1)]
        schema: SchemaArg,
        /// Write a copy with d_s/d_m recomputed from the set counts.
        #[arg(long, value_name = "FILE")]
        repair_out: Option<PathBuf>,
    },
    /// Run the sampler and write traces, summaries and a run manifest.
    Fit(FitArgs),
    /// Summarize posterior draws from trace files or a fit directory.
    Summarize {
        /// Trace files, or one directory holding them.
        #[arg(long, required = true, num_args = 1..)]
        traces: Vec<PathBuf>,
        #[arg(long, value_enum)]
        prior: Option<PriorArg>,
        /// Comma-separated groups (default, attack, defence, home, constant,
        /// all) or parameter names and prefixes.
        #[arg(long, default_value = "default")]
        select: String,
        /// Output file (`.json` for JSON, CSV otherwise); stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicate seasons from the posterior: league tables, rank
    /// probabilities and cumulative points.
    Predict {
        /// Trace files, or one directory holding them.
        #[arg(long, required = true, num_args = 1..)]
        traces: Vec<PathBuf>,
        #[arg(long, value_enum)]
        prior: Option<PriorArg>,
        /// Fixture list (home_team, away_team and optional efficiencies).
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Season whose schedule and results to use; defaults to the fitted
        /// data recorded in the manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        schema: Option<SchemaArg>,
        #[arg(long)]
        n_rep: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Covariates for replicated matches.
        #[arg(long, value_enum, default_value_t = CovariateArg::Zero)]
        covariates: CovariateArg,
    },
    /// Write a synthetic season drawn from the model.
    Simulate {
        #[arg(long, default_value_t = 12)]
        teams: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FitArgs {
    /// JSON run configuration or a previous fit manifest; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    schema: Option<SchemaArg>,
    #[arg(long, value_enum)]
    prior: Option<PriorArg>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replicates for a later `predict` (recorded in the manifest).
    #[arg(long)]
    n_rep: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute inconsistent d_s/d_m from the set counts before fitting.
    #[arg(long)]
    repair: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Table1,
    RawCounts,
}

impl From<SchemaArg> for SchemaVariant {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::Table1 => SchemaVariant::Table1,
            SchemaArg::RawCounts => SchemaVariant::RawCounts,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Basic,
    ScaledIw,
}

impl From<PriorArg> for PriorVariant {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Basic => PriorVariant::Basic,
            PriorArg::ScaledIw => PriorVariant::ScaledIw,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CovariateArg {
    Zero,
    Observed,
}

impl FitArgs {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let flags = RunConfig {
            data: self.data.clone(),
            schema: self.schema.map(Into::into),
            prior: self.prior.map(Into::into),
            chains: self.chains,
            iters: self.iters,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            n_rep: self.n_rep,
            out: self.out.clone(),
            repair: self.repair.then_some(true),
            ..Default::default()
        };
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(flags))
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Validate { data, schema, repair_out } => {
            commands::validate(&data, schema.into(), repair_out.as_deref())
        }
        Command::Fit(args) => commands::fit(args.run_config()?),
        Command::Summarize { traces, prior, select, out } => {
            commands::summarize_cmd(&traces, prior.map(Into::into), &select, out.as_deref())
        }
        Command::Predict { traces, prior, fixtures, data, schema, n_rep, seed, out, covariates } => {
            commands::predict(commands::PredictOptions {
                traces,
                prior: prior.map(Into::into),
                fixtures,
                data,
                schema: schema.map(Into::into),
                n_rep,
                seed,
                out,
                covariates: match covariates {
                    CovariateArg::Zero => CovariatePolicy::Zero,
                    CovariateArg::Observed => CovariatePolicy::Observed,
                },
            })
        }
        Command::Simulate { teams, seed, out } => commands::simulate(teams, seed, out.as_deref()),
    }
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::MissingColumn(_)
        | Error::DuplicateMatchId(_)
        | Error::NoMatches
        | Error::TooFewTeams(_) => 2,
        Error::Config(_) | Error::UnknownParameter(_) => 3,
        Error::Sampler { source, .. } => match core_exit_code(source) {
            3 => 3,
            _ => 1,
        },
        _ => 1,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_exit_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
