mod commands;
pub mod config;
mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{ArgAction, Args, Parser, Subcommand};
use growthmix::fit::Optimizer;
use growthmix::growth::Frame;
use growthmix::mixture::ModelKind;
use growthmix::simulate::MembershipRule;
use serde::de::DeserializeOwned;

use config::RunConfig;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Bad input detected by the front end.
#[derive(Debug)]
pub struct Validation(pub String);

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

/// Outputs were written but an estimation did not converge.
#[derive(Debug)]
pub struct NotConverged(pub String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NotConverged {}

#[derive(Parser, Debug)]
#[command(name = "growthmix", version, about = "Growth mixture models with class-specific knots")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for mc and importance (0 = all cores).
    #[arg(long, global = true, env = "GROWTHMIX_THREADS")]
    threads: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Long CSV with columns id,time,y.
    #[arg(long)]
    outcomes: Option<PathBuf>,
    /// Wide CSV with columns id and one per covariate.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Columns to standardize (default: the expert covariates).
    #[arg(long, value_delimiter = ',')]
    standardize: Option<Vec<String>>,
    /// Keep every covariate on its original scale.
    #[arg(long, conflicts_with = "standardize")]
    no_standardize: bool,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// fmm, cp, gp or full.
    #[arg(long, value_parser = parse_enum::<ModelKind>)]
    kind: Option<ModelKind>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    gating: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    expert: Option<Vec<String>>,
    /// original or reparameterized.
    #[arg(long, value_parser = parse_enum::<Frame>)]
    frame: Option<Frame>,
    /// em or direct_quasi_newton.
    #[arg(long, value_parser = parse_enum::<Optimizer>)]
    optimizer: Option<Optimizer>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from a grid condition or a screening scenario.
    Simulate {
        #[arg(long)]
        condition: Option<usize>,
        /// Screening scenario 1..=8 (overrides --condition).
        #[arg(long)]
        scenario: Option<u8>,
        #[arg(long)]
        n: Option<usize>,
        /// multinomial or max_probability.
        #[arg(long, value_parser = parse_enum::<MembershipRule>)]
        membership: Option<MembershipRule>,
    },
    /// Fit one mixture model.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fit covariate-free mixtures for K = 1..=kmax and pick K by BIC.
    Enumerate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Monte Carlo study of one grid condition.
    Mc {
        #[arg(long)]
        condition: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Compare the correct models with the all-covariates-in-gating model.
    Misspec {
        #[arg(long)]
        condition: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Two-step and three-step gating regressions on fitted classes.
    Stepwise {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Gating covariates.
        #[arg(long = "covariate", value_delimiter = ',')]
        terms: Option<Vec<String>>,
    },
    /// Likelihood-split forest covariate importance.
    Importance {
        #[command(flatten)]
        data: DataArgs,
        /// Covariates to rank (default: all).
        #[arg(long = "covariate", value_delimiter = ',')]
        terms: Option<Vec<String>>,
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
    /// Print the simulation grid as CSV.
    Conditions,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Fit { .. } => "fit",
            Command::Enumerate { .. } => "enumerate",
            Command::Mc { .. } => "mc",
            Command::Misspec { .. } => "misspec",
            Command::Stepwise { .. } => "stepwise",
            Command::Importance { .. } => "importance",
            Command::Schema => "schema",
            Command::Conditions => "conditions",
        }
    }
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(p) = &d.outcomes {
        cfg.data.outcomes = Some(p.clone());
    }
    if let Some(p) = &d.covariates {
        cfg.data.covariates = Some(p.clone());
    }
    if let Some(s) = &d.standardize {
        cfg.data.standardize = Some(s.clone());
    }
    if d.no_standardize {
        cfg.data.standardize = Some(Vec::new());
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    let spec = &mut cfg.model;
    if let Some(k) = m.kind {
        spec.kind = k;
    }
    if let Some(k) = m.classes {
        spec.classes = k;
    }
    if let Some(g) = &m.gating {
        spec.gating_covariates = g.clone();
    }
    if let Some(e) = &m.expert {
        spec.expert_covariates = e.clone();
    }
    if let Some(f) = m.frame {
        spec.frame = f;
    }
    if let Some(o) = m.optimizer {
        cfg.fit.optimizer = o;
    }
}

/// Effective configuration: defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    match &cli.command {
        Command::Simulate {
            condition,
            scenario,
            n,
            membership,
        } => {
            if condition.is_some() {
                cfg.simulate.condition = *condition;
            }
            if scenario.is_some() {
                cfg.simulate.scenario = *scenario;
            }
            if n.is_some() {
                cfg.simulate.n = *n;
            }
            if let Some(m) = membership {
                cfg.simulate.membership = *m;
            }
        }
        Command::Fit { data, model } => {
            apply_data(&mut cfg, data);
            apply_model(&mut cfg, model);
        }
        Command::Enumerate { data, kmax } => {
            apply_data(&mut cfg, data);
            if let Some(k) = kmax {
                cfg.kmax = *k;
            }
        }
        Command::Mc { condition, reps } | Command::Misspec { condition, reps } => {
            if condition.is_some() {
                cfg.condition = *condition;
            }
            if let Some(r) = reps {
                cfg.mc.replications = *r;
            }
        }
        Command::Stepwise { data, model, terms } => {
            apply_data(&mut cfg, data);
            apply_model(&mut cfg, model);
            if let Some(c) = terms {
                cfg.stepwise.covariates = c.clone();
            }
        }
        Command::Importance { data, terms, trees } => {
            apply_data(&mut cfg, data);
            if let Some(c) = terms {
                cfg.importance.covariates = c.clone();
            }
            if let Some(t) = trees {
                cfg.importance.forest.trees = *t;
            }
        }
        Command::Schema | Command::Conditions => {}
    }
    cfg.propagate();
    Ok(cfg)
}

/// Maps an error chain to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Validation>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<NotConverged>() {
            return EXIT_NOT_CONVERGED;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<growthmix::Error>() {
            return match e {
                growthmix::Error::InvalidInput(_)
                | growthmix::Error::DegenerateClass { .. }
                | growthmix::Error::EmptyClass(_) => EXIT_VALIDATION,
                growthmix::Error::Numeric(_) | growthmix::Error::ReplicationBudget { .. } => EXIT_NOT_CONVERGED,
                growthmix::Error::Io(_) | growthmix::Error::Csv(_) | growthmix::Error::Json(_) => EXIT_IO,
            };
        }
    }
    1
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = resolve(&cli).and_then(|cfg| commands::dispatch(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
