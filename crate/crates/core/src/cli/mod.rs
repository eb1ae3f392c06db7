//! Command-line driver. Every subcommand reads the same run config; `run`
//! executes its stage plan, the others run single tasks directly.
//!
//! Exit codes: 0 success, 1 task failure, 2 config or usage error.

pub mod config;
pub mod tasks;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::Value;

pub use config::{ConfigError, RunConfig, BUILTIN_TASKS};
pub use tasks::{stored_report, ConfigTasks};

use crate::fridgesim::{simulate_fleet, SimConfig};
use crate::orchestrator::{
    BuiltinTasks, ContextBase, Orchestrator, StageName, WorkerContext, ENV_CONFIG_PATH, ENV_STORE_PATH,
};
use crate::pipelines::render_table;
use crate::telemetry::{write_telemetry_csv, ColumnMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coldchain", version, about = "Staged ML pipelines for refrigeration telemetry")]
pub struct Cli {
    /// Run config (JSON). Falls back to $CONFIG_PATH.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store directory; overrides the config. Falls back to $STORE_PATH.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write simulated telemetry and work orders as CSV.
    Simulate {
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Load telemetry and work orders into the store.
    Ingest {
        #[arg(long)]
        telemetry: Option<PathBuf>,
        #[arg(long)]
        work_orders: Option<PathBuf>,
    },
    /// Clean, extract and split both datasets, then index them.
    Wrangle,
    /// Train the configured models.
    Learn {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        lead: Option<f64>,
    },
    /// Predict for every fridge with the latest models.
    Infer,
    /// Choose fridges to switch off for the configured event.
    Select,
    /// Score the models on their test splits and print the report.
    Report,
    /// Execute the config's stage plan.
    Run,
    /// Parse and check the config without running anything.
    ValidateConfig,
    /// Run one built-in task as an orchestrator worker.
    Task {
        name: String,
        #[arg(long)]
        pe_index: Option<usize>,
        #[arg(long)]
        pe_total: Option<usize>,
        #[arg(long)]
        window_width: Option<usize>,
        #[arg(long)]
        stage: Option<String>,
        /// `key=<json>`; bare strings are taken literally.
        #[arg(long = "arg")]
        args: Vec<String>,
    },
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Task(e)) => {
            eprintln!("error: {e}");
            EXIT_TASK_FAILED
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Task(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn init_logging(level: &str, verbose: bool) {
    let level = if verbose { "debug" } else { level };
    let _ = env_logger::Builder::new().parse_filters(level).format_target(false).try_init();
}

fn config_path(cli: &Cli) -> Option<PathBuf> {
    cli.config.clone().or_else(|| std::env::var_os(ENV_CONFIG_PATH).map(PathBuf::from))
}

fn store_override(cli: &Cli) -> Option<PathBuf> {
    cli.store.clone().or_else(|| std::env::var_os(ENV_STORE_PATH).map(PathBuf::from))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = config_path(cli).ok_or(ConfigError::Missing)?;
    let config = RunConfig::load(&path)?.with_seed(cli.seed).with_store(store_override(cli));
    init_logging(&config.log_level, cli.verbose);
    Ok(config)
}

fn parse_arg(raw: &str) -> Result<(String, Value), Failure> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("--arg expects key=value, got `{raw}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.to_owned(), value))
}

/// Runs tasks one after another in this process, echoing their logs.
fn run_direct(tasks: &ConfigTasks, stage: StageName, names: &[&str], args: &BTreeMap<String, Value>) -> Result<(), Failure> {
    let mut ctx = config::direct_context(&tasks.config, stage);
    ctx.extra_args = args.clone();
    let mut out = std::io::stdout();
    for name in names {
        log::info!("task {name}");
        tasks.run(name, &ctx, &mut out).map_err(|e| Failure::Task(format!("{name}: {e}")))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { out } => {
            let sim = match config_path(&cli) {
                Some(p) => {
                    let c = RunConfig::load(&p)?.with_seed(cli.seed);
                    init_logging(&c.log_level, cli.verbose);
                    c.simulator.ok_or_else(|| Failure::Config("config has no simulator section".into()))?
                }
                None => {
                    init_logging("info", cli.verbose);
                    SimConfig {
                        seed: cli.seed.unwrap_or(0),
                        ..SimConfig::default()
                    }
                }
            };
            let output = simulate_fleet(&sim).map_err(|e| Failure::Config(e.to_string()))?;
            let io = |e: std::io::Error| Failure::Task(format!("{}: {e}", out.display()));
            fs::create_dir_all(out).map_err(io)?;
            fs::write(out.join("telemetry.csv"), write_telemetry_csv(&output.records, &ColumnMap::default())).map_err(io)?;
            let mut w = csv::Writer::from_path(out.join("work_orders.csv")).map_err(|e| Failure::Task(e.to_string()))?;
            for order in &output.work_orders {
                w.serialize(order).map_err(|e| Failure::Task(e.to_string()))?;
            }
            w.flush().map_err(io)?;
            println!(
                "{} readings from {} fridges, {} work orders -> {}",
                output.records.len(),
                output.specs.len(),
                output.work_orders.len(),
                out.display()
            );
            Ok(())
        }
        Command::ValidateConfig => {
            let config = load_config(&cli)?;
            println!(
                "config ok: {} stage(s), {} DSR model(s), {} fault model(s), store {}",
                config.stages.len(),
                config.dsr.models.len(),
                config.faults.models.len(),
                config.store_path.display()
            );
            Ok(())
        }
        Command::Ingest { telemetry, work_orders } => {
            let mut config = load_config(&cli)?;
            if telemetry.is_some() {
                config.ingest.telemetry_csv = telemetry.clone();
            }
            if work_orders.is_some() {
                config.ingest.work_orders_csv = work_orders.clone();
            }
            config.validate()?;
            run_direct(&ConfigTasks::new(config), StageName::Wrangle, &["ingest"], &BTreeMap::new())
        }
        Command::Wrangle => run_direct(
            &ConfigTasks::new(load_config(&cli)?),
            StageName::Wrangle,
            &["wrangle_dsr", "wrangle_faults", "index"],
            &BTreeMap::new(),
        ),
        Command::Learn { model, lead } => {
            let config = load_config(&cli)?;
            let mut args = BTreeMap::new();
            if let Some(l) = lead {
                args.insert("lead_seconds".into(), serde_json::json!(l));
            }
            let mut names = Vec::new();
            match model {
                Some(m) if config.dsr.models.contains_key(m) => names.push("learn_dsr"),
                Some(m) if config.faults.models.contains_key(m) => names.push("learn_faults"),
                Some(m) => return Err(Failure::Config(format!("model `{m}` is not configured"))),
                None => {
                    if !config.dsr.models.is_empty() {
                        names.push("learn_dsr");
                    }
                    if !config.faults.models.is_empty() {
                        names.push("learn_faults");
                    }
                }
            }
            if let Some(m) = model {
                args.insert("model".into(), Value::String(m.clone()));
            }
            run_direct(&ConfigTasks::new(config), StageName::Learn, &names, &args)
        }
        Command::Infer => {
            let config = load_config(&cli)?;
            let mut names = Vec::new();
            if !config.dsr.models.is_empty() {
                names.push("infer_dsr");
            }
            if !config.faults.models.is_empty() {
                names.push("infer_faults");
            }
            run_direct(&ConfigTasks::new(config), StageName::Infer, &names, &BTreeMap::new())
        }
        Command::Select => run_direct(&ConfigTasks::new(load_config(&cli)?), StageName::Infer, &["select_dsr"], &BTreeMap::new()),
        Command::Report => {
            let config = load_config(&cli)?;
            let tasks = ConfigTasks::new(config);
            tasks
                .report(&tasks.config.store_path, &mut std::io::sink())
                .map(|r| print!("{}", render_table(&r)))
                .map_err(|e| Failure::Task(format!("report: {e}")))
        }
        Command::Run => run_plan(load_config(&cli)?),
        Command::Task {
            name,
            pe_index,
            pe_total,
            window_width,
            stage,
            args,
        } => {
            let config = load_config(&cli)?;
            if !BUILTIN_TASKS.contains(&name.as_str()) {
                return Err(Failure::Config(format!("unknown built-in task `{name}`")));
            }
            // Flags win over the worker environment.
            let env_ctx = WorkerContext::from_env().map_err(|e| Failure::Config(e.to_string()))?;
            let mut ctx = env_ctx.unwrap_or_else(|| config::direct_context(&config, StageName::Wrangle));
            ctx.store_path = config.store_path.clone();
            if let Some(i) = pe_index {
                ctx.pe_index = *i;
            }
            if let Some(t) = pe_total {
                ctx.pe_total = *t;
            }
            if let Some(w) = window_width {
                ctx.window_width = *w;
            }
            if let Some(s) = stage {
                ctx.stage_name = StageName::parse(s).ok_or_else(|| Failure::Config(format!("unknown stage `{s}`")))?;
            }
            for raw in args {
                let (k, v) = parse_arg(raw)?;
                ctx.extra_args.insert(k, v);
            }
            let tasks = ConfigTasks::new(config);
            let mut out = std::io::stdout();
            tasks.run(name, &ctx, &mut out).map_err(|e| Failure::Task(format!("{name}: {e}")))?;
            out.flush().map_err(|e| Failure::Task(e.to_string()))
        }
    }
}

fn run_plan(config: RunConfig) -> Result<(), Failure> {
    if config.stages.is_empty() {
        return Err(Failure::Config("config has no stages".into()));
    }
    let base = ContextBase {
        store_path: config.store_path.clone(),
        config_path: config.source.clone(),
        log_dir: config.log_dir.clone(),
    };
    let stages = config.stages.clone();
    let stop = config.stop_on_failure;
    let tasks = Arc::new(ConfigTasks::new(config));
    let orchestrator = Orchestrator::new(tasks.clone(), base);
    let run = orchestrator.run_pipeline(&stages, stop).map_err(|e| Failure::Task(e.to_string()))?;
    for (i, r) in run.reports.iter().enumerate() {
        let span = r.scripts.iter().map(|s| s.ended_s).fold(0.0, f64::max) - r.scripts.iter().map(|s| s.started_s).fold(f64::INFINITY, f64::min);
        println!(
            "stage {i} {:<8} width {} scripts {:>2} {:?} ({:.1} s)",
            r.stage.as_str(),
            r.pool_width,
            r.scripts.len(),
            r.verdict,
            if span.is_finite() { span } else { 0.0 }
        );
        for s in r.scripts.iter().filter(|s| !s.status.is_success()) {
            if let crate::orchestrator::ScriptStatus::Failed { message, .. } = &s.status {
                println!("  pe {} {} failed: {message}", s.pe_index, s.label);
            }
        }
    }
    if let Some(report) = crate::docstore::Store::open_reader(&tasks.config.store_path).ok().as_ref().and_then(stored_report) {
        if run.succeeded() {
            print!("\n{}", render_table(&report));
        }
    }
    run.check().map_err(|e| Failure::Task(e.to_string()))
}
