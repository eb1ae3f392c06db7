//! Staged worker pool. Each stage's scripts run through a sliding window of
//! `pool_width` workers; the next stage starts only once every script of the
//! current one has finished, and never borrows its idle workers.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid stage `{stage}`: {reason}")]
    InvalidStage { stage: StageName, reason: String },
    #[error("stage `{stage}` failed: scripts {failed:?} did not succeed")]
    StageFailure { stage: StageName, failed: Vec<usize> },
    #[error("worker context: {0}")]
    BadContext(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Wrangle,
    Serve,
    Learn,
    Infer,
}

impl StageName {
    pub const ALL: [StageName; 4] = [StageName::Wrangle, StageName::Serve, StageName::Learn, StageName::Infer];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Wrangle => "wrangle",
            StageName::Serve => "serve",
            StageName::Learn => "learn",
            StageName::Infer => "infer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A task descriptor: exactly one of a built-in task name or an external
/// executable, plus per-script arguments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec: Option<PathBuf>,
    /// Extra command-line arguments for an external executable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub argv: Vec<String>,
    /// Key-value overrides handed to the worker as `extra_args`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, Value>,
}

impl ScriptSpec {
    pub fn builtin(name: impl Into<String>) -> Self {
        Self {
            builtin: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn external(program: impl Into<PathBuf>) -> Self {
        Self {
            exec: Some(program.into()),
            ..Self::default()
        }
    }

    pub fn with_arg(mut self, key: impl Into<String>, value: Value) -> Self {
        self.args.insert(key.into(), value);
        self
    }

    pub fn label(&self) -> String {
        match (&self.builtin, &self.exec) {
            (Some(b), _) => b.clone(),
            (None, Some(p)) => p.display().to_string(),
            (None, None) => "<empty>".into(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match (&self.builtin, &self.exec) {
            (Some(_), Some(_)) => Err("a script is either `builtin` or `exec`, not both".into()),
            (None, None) => Err("a script needs `builtin` or `exec`".into()),
            (Some(_), None) if !self.argv.is_empty() => Err("`argv` only applies to `exec` scripts".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: StageName,
    #[serde(default)]
    pub scripts: Vec<ScriptSpec>,
    pub pool_width: usize,
}

impl StageSpec {
    pub fn new(name: StageName, pool_width: usize, scripts: Vec<ScriptSpec>) -> Self {
        Self { name, scripts, pool_width }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let invalid = |reason: String| OrchestratorError::InvalidStage { stage: self.name, reason };
        if self.pool_width == 0 {
            return Err(invalid("pool_width must be at least 1".into()));
        }
        for (i, s) in self.scripts.iter().enumerate() {
            s.validate().map_err(|e| invalid(format!("script {i}: {e}")))?;
        }
        Ok(())
    }
}

pub const ENV_PE_INDEX: &str = "PE_INDEX";
pub const ENV_PE_TOTAL: &str = "PE_TOTAL";
pub const ENV_WINDOW_WIDTH: &str = "WINDOW_WIDTH";
pub const ENV_STAGE: &str = "STAGE";
pub const ENV_STORE_PATH: &str = "STORE_PATH";
pub const ENV_CONFIG_PATH: &str = "CONFIG_PATH";

/// What a worker knows about its place in the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerContext {
    pub pe_index: usize,
    pub pe_total: usize,
    pub window_width: usize,
    pub stage_name: StageName,
    pub config_path: Option<PathBuf>,
    pub store_path: PathBuf,
    pub extra_args: BTreeMap<String, Value>,
}

impl WorkerContext {
    pub fn env_vars(&self) -> Vec<(&'static str, String)> {
        let mut vars = vec![
            (ENV_PE_INDEX, self.pe_index.to_string()),
            (ENV_PE_TOTAL, self.pe_total.to_string()),
            (ENV_WINDOW_WIDTH, self.window_width.to_string()),
            (ENV_STAGE, self.stage_name.to_string()),
            (ENV_STORE_PATH, self.store_path.display().to_string()),
        ];
        if let Some(c) = &self.config_path {
            vars.push((ENV_CONFIG_PATH, c.display().to_string()));
        }
        vars
    }

    /// The same context as flags; each extra arg becomes `--arg key=<json>`.
    pub fn cli_flags(&self) -> Vec<String> {
        let mut flags = vec![
            "--pe-index".into(),
            self.pe_index.to_string(),
            "--pe-total".into(),
            self.pe_total.to_string(),
            "--window-width".into(),
            self.window_width.to_string(),
            "--stage".into(),
            self.stage_name.to_string(),
            "--store".into(),
            self.store_path.display().to_string(),
        ];
        if let Some(c) = &self.config_path {
            flags.extend(["--config".into(), c.display().to_string()]);
        }
        for (k, v) in &self.extra_args {
            flags.extend(["--arg".into(), format!("{k}={v}")]);
        }
        flags
    }

    /// Rebuilds a context from the worker environment, or `None` when the
    /// process was not started by the orchestrator.
    pub fn from_env() -> Result<Option<Self>, OrchestratorError> {
        Self::from_vars(|k| std::env::var(k).ok())
    }

    pub fn from_vars(get: impl Fn(&str) -> Option<String>) -> Result<Option<Self>, OrchestratorError> {
        let Some(pe_index) = get(ENV_PE_INDEX) else {
            return Ok(None);
        };
        let bad = |k: &str| OrchestratorError::BadContext(format!("missing or malformed {k}"));
        let num = |k: &str, v: Option<String>| v.and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| bad(k));
        let ctx = Self {
            pe_index: num(ENV_PE_INDEX, Some(pe_index))?,
            pe_total: num(ENV_PE_TOTAL, get(ENV_PE_TOTAL))?,
            window_width: num(ENV_WINDOW_WIDTH, get(ENV_WINDOW_WIDTH))?,
            stage_name: get(ENV_STAGE).and_then(|s| StageName::parse(&s)).ok_or_else(|| bad(ENV_STAGE))?,
            store_path: get(ENV_STORE_PATH).map(PathBuf::from).ok_or_else(|| bad(ENV_STORE_PATH))?,
            config_path: get(ENV_CONFIG_PATH).map(PathBuf::from),
            extra_args: BTreeMap::new(),
        };
        if ctx.pe_index >= ctx.pe_total {
            return Err(OrchestratorError::BadContext(format!(
                "{ENV_PE_INDEX} {} is not below {ENV_PE_TOTAL} {}",
                ctx.pe_index, ctx.pe_total
            )));
        }
        Ok(Some(ctx))
    }
}

/// Paths shared by every worker of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextBase {
    pub store_path: PathBuf,
    pub config_path: Option<PathBuf>,
    /// Where per-script logs go; `None` discards them.
    pub log_dir: Option<PathBuf>,
}

/// Executes built-in task names. Implementations must not share mutable
/// state between calls: workers talk only through the store and exit status.
pub trait BuiltinTasks: Send + Sync {
    fn run(&self, name: &str, ctx: &WorkerContext, log: &mut dyn Write) -> Result<(), String>;
}

/// A registry with no built-ins; only external scripts can run.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoBuiltins;

impl BuiltinTasks for NoBuiltins {
    fn run(&self, name: &str, _: &WorkerContext, _: &mut dyn Write) -> Result<(), String> {
        Err(format!("unknown built-in task `{name}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ScriptStatus {
    Success,
    Failed { code: Option<i32>, message: String },
}

impl ScriptStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, ScriptStatus::Success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScriptReport {
    pub pe_index: usize,
    pub label: String,
    /// Seconds since the pipeline started.
    pub started_s: f64,
    pub ended_s: f64,
    pub status: ScriptStatus,
    pub log_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: StageName,
    pub pool_width: usize,
    /// One entry per script, in script order.
    pub scripts: Vec<ScriptReport>,
    pub verdict: Verdict,
}

impl StageReport {
    pub fn failed(&self) -> Vec<usize> {
        self.scripts.iter().filter(|s| !s.status.is_success()).map(|s| s.pe_index).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    End,
}

/// One entry of the scheduler's event log, in the order the control loop
/// observed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Event {
    pub seq: usize,
    pub stage_index: usize,
    pub stage: StageName,
    pub pe_index: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRun {
    pub reports: Vec<StageReport>,
    pub events: Vec<Event>,
    /// Index of the stage whose failure halted the run.
    pub halted_at: Option<usize>,
}

impl PipelineRun {
    pub fn succeeded(&self) -> bool {
        self.reports.iter().all(|r| r.verdict == Verdict::Success) && self.halted_at.is_none()
    }

    /// The first failed stage as an error.
    pub fn check(&self) -> Result<(), OrchestratorError> {
        match self.reports.iter().find(|r| r.verdict == Verdict::Failure) {
            Some(r) => Err(OrchestratorError::StageFailure {
                stage: r.stage,
                failed: r.failed(),
            }),
            None => Ok(()),
        }
    }
}

pub struct Orchestrator {
    builtins: Arc<dyn BuiltinTasks>,
    base: ContextBase,
    clock: Instant,
}

struct Done {
    pe_index: usize,
    status: ScriptStatus,
}

impl Orchestrator {
    pub fn new(builtins: Arc<dyn BuiltinTasks>, base: ContextBase) -> Self {
        Self {
            builtins,
            base,
            clock: Instant::now(),
        }
    }

    pub fn base(&self) -> &ContextBase {
        &self.base
    }

    /// Runs every stage in order behind a hard barrier. With
    /// `stop_on_failure`, a failed stage ends the run.
    pub fn run_pipeline(&self, stages: &[StageSpec], stop_on_failure: bool) -> Result<PipelineRun, OrchestratorError> {
        for s in stages {
            s.validate()?;
        }
        let mut run = PipelineRun {
            reports: Vec::new(),
            events: Vec::new(),
            halted_at: None,
        };
        for (i, stage) in stages.iter().enumerate() {
            let report = self.run_stage_logged(i, stage, &mut run.events)?;
            let failed = report.verdict == Verdict::Failure;
            run.reports.push(report);
            if failed && stop_on_failure {
                log::warn!("stage {i} ({}) failed; halting", stage.name);
                run.halted_at = Some(i);
                break;
            }
        }
        Ok(run)
    }

    pub fn run_stage(&self, stage: &StageSpec) -> Result<StageReport, OrchestratorError> {
        stage.validate()?;
        self.run_stage_logged(0, stage, &mut Vec::new())
    }

    fn context(&self, stage: &StageSpec, pe_index: usize) -> WorkerContext {
        WorkerContext {
            pe_index,
            pe_total: stage.scripts.len(),
            window_width: stage.pool_width,
            stage_name: stage.name,
            config_path: self.base.config_path.clone(),
            store_path: self.base.store_path.clone(),
            extra_args: stage.scripts[pe_index].args.clone(),
        }
    }

    fn log_path(&self, stage_index: usize, stage: &StageSpec, pe_index: usize) -> Option<PathBuf> {
        self.base
            .log_dir
            .as_ref()
            .map(|d| d.join(format!("{stage_index:02}-{}-{pe_index:02}.log", stage.name)))
    }

    fn run_stage_logged(&self, stage_index: usize, stage: &StageSpec, events: &mut Vec<Event>) -> Result<StageReport, OrchestratorError> {
        if let Some(dir) = &self.base.log_dir {
            std::fs::create_dir_all(dir)?;
        }
        let n = stage.scripts.len();
        let mut pending: VecDeque<usize> = (0..n).collect();
        let mut started = vec![0.0; n];
        let mut slots: Vec<Option<ScriptReport>> = vec![None; n];
        let (tx, rx) = mpsc::channel::<Done>();
        let mut active = 0usize;
        let push = |events: &mut Vec<Event>, pe_index, kind| {
            events.push(Event {
                seq: events.len(),
                stage_index,
                stage: stage.name,
                pe_index,
                kind,
            })
        };

        loop {
            while active < stage.pool_width {
                let Some(i) = pending.pop_front() else { break };
                started[i] = self.clock.elapsed().as_secs_f64();
                push(events, i, EventKind::Start);
                log::debug!("{}[{i}] start: {}", stage.name, stage.scripts[i].label());
                self.spawn(stage.scripts[i].clone(), self.context(stage, i), self.log_path(stage_index, stage, i), tx.clone());
                active += 1;
            }
            if active == 0 {
                break;
            }
            let done = rx.recv().expect("workers always report");
            active -= 1;
            push(events, done.pe_index, EventKind::End);
            if let ScriptStatus::Failed { message, .. } = &done.status {
                log::warn!("{}[{}] failed: {message}", stage.name, done.pe_index);
            }
            slots[done.pe_index] = Some(ScriptReport {
                pe_index: done.pe_index,
                label: stage.scripts[done.pe_index].label(),
                started_s: started[done.pe_index],
                ended_s: self.clock.elapsed().as_secs_f64(),
                status: done.status,
                log_path: self.log_path(stage_index, stage, done.pe_index),
            });
        }
        let scripts: Vec<ScriptReport> = slots.into_iter().map(|s| s.expect("every script reported")).collect();
        let verdict = if scripts.iter().all(|s| s.status.is_success()) {
            Verdict::Success
        } else {
            Verdict::Failure
        };
        Ok(StageReport {
            stage: stage.name,
            pool_width: stage.pool_width,
            scripts,
            verdict,
        })
    }

    fn spawn(&self, script: ScriptSpec, ctx: WorkerContext, log_path: Option<PathBuf>, tx: mpsc::Sender<Done>) {
        let builtins = Arc::clone(&self.builtins);
        thread::spawn(move || {
            let pe_index = ctx.pe_index;
            let status = match catch_unwind(AssertUnwindSafe(|| execute(&*builtins, &script, &ctx, log_path.as_deref()))) {
                Ok(status) => status,
                Err(panic) => ScriptStatus::Failed {
                    code: None,
                    message: panic_message(&panic),
                },
            };
            // The receiver outlives every worker of its stage.
            let _ = tx.send(Done { pe_index, status });
        });
    }
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}

fn execute(builtins: &dyn BuiltinTasks, script: &ScriptSpec, ctx: &WorkerContext, log_path: Option<&Path>) -> ScriptStatus {
    let failed = |message: String| ScriptStatus::Failed { code: None, message };
    let log_file = match log_path.map(File::create).transpose() {
        Ok(f) => f,
        Err(e) => return failed(format!("cannot create log: {e}")),
    };
    if let Some(name) = &script.builtin {
        let mut sink: Box<dyn Write> = match log_file {
            Some(f) => Box::new(f),
            None => Box::new(io::sink()),
        };
        return match builtins.run(name, ctx, &mut *sink) {
            Ok(()) => ScriptStatus::Success,
            Err(message) => {
                let _ = writeln!(sink, "error: {message}");
                ScriptStatus::Failed { code: Some(1), message }
            }
        };
    }
    let program = script.exec.as_ref().expect("validated script");
    let (stdout, stderr) = match &log_file {
        Some(f) => match (f.try_clone(), f.try_clone()) {
            (Ok(a), Ok(b)) => (Stdio::from(a), Stdio::from(b)),
            _ => return failed("cannot share log handle".into()),
        },
        None => (Stdio::null(), Stdio::null()),
    };
    let status = Command::new(program)
        .args(&script.argv)
        .args(ctx.cli_flags())
        .envs(ctx.env_vars())
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .status();
    match status {
        Ok(s) if s.success() => ScriptStatus::Success,
        Ok(s) => ScriptStatus::Failed {
            code: s.code(),
            message: format!("{} exited with {s}", program.display()),
        },
        Err(e) => failed(format!("cannot start {}: {e}", program.display())),
    }
}

/// Highest number of scripts simultaneously active in each stage of `events`.
pub fn max_concurrency(events: &[Event]) -> BTreeMap<usize, usize> {
    let mut active: BTreeMap<usize, usize> = BTreeMap::new();
    let mut peak: BTreeMap<usize, usize> = BTreeMap::new();
    for e in events {
        let a = active.entry(e.stage_index).or_default();
        match e.kind {
            EventKind::Start => *a += 1,
            EventKind::End => *a = a.saturating_sub(1),
        }
        let p = peak.entry(e.stage_index).or_default();
        *p = (*p).max(*a);
    }
    peak
}
