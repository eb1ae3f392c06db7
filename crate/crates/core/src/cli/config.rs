//! The declarative run configuration: one JSON document with a section per
//! stage of work. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::docstore::AggregationPipeline;
use crate::fridgesim::{DsrEvent, SimConfig};
use crate::neural::TrainHyper;
use crate::orchestrator::{StageSpec, WorkerContext};
use crate::pipelines::NetConfig;
use crate::telemetry::{ColumnMap, Setpoints};
use crate::wrangler::{CleanerConfig, ExtractionConfig, FaultConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{path}: bad aggregation pipeline: {message}")]
    Pipeline { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("no config given: pass --config or set CONFIG_PATH")]
    Missing,
}

/// Names of the tasks a stage script may reference with `builtin`.
pub const BUILTIN_TASKS: &[&str] = &[
    "ingest",
    "wrangle_dsr",
    "wrangle_faults",
    "index",
    "learn_dsr",
    "learn_faults",
    "infer_dsr",
    "infer_faults",
    "select_dsr",
    "report",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    /// Telemetry CSV; when absent the simulator section supplies the data.
    pub telemetry_csv: Option<PathBuf>,
    /// CSV with `raw_text` and `timestamp` columns.
    pub work_orders_csv: Option<PathBuf>,
    pub columns: ColumnMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WrangleSection {
    pub cleaner: CleanerConfig,
    pub extraction: ExtractionConfig,
    pub setpoints: Setpoints,
    /// Every defrost run yields one example per lead.
    pub leads: Vec<f64>,
    pub test_fraction: f64,
    pub faults: FaultConfig,
}

impl Default for WrangleSection {
    fn default() -> Self {
        Self {
            cleaner: CleanerConfig::default(),
            extraction: ExtractionConfig::default(),
            setpoints: Setpoints { on: 4.0, off: 1.0 },
            leads: vec![0.0, 120.0],
            test_fraction: 0.1,
            faults: FaultConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub net: NetConfig,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventSection {
    /// Defaults to one cadence step after the last cleaned reading.
    pub start_ts: Option<f64>,
    pub primary_s: f64,
    pub secondary_s: f64,
    pub target_shed_kw: f64,
}

impl Default for EventSection {
    fn default() -> Self {
        let e = DsrEvent::new(0.0, 5.0);
        Self {
            start_ts: None,
            primary_s: e.primary_s,
            secondary_s: e.secondary_s,
            target_shed_kw: e.target_shed_kw,
        }
    }
}

impl EventSection {
    pub fn event(&self, start_ts: f64) -> DsrEvent {
        DsrEvent {
            start_ts,
            primary_s: self.primary_s,
            secondary_s: self.secondary_s,
            target_shed_kw: self.target_shed_kw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsrSection {
    pub train_pipeline: PathBuf,
    pub test_pipeline: PathBuf,
    pub models: BTreeMap<String, ModelSection>,
    /// Model and lead whose predictions drive candidate selection.
    pub infer_model: Option<String>,
    pub infer_lead_seconds: f64,
    /// Restrict inference to these fridges; all cleaned fridges otherwise.
    pub fridges: Option<Vec<String>>,
    pub event: EventSection,
    pub safety_margin_s: f64,
    /// Rated power per fridge; read from telemetry when absent.
    pub powers: Option<BTreeMap<String, f64>>,
    pub base_lead_seconds: f64,
    pub ahead_lead_seconds: f64,
}

impl Default for DsrSection {
    fn default() -> Self {
        Self {
            train_pipeline: "pipelines/dsr_train.json".into(),
            test_pipeline: "pipelines/dsr_test.json".into(),
            models: BTreeMap::new(),
            infer_model: None,
            infer_lead_seconds: 120.0,
            fridges: None,
            event: EventSection::default(),
            safety_margin_s: 300.0,
            powers: None,
            base_lead_seconds: 0.0,
            ahead_lead_seconds: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSection {
    pub train_pipeline: PathBuf,
    pub test_pipeline: PathBuf,
    pub models: BTreeMap<String, ModelSection>,
    pub infer_model: Option<String>,
    /// Defaults to the DSR event start.
    pub as_of_ts: Option<f64>,
    pub fridges: Option<Vec<String>>,
}

impl Default for FaultSection {
    fn default() -> Self {
        Self {
            train_pipeline: "pipelines/faults_train.json".into(),
            test_pipeline: "pipelines/faults_test.json".into(),
            models: BTreeMap::new(),
            infer_model: None,
            as_of_ts: None,
            fridges: None,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_log_level() -> String {
    "info".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub store_path: PathBuf,
    /// Every random draw in a run derives from this seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    /// Where `report` writes the report document as JSON.
    #[serde(default)]
    pub report_path: Option<PathBuf>,
    #[serde(default)]
    pub simulator: Option<SimConfig>,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub wrangle: WrangleSection,
    #[serde(default)]
    pub dsr: DsrSection,
    #[serde(default)]
    pub faults: FaultSection,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_true")]
    pub stop_on_failure: bool,
    /// Set by [`RunConfig::load`]; not part of the file.
    #[serde(skip)]
    pub source: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut config: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        config.source = Some(path.to_owned());
        Ok(config)
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let config = Self::parse(&text, path)?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.store_path);
        for p in [&mut self.log_dir, &mut self.report_path, &mut self.ingest.telemetry_csv, &mut self.ingest.work_orders_csv]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        for p in [
            &mut self.dsr.train_pipeline,
            &mut self.dsr.test_pipeline,
            &mut self.faults.train_pipeline,
            &mut self.faults.test_pipeline,
        ] {
            resolve(base, p);
        }
        for stage in &mut self.stages {
            for script in &mut stage.scripts {
                if let Some(exec) = &mut script.exec {
                    // Bare program names are looked up on PATH.
                    if exec.components().count() > 1 {
                        resolve(base, exec);
                    }
                }
            }
        }
    }

    /// Applies the `--seed` override and pushes the run seed into every
    /// section that draws random numbers.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(sim) = &mut self.simulator {
            sim.seed = self.seed;
        }
        self.wrangle.faults.seed = self.seed;
        for m in self.dsr.models.values_mut().chain(self.faults.models.values_mut()) {
            m.hyper.seed = self.seed;
        }
        self
    }

    pub fn with_store(mut self, store: Option<PathBuf>) -> Self {
        if let Some(s) = store {
            self.store_path = s;
        }
        self
    }

    pub fn load_pipeline(path: &Path) -> Result<AggregationPipeline, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        AggregationPipeline::parse(&text).map_err(|e| ConfigError::Pipeline {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Some(sim) = &self.simulator {
            if let Err(e) = sim.validate() {
                return invalid(format!("simulator: {e}"));
            }
        }
        for p in [&self.ingest.telemetry_csv, &self.ingest.work_orders_csv].into_iter().flatten() {
            if !p.is_file() {
                return invalid(format!("ingest: {} does not exist", p.display()));
            }
        }
        if self.wrangle.leads.is_empty() || self.wrangle.leads.iter().any(|l| !(*l >= 0.0)) {
            return invalid("wrangle.leads must be non-negative seconds".into());
        }
        if !(self.wrangle.test_fraction > 0.0 && self.wrangle.test_fraction < 1.0) {
            return invalid("wrangle.test_fraction must lie in (0, 1)".into());
        }
        for lead in [self.dsr.base_lead_seconds, self.dsr.ahead_lead_seconds, self.dsr.infer_lead_seconds] {
            if !self.wrangle.leads.contains(&lead) {
                return invalid(format!("dsr lead {lead} s is not among wrangle.leads"));
            }
        }
        if let Some(m) = &self.dsr.infer_model {
            if !self.dsr.models.contains_key(m) {
                return invalid(format!("dsr.infer_model `{m}` is not in dsr.models"));
            }
        }
        if let Some(m) = &self.faults.infer_model {
            if !self.faults.models.contains_key(m) {
                return invalid(format!("faults.infer_model `{m}` is not in faults.models"));
            }
        }
        let needs = |task: &str| {
            self.stages
                .iter()
                .flat_map(|s| &s.scripts)
                .any(|s| s.builtin.as_deref() == Some(task))
        };
        let mut pipelines = Vec::new();
        if needs("learn_dsr") || needs("report") {
            pipelines.extend([&self.dsr.train_pipeline, &self.dsr.test_pipeline]);
        }
        if needs("learn_faults") || needs("report") {
            pipelines.extend([&self.faults.train_pipeline, &self.faults.test_pipeline]);
        }
        for p in pipelines {
            Self::load_pipeline(p)?;
        }
        if needs("ingest") && self.ingest.telemetry_csv.is_none() && self.simulator.is_none() {
            return invalid("the ingest task needs ingest.telemetry_csv or a simulator section".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            stage.validate().map_err(|e| ConfigError::Invalid(format!("stages[{i}]: {e}")))?;
            for (j, script) in stage.scripts.iter().enumerate() {
                let at = format!("stages[{i}].scripts[{j}]");
                if let Some(name) = &script.builtin {
                    if !BUILTIN_TASKS.contains(&name.as_str()) {
                        return invalid(format!("{at}: unknown built-in task `{name}`"));
                    }
                    self.check_model_arg(name, script.args.get("model"), &at)?;
                }
                if let Some(exec) = &script.exec {
                    if exec.components().count() > 1 && !exec.is_file() {
                        return invalid(format!("{at}: {} does not exist", exec.display()));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_model_arg(&self, task: &str, model: Option<&serde_json::Value>, at: &str) -> Result<(), ConfigError> {
        let models = match task {
            "learn_dsr" | "infer_dsr" => &self.dsr.models,
            "learn_faults" | "infer_faults" => &self.faults.models,
            _ => return Ok(()),
        };
        match model {
            Some(v) => match v.as_str() {
                Some(name) if models.contains_key(name) => Ok(()),
                _ => Err(ConfigError::Invalid(format!("{at}: model {v} is not configured for {task}"))),
            },
            None if models.is_empty() => Err(ConfigError::Invalid(format!("{at}: {task} has no configured models"))),
            None => Ok(()),
        }
    }
}

/// A worker context for tasks run directly from the command line.
pub fn direct_context(config: &RunConfig, stage: crate::orchestrator::StageName) -> WorkerContext {
    WorkerContext {
        pe_index: 0,
        pe_total: 1,
        window_width: 1,
        stage_name: stage,
        config_path: config.source.clone(),
        store_path: config.store_path.clone(),
        extra_args: BTreeMap::new(),
    }
}
