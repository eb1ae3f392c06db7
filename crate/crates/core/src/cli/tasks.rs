//! Built-in tasks: each reads its section of the run config, does its work
//! against the store and writes results back.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::config::{ModelSection, RunConfig};
use crate::docstore::{Document, Store};
use crate::fridgesim::simulate_fleet;
use crate::orchestrator::{BuiltinTasks, WorkerContext};
use crate::pipelines::{
    self, build_report, fridge_ids, fridge_powers, infer_dsr, infer_faults, ingest_records, learn_dsr, learn_faults,
    render_table, select_dsr_candidates, wrangle_dsr, wrangle_faults, CandidateSelection, DsrPrediction, LearnRequest, Report,
    ReportRequest, StoredModel, CLEAN_TELEMETRY_COLLECTION, DSR_PREDICTIONS_COLLECTION, FAULT_PREDICTIONS_COLLECTION,
    REPORTS_COLLECTION, SELECTIONS_COLLECTION, TEST_PREDICTIONS_COLLECTION,
};
use crate::telemetry::parse_telemetry_csv;
use crate::wrangler::{WorkOrder, DEFROST_COLLECTION, FAULT_COLLECTION};

type TaskResult = Result<(), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// The built-in task registry for one run configuration.
#[derive(Debug, Clone)]
pub struct ConfigTasks {
    pub config: RunConfig,
}

impl BuiltinTasks for ConfigTasks {
    fn run(&self, name: &str, ctx: &WorkerContext, log: &mut dyn Write) -> TaskResult {
        let store = ctx.store_path.as_path();
        match name {
            "ingest" => self.ingest(store, log),
            "wrangle_dsr" => self.wrangle_dsr(store, log),
            "wrangle_faults" => self.wrangle_faults(store, log),
            "index" => self.index(store, log),
            "learn_dsr" => self.learn_dsr(store, ctx, log),
            "learn_faults" => self.learn_faults(store, ctx, log),
            "infer_dsr" => self.infer_dsr(store, ctx, log),
            "infer_faults" => self.infer_faults(store, ctx, log),
            "select_dsr" => self.select_dsr(store, log).map(|_| ()),
            "report" => self.report(store, log).map(|_| ()),
            _ => Err(format!("unknown built-in task `{name}`")),
        }
    }
}

fn arg_str<'a>(ctx: &'a WorkerContext, key: &str) -> Option<&'a str> {
    ctx.extra_args.get(key).and_then(Value::as_str)
}

fn arg_f64(ctx: &WorkerContext, key: &str) -> Result<Option<f64>, String> {
    match ctx.extra_args.get(key) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| format!("argument `{key}` must be a number, got {v}")),
    }
}

/// Picks the model named by the `model` argument, or every configured model.
fn chosen_models<'a>(
    models: &'a std::collections::BTreeMap<String, ModelSection>,
    ctx: &WorkerContext,
) -> Result<Vec<(&'a String, &'a ModelSection)>, String> {
    match arg_str(ctx, "model") {
        Some(name) => models
            .get_key_value(name)
            .map(|kv| vec![kv])
            .ok_or_else(|| format!("model `{name}` is not configured")),
        None if models.is_empty() => Err("no models configured".into()),
        None => Ok(models.iter().collect()),
    }
}

/// Replaces documents with matching ids and appends the rest.
fn upsert(store_path: &Path, collection: &str, docs: Vec<Document>) -> Result<(), String> {
    let mut store = Store::open_wait(store_path, pipelines::LOCK_TIMEOUT).map_err(err)?;
    let new_ids: BTreeSet<String> = docs.iter().filter_map(|d| d.id().map(str::to_owned)).collect();
    let mut all: Vec<Document> = store
        .documents(collection)
        .iter()
        .filter(|d| d.id().is_none_or(|id| !new_ids.contains(id)))
        .cloned()
        .collect();
    all.extend(docs);
    store.replace_collection(collection, all).map_err(err)?;
    Ok(())
}

fn read_work_orders(path: &Path) -> Result<Vec<WorkOrder>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<WorkOrder>, _>>()
        .map_err(|e| format!("{}: {e}", path.display()))
}

impl ConfigTasks {
    pub fn new(config: RunConfig) -> Self {
        Self { config }
    }

    fn ingest(&self, store: &Path, log: &mut dyn Write) -> TaskResult {
        let (records, orders) = match (&self.config.ingest.telemetry_csv, &self.config.simulator) {
            (Some(csv_path), _) => {
                let text = fs::read_to_string(csv_path).map_err(|e| format!("{}: {e}", csv_path.display()))?;
                let parsed = parse_telemetry_csv(&text, &self.config.ingest.columns).map_err(err)?;
                for r in parsed.rejects.iter().take(20) {
                    let _ = writeln!(log, "rejected row {}: {}", r.row, r.reason);
                }
                if parsed.rejects.len() > 20 {
                    let _ = writeln!(log, "... {} rejected rows in total", parsed.rejects.len());
                }
                let orders = match &self.config.ingest.work_orders_csv {
                    Some(p) => read_work_orders(p)?,
                    None => Vec::new(),
                };
                (parsed.records, orders)
            }
            (None, Some(sim)) => {
                let out = simulate_fleet(sim).map_err(err)?;
                (out.records, out.work_orders)
            }
            (None, None) => return Err("nothing to ingest: no telemetry CSV and no simulator section".into()),
        };
        let summary = ingest_records(store, &records, &orders).map_err(err)?;
        let _ = writeln!(log, "ingested {} readings and {} work orders", summary.telemetry, summary.work_orders);
        Ok(())
    }

    fn wrangle_dsr(&self, store: &Path, log: &mut dyn Write) -> TaskResult {
        let w = &self.config.wrangle;
        let s = wrangle_dsr(store, &w.cleaner, &w.extraction, w.setpoints, &w.leads, w.test_fraction, self.config.seed).map_err(err)?;
        let _ = writeln!(
            log,
            "cleaning: {:?}\nexamples per lead: {:?}, rejects {}, runs train/test {}/{}",
            s.cleaning, s.examples, s.rejects, s.train_runs, s.test_runs
        );
        Ok(())
    }

    fn wrangle_faults(&self, store: &Path, log: &mut dyn Write) -> TaskResult {
        let w = &self.config.wrangle;
        let s = wrangle_faults(store, &w.cleaner, w.setpoints, &w.faults, w.test_fraction, self.config.seed).map_err(err)?;
        let _ = writeln!(log, "{s:?}");
        Ok(())
    }

    /// Serve stage: indexes the fields later stages filter on.
    fn index(&self, store: &Path, log: &mut dyn Write) -> TaskResult {
        let mut s = Store::open_wait(store, pipelines::LOCK_TIMEOUT).map_err(err)?;
        for (collection, field) in [
            (CLEAN_TELEMETRY_COLLECTION, "fridge_id"),
            (DEFROST_COLLECTION, "split"),
            (FAULT_COLLECTION, "split"),
        ] {
            s.create_index(collection, field).map_err(err)?;
            let _ = writeln!(log, "indexed {collection}.{field} ({} documents)", s.count(collection));
        }
        Ok(())
    }

    fn learn_dsr(&self, store: &Path, ctx: &WorkerContext, log: &mut dyn Write) -> TaskResult {
        let pipeline = RunConfig::load_pipeline(&self.config.dsr.train_pipeline).map_err(err)?;
        let leads = match arg_f64(ctx, "lead_seconds")? {
            Some(l) => vec![l],
            None => self.config.wrangle.leads.clone(),
        };
        let max_gap = self.config.wrangle.extraction.gap_factor * self.config.wrangle.extraction.cadence_s;
        for (name, m) in chosen_models(&self.config.dsr.models, ctx)? {
            for &lead in &leads {
                let request = LearnRequest {
                    name: name.clone(),
                    pipeline: pipeline.clone(),
                    net: m.net,
                    hyper: m.hyper.clone(),
                };
                let out = learn_dsr(store, &request, lead, max_gap).map_err(err)?;
                let _ = writeln!(
                    log,
                    "{name} at lead {lead} s: {} examples, final train MAE {:.1} -> {}",
                    out.n_examples,
                    out.artifact.train_loss.last().copied().unwrap_or(f64::NAN),
                    out.model_id
                );
            }
        }
        Ok(())
    }

    fn learn_faults(&self, store: &Path, ctx: &WorkerContext, log: &mut dyn Write) -> TaskResult {
        let pipeline = RunConfig::load_pipeline(&self.config.faults.train_pipeline).map_err(err)?;
        let f = &self.config.wrangle.faults;
        let max_gap = f.gap_factor * f.cadence_s;
        for (name, m) in chosen_models(&self.config.faults.models, ctx)? {
            let request = LearnRequest {
                name: name.clone(),
                pipeline: pipeline.clone(),
                net: m.net,
                hyper: m.hyper.clone(),
            };
            let out = learn_faults(store, &request, max_gap).map_err(err)?;
            let _ = writeln!(
                log,
                "{name}: {} examples, final train CCE {:.4} -> {}",
                out.n_examples,
                out.artifact.train_loss.last().copied().unwrap_or(f64::NAN),
                out.model_id
            );
        }
        Ok(())
    }

    /// The instant the DSR event starts: configured, or one cadence step
    /// after the last cleaned reading.
    pub fn event_start(&self, store: &Store) -> Result<f64, String> {
        if let Some(t) = self.config.dsr.event.start_ts {
            return Ok(t);
        }
        let mut last: Option<f64> = None;
        store
            .scan(CLEAN_TELEMETRY_COLLECTION, |d| {
                if let Some(t) = d.get_f64("timestamp") {
                    last = Some(last.map_or(t, |l| l.max(t)));
                }
            })
            .map_err(err)?;
        last.map(|t| t + self.config.wrangle.extraction.cadence_s)
            .ok_or_else(|| "no cleaned telemetry to anchor the event on".into())
    }

    fn dsr_model_name(&self, ctx: Option<&WorkerContext>) -> Result<String, String> {
        if let Some(name) = ctx.and_then(|c| arg_str(c, "model")) {
            return Ok(name.to_owned());
        }
        self.config
            .dsr
            .infer_model
            .clone()
            .or_else(|| self.config.dsr.models.keys().next().cloned())
            .ok_or_else(|| "no DSR model configured".into())
    }

    fn fridges(&self, store: &Store, configured: &Option<Vec<String>>) -> Vec<String> {
        configured.clone().unwrap_or_else(|| fridge_ids(store))
    }

    fn infer_dsr(&self, store_path: &Path, ctx: &WorkerContext, log: &mut dyn Write) -> TaskResult {
        let name = self.dsr_model_name(Some(ctx))?;
        let lead = arg_f64(ctx, "lead_seconds")?.unwrap_or(self.config.dsr.infer_lead_seconds);
        let (inference, as_of) = {
            let store = Store::open_reader(store_path).map_err(err)?;
            let model = StoredModel::latest(&store, &name, Some(lead)).map_err(err)?;
            let as_of = self.event_start(&store)?;
            let fridges = self.fridges(&store, &self.config.dsr.fridges);
            (infer_dsr(&store, &model.model_id, &fridges, as_of, lead).map_err(err)?, as_of)
        };
        for f in &inference.failures {
            let _ = writeln!(log, "no prediction for {}: {}", f.fridge_id, f.reason);
        }
        let _ = writeln!(log, "{} DSR predictions as of {as_of}", inference.predictions.len());
        upsert(store_path, DSR_PREDICTIONS_COLLECTION, inference.predictions.iter().map(DsrPrediction::to_document).collect())
    }

    fn infer_faults(&self, store_path: &Path, ctx: &WorkerContext, log: &mut dyn Write) -> TaskResult {
        let name = match arg_str(ctx, "model") {
            Some(n) => n.to_owned(),
            None => self
                .config
                .faults
                .infer_model
                .clone()
                .or_else(|| self.config.faults.models.keys().next().cloned())
                .ok_or("no fault model configured")?,
        };
        let inference = {
            let store = Store::open_reader(store_path).map_err(err)?;
            let model = StoredModel::latest(&store, &name, None).map_err(err)?;
            let as_of = match self.config.faults.as_of_ts {
                Some(t) => t,
                None => self.event_start(&store)?,
            };
            let fridges = self.fridges(&store, &self.config.faults.fridges);
            infer_faults(&store, &model.model_id, &fridges, as_of).map_err(err)?
        };
        for f in &inference.failures {
            let _ = writeln!(log, "no prediction for {}: {}", f.fridge_id, f.reason);
        }
        let flagged = inference.predictions.iter().filter(|p| p.p_fault >= 0.5).count();
        let _ = writeln!(log, "{} fault predictions, {flagged} above 0.5", inference.predictions.len());
        upsert(store_path, FAULT_PREDICTIONS_COLLECTION, inference.predictions.iter().map(|p| p.to_document()).collect())
    }

    fn selection_id(as_of: f64) -> String {
        format!("selection:{as_of}")
    }

    /// Chooses fridges to switch off for the configured event from the
    /// stored predictions of the inference model.
    pub fn select_dsr(&self, store_path: &Path, log: &mut dyn Write) -> Result<CandidateSelection, String> {
        let name = self.dsr_model_name(None)?;
        let lead = self.config.dsr.infer_lead_seconds;
        let selection = {
            let store = Store::open_reader(store_path).map_err(err)?;
            let model = StoredModel::latest(&store, &name, Some(lead)).map_err(err)?;
            let start = self.event_start(&store)?;
            let predictions: Vec<DsrPrediction> = store
                .documents(DSR_PREDICTIONS_COLLECTION)
                .iter()
                .filter_map(DsrPrediction::from_document)
                .filter(|p| p.model_id == model.model_id && p.as_of_ts == start && p.lead_seconds == lead)
                .collect();
            if predictions.is_empty() {
                return Err(format!("no stored predictions from `{name}` as of {start}; run infer_dsr first"));
            }
            let powers = match &self.config.dsr.powers {
                Some(p) => p.clone(),
                None => fridge_powers(&store),
            };
            let event = self.config.dsr.event.event(start);
            select_dsr_candidates(&predictions, &powers, &event, self.config.dsr.safety_margin_s).map_err(err)?
        };
        let _ = writeln!(
            log,
            "shed {:.2} of {:.2} kW from {} fridge(s), feasible: {}",
            selection.shed_kw,
            selection.event.target_shed_kw,
            selection.chosen.len(),
            selection.feasible
        );
        upsert(store_path, SELECTIONS_COLLECTION, vec![selection.to_document(Self::selection_id(selection.event.start_ts))])?;
        Ok(selection)
    }

    /// Scores every configured model on its test split and stores the
    /// report, plus a JSON copy at `report_path` when set.
    pub fn report(&self, store_path: &Path, log: &mut dyn Write) -> Result<Report, String> {
        let dsr_test = RunConfig::load_pipeline(&self.config.dsr.test_pipeline).map_err(err)?;
        let fault_test = RunConfig::load_pipeline(&self.config.faults.test_pipeline).map_err(err)?;
        let dsr_models: Vec<String> = self.config.dsr.models.keys().cloned().collect();
        let fault_models: Vec<String> = self.config.faults.models.keys().cloned().collect();
        let (report, predictions) = {
            let store = Store::open_reader(store_path).map_err(err)?;
            let selection = match self.event_start(&store) {
                Ok(start) => store
                    .get(SELECTIONS_COLLECTION, &Self::selection_id(start))
                    .and_then(|d| {
                        let mut v = d.clone().into_value();
                        v.as_object_mut()?.remove(crate::docstore::ID_FIELD);
                        serde_json::from_value(v).ok()
                    }),
                Err(_) => None,
            };
            let request = ReportRequest {
                dsr_models: &dsr_models,
                base_lead_seconds: self.config.dsr.base_lead_seconds,
                ahead_lead_seconds: self.config.dsr.ahead_lead_seconds,
                dsr_test_pipeline: &dsr_test,
                fault_models: &fault_models,
                fault_test_pipeline: &fault_test,
                selection,
            };
            build_report(&store, &request).map_err(err)?
        };
        {
            let mut store = Store::open_wait(store_path, pipelines::LOCK_TIMEOUT).map_err(err)?;
            store.replace_collection(TEST_PREDICTIONS_COLLECTION, predictions).map_err(err)?;
        }
        upsert(store_path, REPORTS_COLLECTION, vec![report.to_document()])?;
        if let Some(path) = &self.config.report_path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            }
            let doc = report.to_document().to_canonical_json();
            fs::write(path, doc + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
        }
        let _ = write!(log, "{}", render_table(&report));
        Ok(report)
    }
}

/// Loads the stored report document, if a report task has run.
pub fn stored_report(store: &Store) -> Option<Report> {
    store.get(REPORTS_COLLECTION, "report").and_then(Report::from_document)
}
