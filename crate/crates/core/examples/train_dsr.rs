//! Demand-side response model: simulate, ingest, wrangle, then train LSTM
//! and RNN regressors for time-to-safe-off and compare them with the
//! predict-the-mean baseline, at lead 0 and two minutes ahead.
//!
//!     cargo run --release --example train_dsr

use coldchain::docstore::{AggregationPipeline, Store};
use coldchain::fridgesim::{simulate_fleet, SimConfig};
use coldchain::neural::{LayerKind, TrainHyper};
use coldchain::pipelines::{build_report, ingest_records, learn_dsr, render_table, wrangle_dsr, LearnRequest, NetConfig, ReportRequest};
use coldchain::telemetry::Setpoints;
use coldchain::wrangler::{CleanerConfig, ExtractionConfig};

fn split(side: &str) -> AggregationPipeline {
    AggregationPipeline::parse(&format!(r#"[{{"$match": {{"split": "{side}"}}}}, {{"$sort": {{"_id": 1}}}}]"#)).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let dir = tempfile::tempdir()?;
    let path = dir.path();
    let sim = SimConfig {
        n_fridges: 20,
        days: 14.0,
        seed: 1,
        ..SimConfig::default()
    };
    let out = simulate_fleet(&sim)?;
    ingest_records(path, &out.records, &out.work_orders)?;
    drop(out);

    let extraction = ExtractionConfig::default();
    let summary = wrangle_dsr(path, &CleanerConfig::default(), &extraction, Setpoints { on: 4.0, off: 1.0 }, &[0.0, 120.0], 0.1, 1)?;
    println!("examples per lead {:?}, {} train / {} test defrost runs", summary.examples, summary.train_runs, summary.test_runs);

    for (name, kind) in [("lstm", LayerKind::Lstm), ("rnn", LayerKind::Rnn)] {
        let request = LearnRequest {
            name: name.into(),
            pipeline: split("train"),
            net: NetConfig { kind, hidden: 32, depth: 2 },
            hyper: TrainHyper {
                epochs: 25,
                seed: 1,
                ..TrainHyper::default()
            },
        };
        for lead in [0.0, 120.0] {
            let outcome = learn_dsr(path, &request, lead, extraction.max_gap_s())?;
            println!("{name} lead {lead}: model {} on {} examples", &outcome.model_id[..12], outcome.n_examples);
        }
    }

    let store = Store::open_reader(path)?;
    let names = ["lstm".to_owned(), "rnn".to_owned()];
    let test = split("test");
    let (report, _) = build_report(
        &store,
        &ReportRequest {
            dsr_models: &names,
            base_lead_seconds: 0.0,
            ahead_lead_seconds: 120.0,
            dsr_test_pipeline: &test,
            fault_models: &[],
            fault_test_pipeline: &test,
            selection: None,
        },
    )?;
    print!("{}", render_table(&report));
    Ok(())
}
