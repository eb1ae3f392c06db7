//! Fault prediction: work orders are parsed and matched to telemetry, windows
//! before each fault become positive examples, classes are balanced, and an
//! LSTM classifier is trained and scored.
//!
//!     cargo run --release --example faults

use coldchain::docstore::{AggregationPipeline, Store};
use coldchain::fridgesim::{simulate_fleet, FaultSim, SimConfig};
use coldchain::neural::{LayerKind, LossKind, TrainHyper};
use coldchain::pipelines::{evaluate_model, ingest_records, learn_faults, wrangle_faults, LearnRequest, NetConfig};
use coldchain::telemetry::Setpoints;
use coldchain::wrangler::{CleanerConfig, ExtractionConfig, FaultConfig};

fn split(side: &str) -> AggregationPipeline {
    AggregationPipeline::parse(&format!(r#"[{{"$match": {{"split": "{side}"}}}}, {{"$sort": {{"_id": 1}}}}]"#)).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let dir = tempfile::tempdir()?;
    let path = dir.path();
    let sim = SimConfig {
        n_fridges: 30,
        days: 20.0,
        seed: 5,
        faults: FaultSim {
            fridge_fraction: 1.0,
            ..FaultSim::default()
        },
        ..SimConfig::default()
    };
    let out = simulate_fleet(&sim)?;
    println!("{} work orders; first: {:?}", out.work_orders.len(), out.work_orders.first());
    ingest_records(path, &out.records, &out.work_orders)?;
    drop(out);

    let summary = wrangle_faults(path, &CleanerConfig::default(), Setpoints { on: 4.0, off: 1.0 }, &FaultConfig::default(), 0.2, 5)?;
    println!("{summary:?}");

    let request = LearnRequest {
        name: "ice".into(),
        pipeline: split("train"),
        net: NetConfig {
            kind: LayerKind::Lstm,
            hidden: 32,
            depth: 2,
        },
        hyper: TrainHyper {
            epochs: 20,
            seed: 5,
            loss: LossKind::Cce,
            ..TrainHyper::default()
        },
    };
    let outcome = learn_faults(path, &request, ExtractionConfig::default().max_gap_s())?;
    let store = Store::open_reader(path)?;
    let (eval, _) = evaluate_model(&store, &outcome.model_id, &split("test"))?;
    println!("test accuracy {:.3} over {} examples, cce {:.3}", eval.accuracy.unwrap_or(f64::NAN), eval.n_test, eval.cce.unwrap_or(f64::NAN));
    Ok(())
}
