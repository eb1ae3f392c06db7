//! Telemetry wrangling: CSV round trip, cleaning (dedupe, categorical
//! unification, sigma clipping), defrost example extraction at two leads,
//! and a train/test split.
//!
//!     cargo run --example wrangle

use std::collections::BTreeMap;

use coldchain::fridgesim::{simulate_fleet, SimConfig};
use coldchain::telemetry::{derive_features, parse_telemetry_csv, write_telemetry_csv, ColumnMap, Setpoints};
use coldchain::wrangler::{clean_records, extract_defrost_examples, split_dataset, CleanerConfig, ExtractionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        n_fridges: 8,
        days: 3.0,
        seed: 3,
        glitch_rate: 0.001,
        duplicate_rate: 0.002,
        ..SimConfig::default()
    };
    let out = simulate_fleet(&sim)?;
    let csv = write_telemetry_csv(&out.records, &ColumnMap::default());
    let parsed = parse_telemetry_csv(&csv, &ColumnMap::default())?;
    println!("csv: {} bytes, {} records back, {} rejected rows", csv.len(), parsed.records.len(), parsed.rejects.len());

    let (cleaned, report) = clean_records(parsed.records, &CleanerConfig::default())?;
    println!("cleaning: {report:#?}");
    let cleaned = derive_features(cleaned, Setpoints { on: 4.0, off: 1.0 })?;

    let cfg = ExtractionConfig::default();
    for lead in [0.0, 120.0] {
        let ex = extract_defrost_examples(&cleaned, &cfg, lead);
        let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
        for r in &ex.rejects {
            *reasons.entry(format!("{:?}", r.reason)).or_default() += 1;
        }
        let mean = ex.examples.iter().map(|e| e.target_seconds).sum::<f64>() / ex.examples.len().max(1) as f64;
        println!("lead {lead:>5} s: {} examples (mean target {mean:.0} s), rejects {reasons:?}", ex.examples.len());
        if lead == 0.0 {
            let ids: Vec<String> = ex.examples.iter().map(|e| e.id.clone()).collect();
            let split = split_dataset(&ids, 0.1, 0.1, 1)?;
            println!("split: {} train / {} test / {} validation draws", split.train.len(), split.test.len(), split.validation.len());
        }
    }
    Ok(())
}
