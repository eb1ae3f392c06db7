//! Choosing fridges to switch off for a demand-side response event: every
//! chosen fridge must ride out the event plus a safety margin, and the
//! greedy pass stops once the shed target is met.
//!
//!     cargo run --example dsr_selection

use std::collections::BTreeMap;

use coldchain::fridgesim::DsrEvent;
use coldchain::pipelines::{select_dsr_candidates, DsrPrediction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fleet = [("C01", 3100.0, 1.2), ("C02", 1700.0, 2.5), ("C03", 4200.0, 0.8), ("C04", 2500.0, 1.6), ("C05", 2150.0, 2.0)];
    let predictions: Vec<DsrPrediction> = fleet
        .iter()
        .map(|(id, safe, _)| DsrPrediction {
            fridge_id: (*id).into(),
            predicted_safe_off_s: *safe,
            model_id: "example".into(),
            as_of_ts: 0.0,
            lead_seconds: 120.0,
        })
        .collect();
    let powers: BTreeMap<String, f64> = fleet.iter().map(|(id, _, kw)| ((*id).into(), *kw)).collect();

    for target in [1.0, 3.0, 5.0] {
        let event = DsrEvent::new(0.0, target);
        let sel = select_dsr_candidates(&predictions, &powers, &event, 300.0)?;
        println!(
            "target {target} kW over {} s + 300 s margin: chose {:?}, shed {:.1} kW, feasible {}",
            event.secondary_s, sel.chosen, sel.shed_kw, sel.feasible
        );
    }
    Ok(())
}
