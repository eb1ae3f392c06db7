//! Simulated fleet: per-fridge thermal parameters, six days of readings, and how
//! long each fridge could stay off from its mean temperature.
//!
//!     cargo run --example simulate

use coldchain::fridgesim::{simulate_fleet, true_time_to_threshold, FaultSim, SimConfig};
use coldchain::wrangler::defrost_runs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SimConfig {
        n_fridges: 5,
        days: 6.0,
        seed: 42,
        faults: FaultSim {
            fridge_fraction: 0.4,
            interval_days: [1.0, 2.0],
            ..FaultSim::default()
        },
        ..SimConfig::default()
    };
    let out = simulate_fleet(&cfg)?;
    println!("{} readings, {} work orders, faults at {:?}", out.records.len(), out.work_orders.len(), out.faults);
    println!("fridge  k_cool    k_warm    ambient  kW    mean air_on  safe-off from mean  defrosts");
    for spec in &out.specs {
        let stream: Vec<_> = out.records.iter().filter(|r| r.fridge_id == spec.fridge_id).cloned().collect();
        let mean = stream.iter().map(|r| r.air_on_temperature).sum::<f64>() / stream.len() as f64;
        let safe = true_time_to_threshold(spec, mean)?;
        let runs = defrost_runs(&stream);
        println!(
            "{:<7} {:.2e}  {:.2e}  {:>6.1}  {:>4.2}  {:>10.2}  {:>16.0} s  {:>8}",
            spec.fridge_id,
            spec.k_cool,
            spec.k_warm,
            spec.t_ambient,
            spec.power_kw,
            mean,
            safe,
            runs.len()
        );
    }
    for order in out.work_orders.iter().take(5) {
        println!("{order:?}");
    }
    Ok(())
}
