//! Synthetic refrigeration fleet: Newton cooling/warming under a thermostat,
//! scheduled defrosts, door openings, sensor noise, optional pre-fault drift
//! and demand-side-response load sheds.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{ExtraValue, TelemetryRecord};
use crate::wrangler::WorkOrder;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("bad simulator config: {0}")]
    BadConfig(String),
    #[error("temperatures must satisfy T0 <= threshold < ambient (got T0 {t0}, threshold {threshold}, ambient {ambient})")]
    BadTemperatureOrder { t0: f64, threshold: f64, ambient: f64 },
    #[error("event window [{start}, {end}) lies outside the simulated span")]
    OutOfRange { start: f64, end: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FridgeSpec {
    pub fridge_id: String,
    pub store_id: String,
    /// Rate (1/s) of approach to the evaporator temperature while cooling.
    pub k_cool: f64,
    /// Rate (1/s) of approach to ambient while the compressor is off.
    pub k_warm: f64,
    /// Temperature the cooled air tends towards; below the thermostat band
    /// so the low edge is actually reached.
    pub t_evap: f64,
    pub t_set_low: f64,
    pub t_set_high: f64,
    pub t_ambient: f64,
    pub threshold: f64,
    pub power_kw: f64,
    pub noise_sigma: f64,
    /// Air-off runs this much below air-on while the compressor is on.
    pub coil_offset: f64,
    pub defrosts_per_day: u32,
    pub defrost_max_s: f64,
    /// First scheduled defrost, seconds after the simulation start.
    pub defrost_offset_s: f64,
}

impl FridgeSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let ordered = self.t_evap < self.t_set_low
            && self.t_set_low < self.t_set_high
            && self.t_set_high < self.threshold
            && self.threshold < self.t_ambient;
        if !ordered {
            return Err(SimError::BadConfig(format!(
                "{}: need t_evap < t_set_low < t_set_high < threshold < t_ambient",
                self.fridge_id
            )));
        }
        if !(self.k_cool > 0.0 && self.k_warm > 0.0 && self.noise_sigma >= 0.0 && self.defrost_max_s > 0.0) {
            return Err(SimError::BadConfig(format!("{}: rates must be positive", self.fridge_id)));
        }
        Ok(())
    }
}

/// Closed-form, noise-free time for an unpowered fridge to warm from `t0` to
/// its threshold.
pub fn true_time_to_threshold(spec: &FridgeSpec, t0: f64) -> Result<f64, SimError> {
    if !(t0 <= spec.threshold && spec.threshold < spec.t_ambient) {
        return Err(SimError::BadTemperatureOrder {
            t0,
            threshold: spec.threshold,
            ambient: spec.t_ambient,
        });
    }
    Ok(((spec.t_ambient - t0) / (spec.t_ambient - spec.threshold)).ln() / spec.k_warm)
}

/// A frequency-response load shed: a fast primary response held as a
/// secondary response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsrEvent {
    pub start_ts: f64,
    #[serde(default = "DsrEvent::default_primary")]
    pub primary_s: f64,
    #[serde(default = "DsrEvent::default_secondary")]
    pub secondary_s: f64,
    pub target_shed_kw: f64,
}

impl DsrEvent {
    fn default_primary() -> f64 {
        30.0
    }
    fn default_secondary() -> f64 {
        1800.0
    }

    pub fn new(start_ts: f64, target_shed_kw: f64) -> Self {
        Self {
            start_ts,
            primary_s: Self::default_primary(),
            secondary_s: Self::default_secondary(),
            target_shed_kw,
        }
    }

    pub fn end_ts(&self) -> f64 {
        self.start_ts + self.secondary_s
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.primary_s <= self.secondary_s && self.target_shed_kw >= 0.0 && self.primary_s >= 0.0) {
            return Err(SimError::BadConfig("event needs 0 <= primary_s <= secondary_s and target >= 0".into()));
        }
        Ok(())
    }
}

/// An event applied during simulation to the listed fridges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEvent {
    pub event: DsrEvent,
    pub participants: Vec<String>,
}

/// Pre-fault drift: the warming rate ramps up over `onset_s` before each
/// fault, then resets when the fault is cleared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSim {
    /// Chance that a fridge suffers faults at all.
    pub fridge_fraction: f64,
    /// Days between successive faults of one fridge.
    pub interval_days: [f64; 2],
    pub onset_s: f64,
    /// Warming-rate multiplier reached at the fault.
    pub peak_factor: f64,
    /// Work orders carrying no usable identifiers, per fault.
    pub noise_orders_per_fault: f64,
}

impl Default for FaultSim {
    fn default() -> Self {
        Self {
            fridge_fraction: 0.0,
            interval_days: [4.0, 8.0],
            onset_s: 2.0 * 86_400.0,
            peak_factor: 8.0,
            noise_orders_per_fault: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_fridges: usize,
    pub fridges_per_store: usize,
    pub days: f64,
    pub step_s: f64,
    pub start_ts: f64,
    pub seed: u64,
    pub k_cool: [f64; 2],
    pub k_warm: [f64; 2],
    pub t_evap: [f64; 2],
    pub t_set_low: [f64; 2],
    pub t_set_high: [f64; 2],
    pub t_ambient: [f64; 2],
    pub power_kw: [f64; 2],
    pub coil_offset: [f64; 2],
    pub threshold: f64,
    pub noise_sigma: f64,
    pub defrosts_per_day: u32,
    pub defrost_max_s: f64,
    /// Door openings per hour (Poisson) and the temperature jump of each.
    pub door_rate_per_hour: f64,
    pub door_delta: f64,
    /// Fraction of readings replaced by wild sensor values, and fraction
    /// emitted twice, to exercise the cleaner.
    pub glitch_rate: f64,
    pub duplicate_rate: f64,
    pub faults: FaultSim,
    pub events: Vec<SimEvent>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_fridges: 10,
            fridges_per_store: 10,
            days: 7.0,
            step_s: 60.0,
            start_ts: 1_488_931_200.0,
            seed: 0,
            k_cool: [1.0 / 700.0, 1.0 / 500.0],
            k_warm: [1.0 / 6000.0, 1.0 / 4000.0],
            t_evap: [-8.0, -4.0],
            t_set_low: [2.0, 3.0],
            t_set_high: [4.0, 5.0],
            t_ambient: [18.0, 22.0],
            power_kw: [0.5, 3.0],
            coil_offset: [2.0, 4.0],
            threshold: 8.0,
            noise_sigma: 0.02,
            defrosts_per_day: 4,
            defrost_max_s: 5400.0,
            door_rate_per_hour: 0.1,
            door_delta: 0.6,
            glitch_rate: 0.0,
            duplicate_rate: 0.0,
            faults: FaultSim::default(),
            events: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::BadConfig(m.into()));
        if !(self.step_s > 0.0) {
            return bad("step_s must be positive");
        }
        if self.n_fridges == 0 || self.fridges_per_store == 0 || !(self.days > 0.0) {
            return bad("need at least one fridge, one fridge per store and a positive duration");
        }
        for (name, [lo, hi]) in [
            ("k_cool", self.k_cool),
            ("k_warm", self.k_warm),
            ("t_evap", self.t_evap),
            ("t_set_low", self.t_set_low),
            ("t_set_high", self.t_set_high),
            ("t_ambient", self.t_ambient),
            ("power_kw", self.power_kw),
            ("coil_offset", self.coil_offset),
        ] {
            if !(lo <= hi) {
                return Err(SimError::BadConfig(format!("range {name} is empty")));
            }
        }
        if self.defrosts_per_day == 0 {
            return bad("defrosts_per_day must be >= 1");
        }
        let f = &self.faults;
        if !(0.0..=1.0).contains(&f.fridge_fraction) || !(f.interval_days[0] > 0.0 && f.interval_days[0] <= f.interval_days[1]) {
            return bad("fault fraction must lie in [0,1] and intervals must be positive");
        }
        for rate in [self.glitch_rate, self.duplicate_rate] {
            if !(0.0..1.0).contains(&rate) {
                return bad("glitch and duplicate rates must lie in [0,1)");
            }
        }
        for e in &self.events {
            e.event.validate()?;
        }
        Ok(())
    }

    pub fn end_ts(&self) -> f64 {
        self.start_ts + self.steps() as f64 * self.step_s
    }

    pub fn steps(&self) -> usize {
        (self.days * 86_400.0 / self.step_s).round() as usize
    }

    fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
        if range[0] == range[1] {
            range[0]
        } else {
            rng.gen_range(range[0]..range[1])
        }
    }

    /// Per-fridge parameters, drawn uniformly from the configured ranges.
    pub fn fleet(&self) -> Vec<FridgeSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let period = 86_400.0 / f64::from(self.defrosts_per_day);
        (0..self.n_fridges)
            .map(|i| {
                let t_set_low = Self::draw(self.t_set_low, &mut rng);
                FridgeSpec {
                    fridge_id: fridge_name(i),
                    store_id: (i / self.fridges_per_store + 1).to_string(),
                    k_cool: Self::draw(self.k_cool, &mut rng),
                    k_warm: Self::draw(self.k_warm, &mut rng),
                    t_evap: Self::draw(self.t_evap, &mut rng),
                    t_set_low,
                    t_set_high: Self::draw(self.t_set_high, &mut rng).max(t_set_low + 0.5),
                    t_ambient: Self::draw(self.t_ambient, &mut rng),
                    threshold: self.threshold,
                    power_kw: Self::draw(self.power_kw, &mut rng),
                    noise_sigma: self.noise_sigma,
                    coil_offset: Self::draw(self.coil_offset, &mut rng),
                    defrosts_per_day: self.defrosts_per_day,
                    defrost_max_s: self.defrost_max_s,
                    defrost_offset_s: (rng.gen_range(0.0..period) / self.step_s).round() * self.step_s,
                }
            })
            .collect()
    }
}

pub fn fridge_name(index: usize) -> String {
    format!("C{}", index + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Cooling,
    Idle,
    Defrost,
}

/// Fleet telemetry plus the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub specs: Vec<FridgeSpec>,
    /// Sorted by (fridge_id, timestamp).
    pub records: Vec<TelemetryRecord>,
    pub work_orders: Vec<WorkOrder>,
    /// (fridge_id, fault timestamp)
    pub faults: Vec<(String, f64)>,
}

/// Exact solution of Newton's law over one step: `T` relaxes towards
/// `target` at `rate`.
fn relax(t: f64, target: f64, rate: f64, dt: f64) -> f64 {
    target + (t - target) * (-rate * dt).exp()
}

fn fault_times(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = &cfg.faults;
    if f.fridge_fraction == 0.0 || !rng.gen_bool(f.fridge_fraction) {
        return Vec::new();
    }
    let day = 86_400.0;
    let mut out = Vec::new();
    // Leave room for a full onset and a day-ahead window before the first.
    let mut t = cfg.start_ts + f.onset_s.max(day) + day + rng.gen_range(0.0..f.interval_days[0] * day);
    while t < cfg.end_ts() - day {
        out.push((t / cfg.step_s).round() * cfg.step_s);
        t += SimConfig::draw([f.interval_days[0] * day, f.interval_days[1] * day], rng);
    }
    out
}

/// Simulates one fridge. `forced_off` windows hold the compressor off without
/// touching the defrost flag.
fn simulate_fridge(cfg: &SimConfig, spec: &FridgeSpec, index: usize, forced_off: &[(f64, f64)]) -> (Vec<TelemetryRecord>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let faults = fault_times(cfg, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let door_gap = (cfg.door_rate_per_hour > 0.0).then(|| Exp::new(cfg.door_rate_per_hour / 3600.0).expect("positive rate"));
    let dt = cfg.step_s;
    let period = 86_400.0 / f64::from(spec.defrosts_per_day);

    let mut temp = rng.gen_range(spec.t_set_low..spec.t_set_high);
    let mut mode = Mode::Cooling;
    let mut next_defrost = cfg.start_ts + spec.defrost_offset_s;
    let mut defrost_began = 0.0;
    let mut next_door = door_gap.map_or(f64::INFINITY, |d| cfg.start_ts + d.sample(&mut rng));
    let mut records = Vec::with_capacity(cfg.steps());

    for n in 0..cfg.steps() {
        let ts = cfg.start_ts + n as f64 * dt;
        let forced = forced_off.iter().any(|(a, b)| ts >= *a && ts < *b);
        if mode != Mode::Defrost && ts >= next_defrost {
            mode = Mode::Defrost;
            defrost_began = ts;
            next_defrost += period;
        }
        if mode == Mode::Defrost && (temp >= spec.threshold || ts - defrost_began >= spec.defrost_max_s) {
            mode = Mode::Cooling;
        }
        let door_open = ts >= next_door;
        if door_open {
            temp += cfg.door_delta;
            while next_door <= ts {
                next_door += door_gap.map_or(f64::INFINITY, |d| d.sample(&mut rng).max(dt));
            }
        }
        let compressor_on = mode == Mode::Cooling && !forced;
        let mut air_on = temp;
        let mut air_off = if compressor_on { temp - spec.coil_offset } else { temp };
        if spec.noise_sigma > 0.0 {
            air_on += noise.sample(&mut rng);
            air_off += noise.sample(&mut rng);
        }
        let mut record = TelemetryRecord::new(spec.fridge_id.clone(), ts, air_on, air_off, u8::from(mode == Mode::Defrost));
        record.store_id = Some(spec.store_id.clone());
        record
            .extra
            .insert("power_kw".into(), ExtraValue::Number(if compressor_on { spec.power_kw } else { 0.0 }));
        record.extra.insert("door_state".into(), ExtraValue::Number(f64::from(u8::from(door_open))));
        record
            .extra
            .insert("evaporator_valve".into(), ExtraValue::Number(if compressor_on { 100.0 } else { 0.0 }));
        records.push(record);

        // Advance the true temperature over [ts, ts + dt).
        let drift = faults
            .iter()
            .find(|f| ts < **f && ts >= **f - cfg.faults.onset_s)
            .map_or(1.0, |f| 1.0 + (cfg.faults.peak_factor - 1.0) * (1.0 - (f - ts) / cfg.faults.onset_s));
        temp = if compressor_on {
            relax(temp, spec.t_evap, spec.k_cool, dt)
        } else {
            relax(temp, spec.t_ambient, spec.k_warm * drift, dt)
        };
        if !forced {
            mode = match mode {
                Mode::Cooling if temp <= spec.t_set_low => Mode::Idle,
                Mode::Idle if temp >= spec.t_set_high => Mode::Cooling,
                m => m,
            };
        } else if mode == Mode::Cooling {
            mode = Mode::Idle;
        }
    }
    (records, faults)
}

fn add_sensor_faults(cfg: &SimConfig, records: Vec<TelemetryRecord>) -> Vec<TelemetryRecord> {
    if cfg.glitch_rate == 0.0 && cfg.duplicate_rate == 0.0 {
        return records;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut out = Vec::with_capacity(records.len());
    for mut r in records {
        if rng.gen_bool(cfg.glitch_rate) {
            r.air_on_temperature = if rng.gen_bool(0.5) { 50.0 } else { -45.0 };
        }
        let dup = rng.gen_bool(cfg.duplicate_rate);
        if dup {
            out.push(r.clone());
        }
        out.push(r);
    }
    out
}

fn work_orders_for(cfg: &SimConfig, specs: &[FridgeSpec], faults: &[(usize, f64)]) -> Vec<WorkOrder> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - 1);
    let mut orders = Vec::new();
    for &(i, ts) in faults {
        let s = &specs[i];
        let text = match rng.gen_range(0..3) {
            0 => format!("ICE CLEARED case {} store {} - evaporator iced up", s.fridge_id, s.store_id),
            1 => format!("Ice cleared from coil, case {} store {}", s.fridge_id, s.store_id),
            _ => format!("ice cleared case {} store {}; door heater checked", s.fridge_id, s.store_id),
        };
        orders.push(WorkOrder { raw_text: text, timestamp: ts });
        if rng.gen_bool(cfg.faults.noise_orders_per_fault.clamp(0.0, 1.0)) {
            let noise_ts = (ts + rng.gen_range(-3.0..3.0) * 86_400.0).clamp(cfg.start_ts, cfg.end_ts());
            let text = match rng.gen_range(0..3) {
                0 => format!("Routine maintenance visit, store {}", s.store_id),
                1 => "Engineer attended - no fault found".to_owned(),
                _ => format!("DOOR SEAL REPLACED case {} store {}", s.fridge_id, s.store_id),
            };
            orders.push(WorkOrder {
                raw_text: text,
                timestamp: noise_ts,
            });
        }
    }
    orders.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    orders
}

fn forced_windows(cfg: &SimConfig, fridge_id: &str) -> Vec<(f64, f64)> {
    cfg.events
        .iter()
        .filter(|e| e.participants.iter().any(|p| p == fridge_id))
        .map(|e| (e.event.start_ts, e.event.end_ts()))
        .collect()
}

/// Simulates the whole fleet. Deterministic per config.
pub fn simulate_fleet(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let specs = cfg.fleet();
    for s in &specs {
        s.validate()?;
    }
    let mut records = Vec::with_capacity(cfg.n_fridges * cfg.steps());
    let mut faults = Vec::new();
    // Fridge names sort lexicographically, not numerically.
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|a, b| specs[*a].fridge_id.cmp(&specs[*b].fridge_id));
    for i in order {
        let (r, f) = simulate_fridge(cfg, &specs[i], i, &forced_windows(cfg, &specs[i].fridge_id));
        records.extend(r);
        faults.extend(f.into_iter().map(|t| (i, t)));
    }
    faults.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let work_orders = work_orders_for(cfg, &specs, &faults);
    Ok(SimOutput {
        records: add_sensor_faults(cfg, records),
        faults: faults.into_iter().map(|(i, t)| (specs[i].fridge_id.clone(), t)).collect(),
        specs,
        work_orders,
    })
}

/// Re-simulates the participating fridges with their compressors held off for
/// the event; everyone else's records are returned untouched.
pub fn inject_dsr_event(
    cfg: &SimConfig,
    records: Vec<TelemetryRecord>,
    event: &DsrEvent,
    participants: &[String],
) -> Result<Vec<TelemetryRecord>, SimError> {
    event.validate()?;
    if event.start_ts < cfg.start_ts || event.end_ts() > cfg.end_ts() {
        return Err(SimError::OutOfRange {
            start: event.start_ts,
            end: event.end_ts(),
        });
    }
    let specs = cfg.fleet();
    let chosen: BTreeSet<&str> = participants.iter().map(String::as_str).collect();
    let mut out = Vec::with_capacity(records.len());
    let mut replaced = BTreeSet::new();
    for r in records {
        if !chosen.contains(r.fridge_id.as_str()) {
            out.push(r);
            continue;
        }
        if replaced.insert(r.fridge_id.clone()) {
            let i = specs
                .iter()
                .position(|s| s.fridge_id == r.fridge_id)
                .ok_or_else(|| SimError::BadConfig(format!("unknown fridge {}", r.fridge_id)))?;
            let mut windows = forced_windows(cfg, &r.fridge_id);
            windows.push((event.start_ts, event.end_ts()));
            out.extend(simulate_fridge(cfg, &specs[i], i, &windows).0);
        }
    }
    Ok(out)
}

/// Power drawn by the fleet at `ts`, from the `power_kw` readings.
pub fn fleet_power_at(records: &[TelemetryRecord], ts: f64) -> f64 {
    records
        .iter()
        .filter(|r| r.timestamp == ts)
        .filter_map(|r| r.feature("power_kw"))
        .sum()
}
