//! Synthetic greenhouse campaigns on the 15-minute grid.
//!
//! Two regimes:
//! * `chain`: six variables. Weather drives the inside temperature and
//!   humidity through slow first-order responses; the only internal loop is
//!   the temperature/humidity pair.
//! * `feedback`: eight variables. Inside PAR lowers inside CO2, the air
//!   temperature follows light and outside air quickly, and threshold
//!   ventilation events mix inside air toward outside air.
//!
//! Couplings are keyed by edge (`"SRC->DST"`); a zero coupling removes that
//! influence entirely. Every variable draws its noise from its own seeded
//! stream, so changing one coupling never perturbs another variable's noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datapipe::{format_timestamp, TimeSeriesFrame, ROWS_PER_DAY};
use crate::error::{Error, Result};
use crate::graph::{gh2_default_graph, gh4_default_graph, FeatureGraph, GH2_COLUMNS, GH4_COLUMNS};
use crate::nn::derive_seed;

const TAG_SYNTH: u64 = 0x5348;
const TAG_GAPS: u64 = 0x4741;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Chain,
    Feedback,
}

impl Regime {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Regime::Chain => &GH2_COLUMNS,
            Regime::Feedback => &GH4_COLUMNS,
        }
    }

    pub fn default_graph(self) -> FeatureGraph {
        match self {
            Regime::Chain => gh2_default_graph(),
            Regime::Feedback => gh4_default_graph(),
        }
    }

    pub fn target(self) -> &'static str {
        match self {
            Regime::Chain => "G2_temp",
            Regime::Feedback => "G4_Temp",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Chain => "chain",
            Regime::Feedback => "feedback",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Regime::Chain),
            "feedback" => Ok(Regime::Feedback),
            other => Err(Error::Config(format!("unknown regime '{other}' (chain|feedback)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regime: Regime,
    pub days: usize,
    pub seed: u64,
    /// Edge strengths keyed `"SRC->DST"`; keys must be edges of the
    /// regime's default graph.
    pub couplings: BTreeMap<String, f64>,
    /// Multiplier on every stochastic term; 0 gives a deterministic run.
    pub noise_std: f64,
    pub gap_rate: f64,
    /// Position in the year at the first row, as a fraction in [0, 1).
    pub season_phase: f64,
    pub start: NaiveDateTime,
}

fn ymd_hm(y: i32, m: u32, d: u32, h: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(y, m, d)
        .and_then(|d| d.and_hms_opt(h, 0, 0))
        .expect("valid constant date")
}

fn year_fraction(t: NaiveDateTime) -> f64 {
    use chrono::{Datelike, Timelike};
    (t.ordinal0() as f64 + t.num_seconds_from_midnight() as f64 / 86_400.0) / 365.0
}

impl SynthConfig {
    /// Six-variable campaign: 90 days spanning the summer plateau, so the test
    /// tail stays inside the training temperature range.
    pub fn chain(seed: u64) -> Self {
        let start = ymd_hm(2020, 6, 5, 0);
        Self {
            regime: Regime::Chain,
            days: 90,
            seed,
            couplings: default_couplings(Regime::Chain),
            noise_std: 1.0,
            gap_rate: 0.0,
            season_phase: year_fraction(start),
            start,
        }
    }

    /// Eight-variable campaign: 50 days from 9 October, 20:00.
    pub fn feedback(seed: u64) -> Self {
        let start = ymd_hm(2024, 10, 9, 20);
        Self {
            regime: Regime::Feedback,
            days: 50,
            seed,
            couplings: default_couplings(Regime::Feedback),
            noise_std: 1.0,
            gap_rate: 0.0,
            season_phase: year_fraction(start),
            start,
        }
    }

    pub fn for_regime(regime: Regime, seed: u64) -> Self {
        match regime {
            Regime::Chain => Self::chain(seed),
            Regime::Feedback => Self::feedback(seed),
        }
    }

    pub fn rows(&self) -> usize {
        self.days * ROWS_PER_DAY
    }

    pub fn validate(&self) -> Result<()> {
        if self.days < 2 {
            return Err(Error::Config(format!("need at least 2 days, got {}", self.days)));
        }
        if !(0.0..0.2).contains(&self.gap_rate) {
            return Err(Error::Config(format!("gap_rate must lie in [0, 0.2), got {}", self.gap_rate)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be finite and non-negative, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.season_phase) {
            return Err(Error::Config(format!("season_phase must lie in [0, 1), got {}", self.season_phase)));
        }
        let graph = self.regime.default_graph();
        for (key, v) in &self.couplings {
            let (src, dst) = split_edge_key(key)?;
            if !graph.has_edge(src, dst) {
                return Err(Error::Config(format!("'{key}' is not an edge of the {} graph", self.regime)));
            }
            if !v.is_finite() {
                return Err(Error::Config(format!("coupling '{key}' is not finite")));
            }
        }
        Ok(())
    }

    fn c(&self, key: &str) -> f64 {
        self.couplings.get(key).copied().unwrap_or(0.0)
    }
}

fn split_edge_key(key: &str) -> Result<(&str, &str)> {
    key.split_once("->")
        .map(|(a, b)| (a.trim(), b.trim()))
        .ok_or_else(|| Error::Config(format!("coupling key '{key}' is not of the form SRC->DST")))
}

/// Unit-scale couplings for every edge that the regime's dynamics use.
pub fn default_couplings(regime: Regime) -> BTreeMap<String, f64> {
    let keys: &[&str] = match regime {
        Regime::Chain => &[
            "OUT_temp->OUT_RH",
            "OUT_wind_speed->OUT_RH",
            "OUT_rad->OUT_RH",
            "OUT_rad->OUT_temp",
            "OUT_wind_speed->OUT_temp",
            "OUT_temp->G2_temp",
            "OUT_RH->G2_RH",
            "OUT_rad->G2_temp",
            "OUT_rad->G2_RH",
            "OUT_wind_speed->G2_temp",
            "OUT_wind_speed->G2_RH",
            "G2_temp->G2_RH",
            "G2_RH->G2_temp",
        ],
        Regime::Feedback => &[
            "OUT_Temp->OUT_RH",
            "OUT_Rad->OUT_RH",
            "OUT_Rad->OUT_Temp",
            "OUT_Rad->OUT_PAR",
            "OUT_Temp->G4_Temp",
            "OUT_Rad->G4_Temp",
            "OUT_RH->G4_Temp",
            "OUT_PAR->G4_PAR",
            "OUT_CO2->G4_CO2",
            "G4_PAR->G4_Temp",
            "G4_PAR->G4_CO2",
            "G4_CO2->G4_Temp",
            "G4_Temp->G4_CO2",
        ],
    };
    keys.iter().map(|k| (k.to_string(), 1.0)).collect()
}

/// Per-variable noise source.
struct Streams {
    rngs: Vec<ChaCha8Rng>,
    scale: f64,
}

impl Streams {
    fn new(seed: u64, n: usize, scale: f64) -> Self {
        let rngs = (0..n)
            .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SYNTH, i as u64])))
            .collect();
        Self { rngs, scale }
    }

    /// Standard normal draw for variable `i`, times the global scale.
    fn n(&mut self, i: usize) -> f64 {
        let z: f64 = self.rngs[i].sample(StandardNormal);
        z * self.scale
    }
}

/// Shared outdoor weather: seasonal mean, diurnal cycle, cloud cover and
/// slow weather anomalies.
struct Weather {
    /// Fraction of the year at row 0.
    phase: f64,
    cloud_slow: f64,
    anomaly: f64,
}

impl Weather {
    fn hour(&self, cfg: &SynthConfig, row: usize) -> f64 {
        use chrono::Timelike;
        let t = cfg.start + chrono::Duration::minutes(15 * row as i64);
        t.hour() as f64 + t.minute() as f64 / 60.0
    }

    fn year_frac(&self, row: usize) -> f64 {
        self.phase + row as f64 / (ROWS_PER_DAY as f64 * 365.0)
    }

    /// Monthly-mean air temperature for a Mediterranean site.
    fn seasonal_mean(&self, row: usize) -> f64 {
        17.5 - 9.5 * (2.0 * PI * (self.year_frac(row) - 0.05)).cos()
    }

    /// Clear-sky broadband radiation in W/m2.
    fn clear_sky(&self, row: usize, hour: f64) -> f64 {
        let season = (2.0 * PI * (self.year_frac(row) - 0.47)).cos();
        let day_len = 12.0 + 2.6 * season;
        let sunrise = 12.5 - day_len / 2.0;
        let x = (hour - sunrise) / day_len;
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let peak = 620.0 + 300.0 * season;
        peak * (PI * x).sin().powf(1.3)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a complete (gap-free) campaign.
pub fn generate(cfg: &SynthConfig) -> Result<TimeSeriesFrame> {
    cfg.validate()?;
    let values = match cfg.regime {
        Regime::Chain => generate_chain(cfg),
        Regime::Feedback => generate_feedback(cfg),
    };
    let columns = cfg.regime.columns().iter().map(|s| s.to_string()).collect();
    TimeSeriesFrame::new(cfg.start, columns, values)
}

/// Outdoor series shared by both regimes: (temp, rh, rad, cloud factor).
fn outdoor_step(w: &mut Weather, cfg: &SynthConfig, row: usize, s: &mut Streams, keys: [&str; 3]) -> (f64, f64, f64) {
    let [rad_temp, temp_rh, rad_rh] = keys;
    let hour = w.hour(cfg, row);
    // slow cloud field plus broken-cloud flicker
    w.cloud_slow = 0.97 * w.cloud_slow + 0.35 * s.n(0);
    let cloud = logistic(1.2 + w.cloud_slow + 0.6 * s.n(1));
    let rad = w.clear_sky(row, hour) * (0.15 + 0.85 * cloud);
    w.anomaly = 0.995 * w.anomaly + 0.12 * s.n(2);
    let diurnal = 3.5 * (2.0 * PI * (hour - 9.0) / 24.0).sin();
    let temp = w.seasonal_mean(row) + diurnal + w.anomaly + cfg.c(rad_temp) * 0.004 * rad + 0.15 * s.n(3);
    let rh = 72.0 - cfg.c(temp_rh) * 2.2 * (temp - w.seasonal_mean(row)) - cfg.c(rad_rh) * 0.008 * rad
        + 3.0 * (w.anomaly / 1.2).tanh()
        + 1.0 * s.n(4);
    (temp, rh.clamp(15.0, 100.0), rad)
}

fn generate_chain(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let n = cfg.rows();
    let mut s = Streams::new(cfg.seed, 10, cfg.noise_std);
    let mut w = Weather {
        phase: cfg.season_phase,
        cloud_slow: 0.0,
        anomaly: 0.0,
    };
    let mut out = vec![Vec::with_capacity(n); 6];
    let mut wind_state = 0.0;
    let mut t_in = 22.0;
    let mut rh_in = 65.0;
    for row in 0..n {
        let hour = w.hour(cfg, row);
        wind_state = 0.98 * wind_state + 0.2 * s.n(5);
        let wind = (1.2 + 0.8 * (2.0 * PI * (hour - 10.0) / 24.0).sin().max(0.0)) * wind_state.exp();
        let (mut temp, mut rh, rad) =
            outdoor_step(&mut w, cfg, row, &mut s, ["OUT_rad->OUT_temp", "OUT_temp->OUT_RH", "OUT_rad->OUT_RH"]);
        temp -= cfg.c("OUT_wind_speed->OUT_temp") * 0.25 * (wind - 1.5);
        rh = (rh + cfg.c("OUT_wind_speed->OUT_RH") * 1.5 * (1.5 - wind)).clamp(15.0, 100.0);

        out[0].push(temp);
        out[1].push(rh);
        out[2].push(rad);
        out[3].push(wind);
        out[4].push(t_in);
        out[5].push(rh_in);

        // slow first-order responses; wind speeds up air exchange
        let exchange = 0.035 * (1.0 + cfg.c("OUT_wind_speed->G2_temp") * 0.25 * wind);
        let dt = cfg.c("OUT_temp->G2_temp") * exchange * (temp - t_in)
            + cfg.c("OUT_rad->G2_temp") * 0.00012 * rad
            - cfg.c("G2_RH->G2_temp") * 0.002 * (rh_in - 65.0)
            + 0.04 * s.n(6);
        let rh_exchange = 0.03 * (1.0 + cfg.c("OUT_wind_speed->G2_RH") * 0.25 * wind);
        let drh = cfg.c("OUT_RH->G2_RH") * rh_exchange * (rh - rh_in)
            - cfg.c("G2_temp->G2_RH") * 1.8 * dt
            - cfg.c("OUT_rad->G2_RH") * 0.0003 * rad
            + 0.15 * s.n(7);
        t_in += dt;
        rh_in = (rh_in + drh).clamp(15.0, 100.0);
    }
    out
}

/// Inside air temperature above which vents open.
pub const VENT_TEMP: f64 = 24.5;
/// Inside CO2 (ppm) above which vents open.
pub const VENT_CO2: f64 = 520.0;
/// Fraction of the inside/outside difference removed by one vent event.
pub const VENT_MIX: f64 = 0.45;

/// One ventilation step: moves `inside` part of the way towards `outside`.
pub fn ventilate(inside: f64, outside: f64) -> f64 {
    inside + VENT_MIX * (outside - inside)
}

fn generate_feedback(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let n = cfg.rows();
    let mut s = Streams::new(cfg.seed, 10, cfg.noise_std);
    let mut w = Weather {
        phase: cfg.season_phase,
        cloud_slow: 0.0,
        anomaly: 0.0,
    };
    let mut out = vec![Vec::with_capacity(n); 8];
    let mut co2_out_state = 0.0;
    let mut t_in = 20.0;
    let mut co2_in = 430.0;
    for row in 0..n {
        let hour = w.hour(cfg, row);
        let (temp, rh, rad) =
            outdoor_step(&mut w, cfg, row, &mut s, ["OUT_Rad->OUT_Temp", "OUT_Temp->OUT_RH", "OUT_Rad->OUT_RH"]);
        let par_out = cfg.c("OUT_Rad->OUT_PAR") * 2.05 * rad * (1.0 + 0.02 * s.n(5));
        co2_out_state = 0.97 * co2_out_state + 1.5 * s.n(6);
        let co2_out = 418.0 + 12.0 * (2.0 * PI * (hour - 23.0) / 24.0).cos() + co2_out_state;
        // PV panels shade part of the roof
        let par_in = cfg.c("OUT_PAR->G4_PAR") * 0.5 * par_out * (1.0 + 0.03 * s.n(7));

        out[0].push(temp);
        out[1].push(rad);
        out[2].push(par_out);
        out[3].push(co2_out);
        out[4].push(rh);
        out[5].push(par_in);
        out[6].push(co2_in);
        out[7].push(t_in);

        // air temperature relaxes quickly toward a light- and weather-driven
        // equilibrium
        let t_eq = cfg.c("OUT_Temp->G4_Temp") * (temp - t_in)
            + cfg.c("G4_PAR->G4_Temp") * 0.018 * par_in
            + cfg.c("OUT_Rad->G4_Temp") * 0.002 * rad
            - cfg.c("OUT_RH->G4_Temp") * 0.02 * (rh - 70.0)
            + cfg.c("G4_CO2->G4_Temp") * 0.004 * (co2_in - 450.0);
        let mut t_next = t_in + 0.45 * t_eq + 0.05 * s.n(8);
        // photosynthesis draws CO2 down under light, respiration adds it back
        let resp = 0.02 * (t_in - 10.0).max(0.0);
        let mut co2_next = co2_in
            + cfg.c("OUT_CO2->G4_CO2") * 0.02 * (co2_out - co2_in)
            - cfg.c("G4_PAR->G4_CO2") * 0.025 * par_in * co2_in / (co2_in + 300.0)
            + cfg.c("G4_Temp->G4_CO2") * resp * 2.0
            + 1.0 * s.n(9);
        // ventilation: heat or CO2 build-up opens the vents for one step
        if t_next > VENT_TEMP || co2_next > VENT_CO2 {
            t_next = ventilate(t_next, temp);
            co2_next = ventilate(co2_next, co2_out);
        }
        t_in = t_next;
        co2_in = co2_next.max(150.0);
    }
    out
}

// ---------------------------------------------------------------------------
// Gaps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub row: usize,
    pub timestamp: String,
    pub column: String,
    pub value: f64,
}

/// True values of punched cells, row-major.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapTruth {
    pub cells: Vec<GapCell>,
}

impl GapTruth {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `row,timestamp,column,value` text.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "timestamp", "column", "value"])?;
        for c in &self.cells {
            w.write_record([c.row.to_string(), c.timestamp.clone(), c.column.clone(), format!("{:?}", c.value)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Removes each observed cell independently with probability `gap_rate`.
pub fn punch_gaps(frame: &TimeSeriesFrame, cfg: &SynthConfig) -> Result<(TimeSeriesFrame, GapTruth)> {
    if !(0.0..0.2).contains(&cfg.gap_rate) {
        return Err(Error::Config(format!("gap_rate must lie in [0, 0.2), got {}", cfg.gap_rate)));
    }
    let mut out = frame.clone();
    let mut truth = GapTruth::default();
    if cfg.gap_rate == 0.0 {
        return Ok((out, truth));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_GAPS]));
    for row in 0..frame.rows() {
        for (c, name) in frame.columns().iter().enumerate() {
            let hit = rng.random::<f64>() < cfg.gap_rate;
            if let (true, Some(v)) = (hit, frame.value(row, c)) {
                out.set_missing(row, c);
                truth.cells.push(GapCell {
                    row,
                    timestamp: format_timestamp(frame.timestamp(row)),
                    column: name.clone(),
                    value: v,
                });
            }
        }
    }
    Ok((out, truth))
}

/// Campaign with gaps punched per `cfg.gap_rate`.
pub fn generate_with_gaps(cfg: &SynthConfig) -> Result<(TimeSeriesFrame, GapTruth)> {
    punch_gaps(&generate(cfg)?, cfg)
}

/// Peak-to-trough range of the mean daily profile, a diurnal amplitude
/// estimate robust to weather noise.
pub fn diurnal_amplitude(series: &[f64]) -> f64 {
    let mut sums = [0.0; ROWS_PER_DAY];
    let mut counts = [0usize; ROWS_PER_DAY];
    for (i, v) in series.iter().enumerate() {
        sums[i % ROWS_PER_DAY] += v;
        counts[i % ROWS_PER_DAY] += 1;
    }
    let profile: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let max = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = profile.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}
