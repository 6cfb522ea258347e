//! Channel and rain-scenario parameters, plus the plain-text `key = value`
//! configuration format used by the command-line front end.
//!
//! All quantities are SI (Hz, seconds) or dB. A configuration file is a list
//! of `key = value` lines; `#` starts a comment. Per-class overrides are
//! written as `<class>.<field>`, e.g. `heavy.attenuation_db = 3.5`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative tolerance for `T_s = 1 / (N Δf)`.
const SAMPLE_INTERVAL_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub n_subcarriers: usize,
    pub n_antennas: usize,
    pub sample_interval_s: f64,
    /// Noise power per resource element (antenna, subcarrier), dB.
    pub noise_floor_db: f64,
    pub pilot: Complex64,
    /// Expected first-arrival power without rain, dB.
    pub reference_power_db: f64,
    /// Standard deviation of the per-snapshot first-arrival power fluctuation, dB.
    pub los_jitter_db: f64,
    /// Extra delay of the plate-reflected first arrival in NLoS geometry.
    pub nlos_extra_delay_s: f64,
    pub nlos_reflection_loss_db: f64,
    /// Multiplier on the Type-2 power variance under high wind.
    pub wind_variance_factor: f64,
    /// Standard deviation of the slow common gain drift, dB.
    pub gain_drift_db: f64,
    /// Spacing of the independent drift knots, seconds.
    pub gain_drift_period_s: f64,
    /// Number of PDP taps kept for analysis (`N_T`).
    pub n_taps: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let n_subcarriers = 64;
        let bandwidth_hz = 100e6;
        let subcarrier_spacing_hz = bandwidth_hz / n_subcarriers as f64;
        Self {
            carrier_hz: 2.8e9,
            bandwidth_hz,
            subcarrier_spacing_hz,
            n_subcarriers,
            n_antennas: 2,
            sample_interval_s: 1.0 / (n_subcarriers as f64 * subcarrier_spacing_hz),
            noise_floor_db: -95.0,
            pilot: Complex64::new(1.0, 0.0),
            reference_power_db: -44.0,
            los_jitter_db: 2.0,
            nlos_extra_delay_s: 30e-9,
            nlos_reflection_loss_db: 3.0,
            wind_variance_factor: 2.0,
            gain_drift_db: 2.0,
            gain_drift_period_s: 60.0,
            n_taps: 40,
        }
    }
}

impl ChannelConfig {
    /// Checks the structural invariants of the configuration.
    pub fn validate(&self) -> Result<()> {
        if self.n_antennas < 1 {
            return Err(Error::Config("n_antennas must be at least 1".into()));
        }
        if self.n_subcarriers < 1 {
            return Err(Error::Config("n_subcarriers must be at least 1".into()));
        }
        if !(self.subcarrier_spacing_hz > 0.0) || !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config(
                "bandwidth and subcarrier spacing must be positive".into(),
            ));
        }
        let occupied = self.n_subcarriers as f64 * self.subcarrier_spacing_hz;
        if occupied > self.bandwidth_hz * (1.0 + SAMPLE_INTERVAL_RTOL) {
            return Err(Error::Config(format!(
                "n_subcarriers x subcarrier_spacing_hz = {occupied} exceeds bandwidth {}",
                self.bandwidth_hz
            )));
        }
        let expected_ts = 1.0 / occupied;
        if ((self.sample_interval_s - expected_ts) / expected_ts).abs() > SAMPLE_INTERVAL_RTOL {
            return Err(Error::Config(format!(
                "sample_interval_s = {} but 1/(N df) = {expected_ts}",
                self.sample_interval_s
            )));
        }
        if self.n_taps == 0 || self.n_taps > self.n_subcarriers {
            return Err(Error::Config(format!(
                "n_taps = {} must be in 1..={}",
                self.n_taps, self.n_subcarriers
            )));
        }
        if self.pilot.norm() == 0.0 {
            return Err(Error::Config("pilot must be nonzero".into()));
        }
        if self.noise_floor_db.is_nan() {
            return Err(Error::Config("noise_floor_db is NaN".into()));
        }
        if self.los_jitter_db < 0.0 || self.nlos_reflection_loss_db < 0.0 {
            return Err(Error::Config(
                "jitter and reflection loss must be nonnegative".into(),
            ));
        }
        if self.nlos_extra_delay_s < 0.0 || self.wind_variance_factor <= 0.0 {
            return Err(Error::Config(
                "nlos_extra_delay_s must be >= 0 and wind_variance_factor > 0".into(),
            ));
        }
        if !(self.gain_drift_db >= 0.0) || !(self.gain_drift_period_s >= 1.0) {
            return Err(Error::Config(
                "gain_drift_db must be >= 0 and gain_drift_period_s >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Extra NLoS delay rounded to whole taps.
    pub fn nlos_delay_taps(&self) -> usize {
        (self.nlos_extra_delay_s / self.sample_interval_s).round() as usize
    }

    /// Noise power per tap of the antenna-averaged impulse response, dB.
    pub fn pdp_noise_floor_db(&self) -> f64 {
        self.noise_floor_db - 10.0 * ((self.n_subcarriers * self.n_antennas) as f64).log10()
    }

    /// Sets `n_subcarriers` and derives spacing and sampling interval so that
    /// the occupied band equals `bandwidth_hz`.
    pub fn with_subcarriers(mut self, n_subcarriers: usize) -> Self {
        self.n_subcarriers = n_subcarriers;
        self.subcarrier_spacing_hz = self.bandwidth_hz / n_subcarriers as f64;
        self.sample_interval_s = 1.0 / (n_subcarriers as f64 * self.subcarrier_spacing_hz);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RainLabel {
    NoRain,
    ModerateRain,
    HeavyRain,
}

impl RainLabel {
    pub const ALL: [RainLabel; 3] = [
        RainLabel::NoRain,
        RainLabel::ModerateRain,
        RainLabel::HeavyRain,
    ];

    pub fn index(self) -> usize {
        match self {
            RainLabel::NoRain => 0,
            RainLabel::ModerateRain => 1,
            RainLabel::HeavyRain => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RainLabel::NoRain => "no_rain",
            RainLabel::ModerateRain => "moderate_rain",
            RainLabel::HeavyRain => "heavy_rain",
        }
    }
}

impl fmt::Display for RainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RainLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "no_rain" | "norain" | "no" => Ok(RainLabel::NoRain),
            "moderate" | "moderate_rain" => Ok(RainLabel::ModerateRain),
            "heavy" | "heavy_rain" => Ok(RainLabel::HeavyRain),
            other => Err(Error::Config(format!("unknown rain class `{other}`"))),
        }
    }
}

/// Propagation geometry and wind regime of a measurement campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Condition {
    pub nlos: bool,
    pub high_wind: bool,
}

impl Condition {
    pub fn code(self) -> u8 {
        (self.nlos as u8) | ((self.high_wind as u8) << 1)
    }

    pub fn from_code(code: u8) -> Option<Self> {
        (code < 4).then_some(Condition {
            nlos: code & 1 != 0,
            high_wind: code & 2 != 0,
        })
    }

    pub fn name(self) -> &'static str {
        match (self.nlos, self.high_wind) {
            (false, false) => "los_low_wind",
            (false, true) => "los_high_wind",
            (true, false) => "nlos_low_wind",
            (true, true) => "nlos_high_wind",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generative parameters of one rainfall class.
///
/// The expected antenna-averaged tap power at normalized delay `j + 1`
/// (tap offset `j` from the first arrival) is `a / (j + 1)^decay_factor`,
/// where `a` is the first-arrival power after `mean_attenuation_db`.
/// Type-1 paths (rain scatter near the direct path) take
/// `type1_power_fraction` of the expected power inside `type1_delay_taps`;
/// Type-2 paths (environment scatter) carry the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct RainScenario {
    pub label: RainLabel,
    pub mean_attenuation_db: f64,
    pub decay_factor: f64,
    /// Poisson mean of the Type-1 path count per snapshot.
    pub type1_path_count_mean: f64,
    /// Inclusive range of tap offsets a Type-1 path can land on.
    pub type1_delay_taps: (usize, usize),
    pub type1_power_fraction: f64,
    /// Variance (dB^2) of the common log-normal Type-2 power factor.
    /// Zero switches the environment scatterers off.
    pub type2_power_variance_db: f64,
    /// Ratio of stable (specular) to fluctuating Type-2 power per tap.
    pub type2_specular_ratio: f64,
    /// Per-antenna power of spatially incoherent scatter, relative to the
    /// first arrival. It cancels in the antenna average and only shows up in
    /// per-antenna received power.
    pub incoherent_power_ratio: f64,
    pub los: bool,
    pub high_wind: bool,
}

impl RainScenario {
    pub fn default_for(label: RainLabel) -> Self {
        let base = RainScenario {
            label,
            mean_attenuation_db: 0.0,
            decay_factor: 1.52,
            type1_path_count_mean: 0.0,
            type1_delay_taps: (1, 1),
            type1_power_fraction: 0.0,
            type2_power_variance_db: 6.0,
            type2_specular_ratio: 2.0,
            incoherent_power_ratio: 1.75,
            los: true,
            high_wind: false,
        };
        match label {
            RainLabel::NoRain => base,
            RainLabel::ModerateRain => RainScenario {
                mean_attenuation_db: 1.8647,
                decay_factor: 1.49,
                type1_path_count_mean: 1.5,
                type1_delay_taps: (3, 12),
                type1_power_fraction: 0.5,
                type2_power_variance_db: 3.0,
                incoherent_power_ratio: 1.50,
                ..base
            },
            RainLabel::HeavyRain => RainScenario {
                mean_attenuation_db: 3.2814,
                decay_factor: 1.41,
                type1_path_count_mean: 2.0,
                type1_delay_taps: (1, 3),
                type1_power_fraction: 0.7,
                type2_power_variance_db: 1.0,
                incoherent_power_ratio: 1.22,
                ..base
            },
        }
    }

    pub fn with_condition(mut self, condition: Condition) -> Self {
        self.los = !condition.nlos;
        self.high_wind = condition.high_wind;
        self
    }

    pub fn condition(&self) -> Condition {
        Condition {
            nlos: !self.los,
            high_wind: self.high_wind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if !(self.mean_attenuation_db >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mean_attenuation_db must be >= 0, got {}",
                self.mean_attenuation_db
            )));
        }
        if !(self.type1_path_count_mean >= 0.0) || !self.type1_path_count_mean.is_finite() {
            return Err(Error::InvalidArgument(
                "type1_path_count_mean must be >= 0".into(),
            ));
        }
        let (lo, hi) = self.type1_delay_taps;
        if lo == 0 || hi < lo {
            return Err(Error::InvalidArgument(format!(
                "type1_delay_taps must satisfy 1 <= start <= end, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.type1_power_fraction) {
            return Err(Error::InvalidArgument(
                "type1_power_fraction must be in [0, 1]".into(),
            ));
        }
        if !(self.type2_power_variance_db >= 0.0)
            || !(self.type2_specular_ratio >= 0.0)
            || !(self.incoherent_power_ratio >= 0.0)
        {
            return Err(Error::InvalidArgument(
                "Type-2 variance, specular ratio and incoherent ratio must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn set_field(&mut self, field: &str, value: &str) -> Result<bool> {
        match field {
            "attenuation_db" | "mean_attenuation_db" => {
                self.mean_attenuation_db = parse_f64(field, value)?
            }
            "decay_factor" => self.decay_factor = parse_f64(field, value)?,
            "type1_path_count_mean" => self.type1_path_count_mean = parse_f64(field, value)?,
            "type1_delay_taps" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("{field}: expected `start,end`")))?;
                self.type1_delay_taps = (parse_usize(field, a)?, parse_usize(field, b)?);
            }
            "type1_power_fraction" => self.type1_power_fraction = parse_f64(field, value)?,
            "type2_power_variance_db" => self.type2_power_variance_db = parse_f64(field, value)?,
            "type2_specular_ratio" => self.type2_specular_ratio = parse_f64(field, value)?,
            "incoherent_power_ratio" => self.incoherent_power_ratio = parse_f64(field, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything `simulate` needs: channel, classes, per-class sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub channel: ChannelConfig,
    pub condition: Condition,
    pub scenarios: Vec<RainScenario>,
    pub train_count: usize,
    pub test_count: usize,
    pub window: usize,
    /// Length of one continuous recording session in snapshots (seconds).
    pub session_len: usize,
}

/// Parses `key = value` lines. Returns `(key, value, line_number)`.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((key.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v = value.trim();
    match v {
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => v
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number"))),
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.trim().parse::<usize>().map_err(|_| {
        Error::Config(format!(
            "{key}: `{}` is not a nonnegative integer",
            value.trim()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: `{other}` is not a boolean"))),
    }
}

impl SimulationPlan {
    /// Builds a plan from configuration text.
    ///
    /// Required keys: `train_count`, `test_count`. Everything else has a
    /// default (see README for the key list).
    pub fn from_config_str(text: &str) -> Result<Self> {
        let entries = parse_key_values(text)?;
        let mut map: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (k, v, line) in entries {
            map.insert(k, (v, line));
        }

        let mut channel = ChannelConfig::default();
        let mut condition = Condition::default();
        let mut classes: Vec<RainLabel> = RainLabel::ALL.to_vec();
        let mut window = 20usize;
        let mut session_len = 300usize;
        let mut train_count = None;
        let mut test_count = None;
        let mut overrides: Vec<(RainLabel, String, String, usize)> = Vec::new();
        let mut subcarriers = None;

        for (key, (value, line)) in &map {
            let value = value.as_str();
            match key.as_str() {
                "carrier_hz" => channel.carrier_hz = parse_f64(key, value)?,
                "bandwidth_hz" => channel.bandwidth_hz = parse_f64(key, value)?,
                "n_subcarriers" => subcarriers = Some(parse_usize(key, value)?),
                "n_antennas" => channel.n_antennas = parse_usize(key, value)?,
                "noise_floor_db" => channel.noise_floor_db = parse_f64(key, value)?,
                "reference_power_db" => channel.reference_power_db = parse_f64(key, value)?,
                "los_jitter_db" => channel.los_jitter_db = parse_f64(key, value)?,
                "nlos_extra_delay_s" => channel.nlos_extra_delay_s = parse_f64(key, value)?,
                "nlos_reflection_loss_db" => {
                    channel.nlos_reflection_loss_db = parse_f64(key, value)?
                }
                "wind_variance_factor" => channel.wind_variance_factor = parse_f64(key, value)?,
                "gain_drift_db" => channel.gain_drift_db = parse_f64(key, value)?,
                "gain_drift_period_s" => channel.gain_drift_period_s = parse_f64(key, value)?,
                "n_taps" => channel.n_taps = parse_usize(key, value)?,
                "geometry" => {
                    condition.nlos = match value.to_ascii_lowercase().as_str() {
                        "los" => false,
                        "nlos" => true,
                        other => {
                            return Err(Error::Config(format!(
                                "geometry: `{other}` is not los|nlos"
                            )))
                        }
                    }
                }
                "high_wind" => condition.high_wind = parse_bool(key, value)?,
                "classes" => {
                    classes = value
                        .split(',')
                        .map(|c| c.parse::<RainLabel>())
                        .collect::<Result<Vec<_>>>()?;
                }
                "window" => window = parse_usize(key, value)?,
                "session_len" => session_len = parse_usize(key, value)?,
                "train_count" => train_count = Some(parse_usize(key, value)?),
                "test_count" => test_count = Some(parse_usize(key, value)?),
                other => {
                    let Some((class, field)) = other.split_once('.') else {
                        return Err(Error::UnknownKey {
                            key: other.to_string(),
                            line: *line,
                        });
                    };
                    let label = class.parse::<RainLabel>().map_err(|_| Error::UnknownKey {
                        key: other.to_string(),
                        line: *line,
                    })?;
                    overrides.push((label, field.to_string(), value.to_string(), *line));
                }
            }
        }

        if let Some(n) = subcarriers {
            channel = channel.with_subcarriers(n);
        } else {
            let n = channel.n_subcarriers;
            channel = channel.with_subcarriers(n);
        }
        channel.validate()?;

        let mut scenarios: Vec<RainScenario> = classes
            .iter()
            .map(|&l| RainScenario::default_for(l).with_condition(condition))
            .collect();
        for (label, field, value, line) in overrides {
            let Some(s) = scenarios.iter_mut().find(|s| s.label == label) else {
                return Err(Error::Config(format!(
                    "line {line}: override for class `{label}` which is not in `classes`"
                )));
            };
            if !s.set_field(&field, &value)? {
                return Err(Error::UnknownKey {
                    key: format!("{label}.{field}"),
                    line,
                });
            }
        }
        for s in &scenarios {
            s.validate()?;
        }

        Ok(SimulationPlan {
            channel,
            condition,
            scenarios,
            train_count: train_count.ok_or_else(|| Error::MissingKey("train_count".into()))?,
            test_count: test_count.ok_or_else(|| Error::MissingKey("test_count".into()))?,
            window,
            session_len,
        })
    }
}
