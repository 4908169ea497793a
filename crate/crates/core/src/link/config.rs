//! Link configuration and its flat `key = value` file grammar.
//!
//! One parameter per line, `#` starts a comment, units are part of the key
//! name. Unknown keys are rejected. Analyzer settings use numbered keys
//! (`setting0_start_s`, `setting0_malta_deg`, `setting0_sicily_deg`,
//! `setting0_duration_s`); a schedule file is the same grammar restricted to
//! those keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::state::{self, LocalUnitary, Side, TwoQubitState};

pub const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {value}")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub dark_rate: f64,
    pub dead_time_ps: u64,
    pub jitter_fwhm_ps: f64,
}

impl DetectorConfig {
    pub fn ideal() -> Self {
        Self { efficiency: 1.0, dark_rate: 0.0, dead_time_ps: 0, jitter_fwhm_ps: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(ConfigError::Invalid(format!("detector efficiency {} outside [0,1]", self.efficiency)));
        }
        if !(self.dark_rate >= 0.0 && self.dark_rate.is_finite()) {
            return Err(ConfigError::Invalid(format!("dark rate {} must be >= 0", self.dark_rate)));
        }
        if !(self.jitter_fwhm_ps >= 0.0 && self.jitter_fwhm_ps.is_finite()) {
            return Err(ConfigError::Invalid(format!("jitter {} must be >= 0", self.jitter_fwhm_ps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClockConfig {
    pub offset_ps: i64,
    pub drift_ppm: f64,
    pub resolution_ps: u64,
}

impl ClockConfig {
    pub fn ideal() -> Self {
        Self { offset_ps: 0, drift_ppm: 0.0, resolution_ps: 1 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.resolution_ps < 1 {
            return Err(ConfigError::Invalid("clock resolution must be >= 1 ps".into()));
        }
        if !(self.drift_ppm.is_finite() && self.drift_ppm > -1e6) {
            return Err(ConfigError::Invalid(format!("clock drift {} ppm not allowed", self.drift_ppm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationConfig {
    pub detectors: [DetectorConfig; 2],
    pub clock: ClockConfig,
}

impl StationConfig {
    pub fn ideal() -> Self {
        Self { detectors: [DetectorConfig::ideal(), DetectorConfig::ideal()], clock: ClockConfig::ideal() }
    }
}

/// How the Sicily receiver undoes the fibre's polarisation rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compensation {
    /// No correction; the raw channel unitary reaches the analyzer.
    None,
    /// Inverse estimated from H and D probe states.
    Probes,
}

/// Fibre polarisation transformation in `U3(theta, phi, lambda)` form (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub theta: f64,
    pub phi: f64,
    pub lambda: f64,
    pub compensation: Compensation,
}

impl ChannelConfig {
    pub fn identity() -> Self {
        Self { theta: 0.0, phi: 0.0, lambda: 0.0, compensation: Compensation::None }
    }

    pub fn unitary(&self) -> LocalUnitary {
        LocalUnitary::from_euler(self.theta, self.phi, self.lambda, Side::Sicily)
    }

    /// Channel followed by the receiver's correction.
    pub fn effective_unitary(&self) -> LocalUnitary {
        let u = self.unitary();
        match self.compensation {
            Compensation::None => u,
            Compensation::Probes => {
                let h = state::stokes(u.apply_to_linear(0.0));
                let d = state::stokes(u.apply_to_linear(std::f64::consts::FRAC_PI_4));
                state::compensation_from_probes(h, d, Side::Sicily).then(&u)
            }
        }
    }
}

/// One analyzer setting held for a time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledSetting {
    pub start_ps: u64,
    pub duration_ps: u64,
    /// Malta polariser angle, radians.
    pub malta_angle: f64,
    /// Sicily polariser angle, radians.
    pub sicily_angle: f64,
}

impl ScheduledSetting {
    pub fn end_ps(&self) -> u64 {
        self.start_ps + self.duration_ps
    }

    pub fn contains(&self, t_ps: u64) -> bool {
        t_ps >= self.start_ps && t_ps < self.end_ps()
    }
}

/// Sorted, non-overlapping analyzer settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    settings: Vec<ScheduledSetting>,
}

impl Schedule {
    pub fn new(settings: Vec<ScheduledSetting>) -> Result<Self, ConfigError> {
        for (i, s) in settings.iter().enumerate() {
            if s.duration_ps == 0 {
                return Err(ConfigError::Schedule(format!("setting {i} has zero duration")));
            }
            if !(s.malta_angle.is_finite() && s.sicily_angle.is_finite()) {
                return Err(ConfigError::Schedule(format!("setting {i} has a non-finite angle")));
            }
        }
        for (i, w) in settings.windows(2).enumerate() {
            if w[1].start_ps < w[0].end_ps() {
                return Err(ConfigError::Schedule(format!(
                    "setting {} starts before setting {i} ends (unsorted or overlapping)",
                    i + 1
                )));
            }
        }
        Ok(Self { settings })
    }

    /// A single setting held for the whole run.
    pub fn constant(malta_angle: f64, sicily_angle: f64, duration_s: f64) -> Self {
        Self {
            settings: vec![ScheduledSetting {
                start_ps: 0,
                duration_ps: (duration_s * PS_PER_S).round() as u64,
                malta_angle,
                sicily_angle,
            }],
        }
    }

    pub fn settings(&self) -> &[ScheduledSetting] {
        &self.settings
    }

    pub fn is_empty(&self) -> bool {
        self.settings.is_empty()
    }

    pub fn end_ps(&self) -> u64 {
        self.settings.last().map_or(0, |s| s.end_ps())
    }

    /// Index of the setting active at `t_ps`.
    pub fn setting_at(&self, t_ps: u64) -> Option<usize> {
        let idx = self.settings.partition_point(|s| s.end_ps() <= t_ps);
        (idx < self.settings.len() && self.settings[idx].contains(t_ps)).then_some(idx)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let entries = parse_lines(text)?;
        let mut builder = ScheduleBuilder::default();
        for (line, key, value) in entries {
            if !builder.accept(line, &key, &value)? {
                return Err(ConfigError::UnknownKey { line, key });
            }
        }
        builder.finish()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_schedule(&mut out, self);
        out
    }
}

/// All physical parameters of source, fibre, detectors and clocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub duration_s: f64,
    /// Pairs per second produced by the source.
    pub pair_rate: f64,
    /// Malta arm transmission including heralding and coupling.
    pub malta_arm_efficiency: f64,
    /// Sicily arm transmission excluding the fibre loss.
    pub sicily_arm_efficiency: f64,
    pub fibre_loss_db: f64,
    pub fibre_delay_ps: u64,
    /// Chromatic dispersion as extra Gaussian timing spread on the Sicily arm.
    pub dispersion_fwhm_ps: f64,
    pub channel: ChannelConfig,
    pub v_werner: f64,
    pub hv_dephasing: f64,
    pub malta: StationConfig,
    pub sicily: StationConfig,
    pub schedule: Schedule,
    /// Metadata only.
    pub signal_wavelength_nm: f64,
    /// Metadata only.
    pub idler_wavelength_nm: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            duration_s: 1.0,
            pair_rate: 1e5,
            malta_arm_efficiency: 1.0,
            sicily_arm_efficiency: 1.0,
            fibre_loss_db: 0.0,
            fibre_delay_ps: 0,
            dispersion_fwhm_ps: 0.0,
            channel: ChannelConfig::identity(),
            v_werner: 1.0,
            hv_dephasing: 0.0,
            malta: StationConfig::ideal(),
            sicily: StationConfig::ideal(),
            schedule: Schedule::default(),
            signal_wavelength_nm: 1548.52,
            idler_wavelength_nm: 1551.72,
        }
    }
}

const MALTA_SICILY: &str = include_str!("../../presets/malta-sicily.cfg");

impl LinkConfig {
    /// Shipped presets by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "malta-sicily" => Some(Self::parse(MALTA_SICILY).expect("bundled preset parses")),
            _ => None,
        }
    }

    pub fn fibre_transmission(&self) -> f64 {
        10f64.powf(-self.fibre_loss_db / 10.0)
    }

    pub fn duration_ps(&self) -> u64 {
        (self.duration_s * PS_PER_S).round() as u64
    }

    /// Source state after noise, channel and compensation, as seen by the analyzers.
    pub fn delivered_state(&self) -> Result<TwoQubitState, ConfigError> {
        let src = state::noisy_source(self.v_werner, self.hv_dephasing).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        state::apply_local_unitary(&src, &self.channel.effective_unitary()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Effective schedule: the configured one, or a single H/H setting for the whole run.
    pub fn effective_schedule(&self) -> Schedule {
        if self.schedule.is_empty() {
            Schedule::constant(0.0, 0.0, self.duration_s)
        } else {
            self.schedule.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} = {v} outside [0,1]")))
            }
        };
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(ConfigError::Invalid("duration_s must be >= 0".into()));
        }
        if !(self.pair_rate >= 0.0 && self.pair_rate.is_finite()) {
            return Err(ConfigError::Invalid("pair_rate_per_s must be >= 0".into()));
        }
        unit("malta_arm_efficiency", self.malta_arm_efficiency)?;
        unit("sicily_arm_efficiency", self.sicily_arm_efficiency)?;
        unit("werner_visibility", self.v_werner)?;
        unit("hv_dephasing", self.hv_dephasing)?;
        if !(self.fibre_loss_db >= 0.0 && self.fibre_loss_db.is_finite()) {
            return Err(ConfigError::Invalid("fibre_loss_db must be >= 0".into()));
        }
        if !(self.dispersion_fwhm_ps >= 0.0 && self.dispersion_fwhm_ps.is_finite()) {
            return Err(ConfigError::Invalid("dispersion_fwhm_ps must be >= 0".into()));
        }
        for st in [&self.malta, &self.sicily] {
            for d in &st.detectors {
                d.validate()?;
            }
            st.clock.validate()?;
        }
        if self.schedule.end_ps() > self.duration_ps() {
            return Err(ConfigError::Schedule(format!(
                "schedule ends at {} s, after the run duration {} s",
                self.schedule.end_ps() as f64 / PS_PER_S,
                self.duration_s
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let entries = parse_lines(text)?;
        let mut cfg = LinkConfig::default();
        let mut schedule = ScheduleBuilder::default();
        for (line, key, value) in entries {
            if schedule.accept(line, &key, &value)? {
                continue;
            }
            let num = || parse_f64(line, &key, &value);
            let int = || parse_u64(line, &key, &value);
            match key.as_str() {
                "duration_s" => cfg.duration_s = num()?,
                "pair_rate_per_s" => cfg.pair_rate = num()?,
                "malta_arm_efficiency" => cfg.malta_arm_efficiency = num()?,
                "sicily_arm_efficiency" => cfg.sicily_arm_efficiency = num()?,
                "fibre_loss_db" => cfg.fibre_loss_db = num()?,
                "fibre_delay_ps" => cfg.fibre_delay_ps = int()?,
                "dispersion_fwhm_ps" => cfg.dispersion_fwhm_ps = num()?,
                "channel_theta_deg" => cfg.channel.theta = num()?.to_radians(),
                "channel_phi_deg" => cfg.channel.phi = num()?.to_radians(),
                "channel_lambda_deg" => cfg.channel.lambda = num()?.to_radians(),
                "channel_compensation" => {
                    cfg.channel.compensation = match value.as_str() {
                        "none" => Compensation::None,
                        "probes" => Compensation::Probes,
                        _ => return Err(bad(line, &key, &value)),
                    }
                }
                "werner_visibility" => cfg.v_werner = num()?,
                "hv_dephasing" => cfg.hv_dephasing = num()?,
                "signal_wavelength_nm" => cfg.signal_wavelength_nm = num()?,
                "idler_wavelength_nm" => cfg.idler_wavelength_nm = num()?,
                _ => {
                    if !station_key(&mut cfg, line, &key, &value)? {
                        return Err(ConfigError::UnknownKey { line, key });
                    }
                }
            }
        }
        cfg.schedule = schedule.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("duration_s", fmt_f64(self.duration_s));
        kv("pair_rate_per_s", fmt_f64(self.pair_rate));
        kv("malta_arm_efficiency", fmt_f64(self.malta_arm_efficiency));
        kv("sicily_arm_efficiency", fmt_f64(self.sicily_arm_efficiency));
        kv("fibre_loss_db", fmt_f64(self.fibre_loss_db));
        kv("fibre_delay_ps", self.fibre_delay_ps.to_string());
        kv("dispersion_fwhm_ps", fmt_f64(self.dispersion_fwhm_ps));
        kv("channel_theta_deg", fmt_f64(self.channel.theta.to_degrees()));
        kv("channel_phi_deg", fmt_f64(self.channel.phi.to_degrees()));
        kv("channel_lambda_deg", fmt_f64(self.channel.lambda.to_degrees()));
        kv(
            "channel_compensation",
            match self.channel.compensation {
                Compensation::None => "none".into(),
                Compensation::Probes => "probes".into(),
            },
        );
        kv("werner_visibility", fmt_f64(self.v_werner));
        kv("hv_dephasing", fmt_f64(self.hv_dephasing));
        kv("signal_wavelength_nm", fmt_f64(self.signal_wavelength_nm));
        kv("idler_wavelength_nm", fmt_f64(self.idler_wavelength_nm));
        for (name, st) in [("malta", &self.malta), ("sicily", &self.sicily)] {
            for (ch, d) in st.detectors.iter().enumerate() {
                kv(&format!("{name}_efficiency_ch{ch}"), fmt_f64(d.efficiency));
                kv(&format!("{name}_dark_rate_cps_ch{ch}"), fmt_f64(d.dark_rate));
                kv(&format!("{name}_dead_time_ps_ch{ch}"), d.dead_time_ps.to_string());
                kv(&format!("{name}_jitter_fwhm_ps_ch{ch}"), fmt_f64(d.jitter_fwhm_ps));
            }
            kv(&format!("{name}_clock_offset_ps"), st.clock.offset_ps.to_string());
            kv(&format!("{name}_clock_drift_ppm"), fmt_f64(st.clock.drift_ppm));
            kv(&format!("{name}_clock_resolution_ps"), st.clock.resolution_ps.to_string());
        }
        write_schedule(&mut out, &self.schedule);
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.finalize().into()
    }
}

fn station_key(cfg: &mut LinkConfig, line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    let (station, rest) = if let Some(r) = key.strip_prefix("malta_") {
        (&mut cfg.malta, r)
    } else if let Some(r) = key.strip_prefix("sicily_") {
        (&mut cfg.sicily, r)
    } else {
        return Ok(false);
    };
    match rest {
        "clock_offset_ps" => {
            station.clock.offset_ps = value.parse().map_err(|_| bad(line, key, value))?;
            return Ok(true);
        }
        "clock_drift_ppm" => {
            station.clock.drift_ppm = parse_f64(line, key, value)?;
            return Ok(true);
        }
        "clock_resolution_ps" => {
            station.clock.resolution_ps = parse_u64(line, key, value)?;
            return Ok(true);
        }
        _ => {}
    }
    let Some((param, ch)) = rest.rsplit_once("_ch") else {
        return Ok(false);
    };
    let ch: usize = match ch.parse() {
        Ok(c) if c < 2 => c,
        _ => return Ok(false),
    };
    let d = &mut station.detectors[ch];
    match param {
        "efficiency" => d.efficiency = parse_f64(line, key, value)?,
        "dark_rate_cps" => d.dark_rate = parse_f64(line, key, value)?,
        "dead_time_ps" => d.dead_time_ps = parse_u64(line, key, value)?,
        "jitter_fwhm_ps" => d.jitter_fwhm_ps = parse_f64(line, key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[derive(Default)]
struct ScheduleBuilder {
    // index -> (start_s, malta_deg, sicily_deg, duration_s)
    slots: BTreeMap<usize, [Option<(f64, usize)>; 4]>,
}

impl ScheduleBuilder {
    fn accept(&mut self, line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
        let Some(rest) = key.strip_prefix("setting") else {
            return Ok(false);
        };
        let Some((idx, field)) = rest.split_once('_') else {
            return Ok(false);
        };
        let Ok(idx) = idx.parse::<usize>() else {
            return Ok(false);
        };
        let slot = match field {
            "start_s" => 0,
            "malta_deg" => 1,
            "sicily_deg" => 2,
            "duration_s" => 3,
            _ => return Ok(false),
        };
        let v = parse_f64(line, key, value)?;
        let entry = self.slots.entry(idx).or_default();
        entry[slot] = Some((v, line));
        Ok(true)
    }

    fn finish(self) -> Result<Schedule, ConfigError> {
        let mut settings = Vec::with_capacity(self.slots.len());
        for (idx, fields) in self.slots {
            let get = |i: usize, name: &str| {
                fields[i].map(|(v, _)| v).ok_or_else(|| ConfigError::Schedule(format!("setting{idx}_{name} missing")))
            };
            let start = get(0, "start_s")?;
            let dur = get(3, "duration_s")?;
            if start < 0.0 || dur <= 0.0 {
                return Err(ConfigError::Schedule(format!("setting{idx} has negative start or non-positive duration")));
            }
            settings.push(ScheduledSetting {
                start_ps: (start * PS_PER_S).round() as u64,
                duration_ps: (dur * PS_PER_S).round() as u64,
                malta_angle: get(1, "malta_deg")?.to_radians(),
                sicily_angle: get(2, "sicily_deg")?.to_radians(),
            });
        }
        Schedule::new(settings)
    }
}

fn write_schedule(out: &mut String, schedule: &Schedule) {
    for (i, s) in schedule.settings().iter().enumerate() {
        let _ = writeln!(out, "setting{i}_start_s = {}", fmt_f64(s.start_ps as f64 / PS_PER_S));
        let _ = writeln!(out, "setting{i}_malta_deg = {}", fmt_f64(s.malta_angle.to_degrees()));
        let _ = writeln!(out, "setting{i}_sicily_deg = {}", fmt_f64(s.sicily_angle.to_degrees()));
        let _ = writeln!(out, "setting{i}_duration_s = {}", fmt_f64(s.duration_ps as f64 / PS_PER_S));
    }
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if seen.insert(k.to_string(), line).is_some() {
            return Err(ConfigError::DuplicateKey { line, key: k.to_string() });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn bad(line: usize, key: &str, value: &str) -> ConfigError {
    ConfigError::BadValue { line, key: key.to_string(), value: value.to_string() }
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(line, key, value))
}

fn parse_u64(line: usize, key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse::<u64>().map_err(|_| bad(line, key, value))
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation
    format!("{v:?}")
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}
