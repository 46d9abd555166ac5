//! Scenario files: TOML documents with the sections `[microgrid]`,
//! `[attack]`, `[observer]`, `[detector]` and `[sim]`.
//!
//! Every section is optional and falls back to the benchmark defaults. An
//! empty `[attack]` table means no attack. Unknown keys are rejected.

use serde::{Deserialize, Deserializer, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::microgrid::sim::{AttackPlan, ObserverConfig, SimOptions};
use crate::microgrid::MicrogridConfig;

/// The bundled benchmark scenario.
pub const BENCHMARK_CFG: &str = include_str!("../../scenarios/benchmark.cfg");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "MicrogridConfig::benchmark")]
    pub microgrid: MicrogridConfig,
    #[serde(default, deserialize_with = "attack_or_none")]
    pub attack: AttackPlan,
    #[serde(default)]
    pub observer: ObserverConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub sim: SimSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub duration: f64,
    pub dt: f64,
    pub substeps: usize,
    /// Seed of the stochastic attack samples.
    pub seed: u64,
    /// Peak deviations and the summary margin are taken from this time on.
    pub settle: f64,
    /// Output directory; overrides the environment default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Default for SimSection {
    fn default() -> Self {
        let o = SimOptions::default();
        Self { duration: o.duration, dt: o.dt, substeps: o.substeps, seed: o.seed, settle: 0.4, output: None }
    }
}

impl SimSection {
    pub fn options(&self) -> SimOptions {
        SimOptions { duration: self.duration, dt: self.dt, substeps: self.substeps, seed: self.seed, ..SimOptions::default() }
    }
}

fn attack_or_none<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackPlan, D::Error> {
    let t = toml::Table::deserialize(d)?;
    if t.is_empty() {
        return Ok(AttackPlan::None);
    }
    AttackPlan::deserialize(toml::Value::Table(t)).map_err(serde::de::Error::custom)
}

fn at(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Config { path: path.into(), reason: e.to_string() }
}

impl ScenarioConfig {
    pub fn benchmark() -> Self {
        parse_config(BENCHMARK_CFG).expect("bundled benchmark scenario is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.microgrid.validate()?;
        self.attack.validate(self.microgrid.n()).map_err(|e| at("attack", e))?;
        let [re, _] = self.observer.pole_pair;
        let [lo, hi] = self.observer.pole_range;
        if !(re > 0.0 && lo > 0.0 && hi >= lo) {
            return Err(at("observer", "pole_pair[0] and pole_range must be positive with pole_range[1] ≥ pole_range[0]"));
        }
        self.detector.validate().map_err(|e| at("detector", e))?;
        self.sim.options().validate().map_err(|e| at("sim", e))?;
        if !(self.sim.settle >= 0.0 && self.sim.settle < self.sim.duration) {
            return Err(at("sim.settle", "must lie in [0, duration)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(format!("serialising scenario: {e}")))
    }
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parse and validate a scenario document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let path = e.span().map_or_else(|| "document".to_string(), |s| format!("line {}", line_of(text, s.start)));
        Error::Config { path, reason: e.message().trim().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

enum Seg<'a> {
    Key(&'a str),
    Index(usize),
}

fn segments(path: &str) -> Option<Vec<Seg<'_>>> {
    let mut out = Vec::new();
    for part in path.split('.') {
        let (key, mut rest) = part.split_once('[').map_or((part, ""), |(k, r)| (k, r));
        if key.is_empty() {
            return None;
        }
        out.push(Seg::Key(key));
        while !rest.is_empty() {
            let (num, tail) = rest.split_once(']')?;
            out.push(Seg::Index(num.parse().ok()?));
            rest = tail.strip_prefix('[').unwrap_or(tail);
            if !tail.is_empty() && !tail.starts_with('[') {
                return None;
            }
        }
    }
    Some(out)
}

/// Replace the value at a dotted path such as `attack.b` or
/// `microgrid.dgs[2].m_p` and return the re-validated scenario. The value
/// is a TOML literal. Defaulted keys are addressable.
pub fn override_param(text: &str, path: &str, value: &str) -> Result<ScenarioConfig> {
    let full = parse_config(text)?.to_toml()?;
    let mut doc: toml::Table = toml::from_str(&full).map_err(|e| at("document", e.message().trim()))?;
    let segs = segments(path).ok_or_else(|| Error::Input(format!("malformed parameter path '{path}'")))?;
    let parsed: toml::Table = toml::from_str(&format!("v = {value}")).map_err(|_| Error::Input(format!("'{value}' is not a TOML value")))?;
    let new = parsed["v"].clone();
    let missing = || Error::Input(format!("parameter '{path}' is not present in the scenario"));
    let mut slot = None::<&mut toml::Value>;
    for seg in &segs {
        slot = Some(match (slot, seg) {
            (None, Seg::Key(k)) => doc.get_mut(*k).ok_or_else(missing)?,
            (Some(toml::Value::Table(t)), Seg::Key(k)) => t.get_mut(*k).ok_or_else(missing)?,
            (Some(toml::Value::Array(a)), Seg::Index(i)) => a.get_mut(*i).ok_or_else(missing)?,
            _ => return Err(missing()),
        });
    }
    *slot.ok_or_else(missing)? = new;
    let text = toml::to_string(&doc).map_err(|e| Error::Io(e.to_string()))?;
    parse_config(&text)
}
