//! Run configuration: one TOML file with a section per stage, plus
//! `section.key=value` overrides from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{ProbeConfig, DEFAULT_TOP_FRACTION};
use crate::error::{Error, Result};
use crate::mil_net::TrainConfig;
use crate::stats::BootstrapConfig;
use crate::synthgen::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of internally stained bags, most recent first, held out as the temporal set.
    pub temporal_fraction: f64,
    pub k: usize,
    pub seed: u64,
    /// Targets with fewer positive bags are left out of training.
    pub min_positives: usize,
    /// Targets kept regardless of their positive count.
    pub overrides: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { temporal_fraction: 0.2, k: 5, seed: 0, min_positives: 20, overrides: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub replicates: usize,
    pub level: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { replicates: 10_000, level: 0.95, alpha: 0.05, seed: 0 }
    }
}

impl StatsConfig {
    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig { replicates: self.replicates, level: self.level, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnConfig {
    pub top_fraction: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig { top_fraction: DEFAULT_TOP_FRACTION }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub stats: StatsConfig,
    pub probe: ProbeConfig,
    pub attn: AttnConfig,
}

fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        // Dates are kept as strings, which is what the typed fields expect.
        Ok(mut t) => match t.remove("v") {
            Some(toml::Value::Datetime(d)) => toml::Value::String(d.to_string()),
            Some(v) => v,
            None => toml::Value::String(text.to_string()),
        },
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Applies one `section.key=value` override to a raw config table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} must look like section.key")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    /// Reads `path` when given, then applies the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let s = &self.split;
        if !(0.0..1.0).contains(&s.temporal_fraction) {
            return Err(Error::Config("split.temporal_fraction must be in [0,1)".into()));
        }
        if s.k < 3 {
            return Err(Error::Config("split.k must be >= 3 (train, selection and test folds)".into()));
        }
        if s.min_positives == 0 {
            return Err(Error::Config("split.min_positives must be >= 1".into()));
        }
        let st = &self.stats;
        if st.replicates == 0 || !(st.level > 0.0 && st.level < 1.0) || !(st.alpha > 0.0 && st.alpha < 1.0) {
            return Err(Error::Config("stats: replicates >= 1, level and alpha in (0,1)".into()));
        }
        let p = &self.probe;
        if !(p.l2 >= 0.0) || !(p.test_fraction > 0.0 && p.test_fraction < 1.0) || p.max_iter == 0 {
            return Err(Error::Config("probe: l2 >= 0, test_fraction in (0,1), max_iter >= 1".into()));
        }
        if !(self.attn.top_fraction > 0.0 && self.attn.top_fraction <= 1.0) {
            return Err(Error::Config("attn.top_fraction must be in (0,1]".into()));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every configuration key with its default, as `section.key = value`.
pub fn default_keys() -> Vec<(String, String)> {
    let value = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[train]\nlearning_rat = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[nosuch]\n"), Err(Error::Config(_))));
        assert!(RunConfig::load(None, &["train.nosuch=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::load(
            None,
            &[
                "train.learning_rate=0.5".into(),
                "train.learning_rate = 3e-3".into(),
                "synth.cohort_id=crc".into(),
                "synth.start_date=2020-02-03".into(),
                "split.overrides=[\"ALT_H\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.learning_rate, 3e-3);
        assert_eq!(c.synth.cohort_id, "crc");
        assert_eq!(c.synth.start_date.to_string(), "2020-02-03");
        assert_eq!(c.split.overrides, vec!["ALT_H".to_string()]);
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
        assert!(RunConfig::load(None, &["flat=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::load(None, &["split.k=2".into()]).is_err());
        assert!(RunConfig::load(None, &["stats.level=1.0".into()]).is_err());
        assert!(RunConfig::load(None, &["train.batch_size=0".into()]).is_err());
    }

    #[test]
    fn key_listing_covers_every_section() {
        let keys = default_keys();
        for k in ["synth.signal_amplitude", "train.learning_rate", "split.k", "stats.alpha", "probe.l2", "attn.top_fraction"] {
            assert!(keys.iter().any(|(key, _)| key == k), "{k} missing");
        }
        let alpha = keys.iter().find(|(k, _)| k == "stats.alpha").unwrap();
        assert_eq!(alpha.1, "0.05");
    }
}
