use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::scene::{BevSpec, GenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    /// Global gradient-norm clip; off when absent.
    pub clip: Option<f64>,
    /// Fraction of the run after which the learning rate falls linearly to zero;
    /// constant when absent.
    pub decay_from: Option<f64>,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            weight_decay: 0.01,
            steps: 2000,
            batch: 4,
            clip: Some(5.0),
            decay_from: Some(0.6),
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub bev: BevSpec,
    pub gen: GenConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Scene count for `generate` and for in-memory training sets.
    pub scenes: usize,
    /// Gaussian noise on the BEV occupancy channels.
    pub bev_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            bev: BevSpec::default(),
            gen: GenConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            scenes: 20,
            bev_noise: 0.05,
        }
    }
}

fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown key `{sub}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Unquoted strings become JSON strings, everything else is read as JSON.
fn parse_scalar(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bev.validate()?;
        self.gen.validate(&self.bev)?;
        self.loss.validate()?;
        let o = &self.optim;
        let decay_ok = o.decay_from.map_or(true, |f| (0.0..=1.0).contains(&f));
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || o.batch == 0 || !decay_ok {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.gen.max_lanes > self.model.n_queries {
            return Err(Error::Config(format!(
                "scenes may hold {} lanes but there are only {} queries",
                self.gen.max_lanes, self.model.n_queries
            )));
        }
        if !(self.bev_noise >= 0.0) {
            return Err(Error::Config("bev_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Overlays a JSON object onto `self`; unknown keys are rejected.
    pub fn apply_json(&self, patch: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, patch, "")?;
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets one dotted key, e.g. `model.cyclic=false`.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        let mut patch = parse_scalar(value.trim());
        for part in key.trim().split('.').rev() {
            let mut m = Map::new();
            m.insert(part.to_string(), patch);
            patch = Value::Object(m);
        }
        self.apply_json(&patch)
    }

    /// Parses a JSON document or flat `key=value` lines (`#` comments allowed)
    /// onto the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim_start();
        let cfg = if t.starts_with('{') {
            let v: Value = serde_json::from_str(t).map_err(|e| Error::Config(e.to_string()))?;
            Self::default().apply_json(&v)?
        } else {
            let mut cfg = Self::default();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
                cfg = cfg.set(k, v)?;
            }
            cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_json_agree() {
        let a = RunConfig::parse("model.cyclic = false\noptim.lr=1e-3 # faster\nloss.topo=focal\n").unwrap();
        let b = RunConfig::parse(r#"{"model":{"cyclic":false},"optim":{"lr":0.001},"loss":{"topo":"focal"}}"#).unwrap();
        assert_eq!(a, b);
        assert!(!a.model.cyclic);
        assert_eq!(a.optim.weight_decay, 0.01);
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(RunConfig::parse("model.nope=1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("garbage"), Err(Error::Config(_))));
    }
}
