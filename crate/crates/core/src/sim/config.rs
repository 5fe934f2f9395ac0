use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::EstimatorConfig;
use crate::policy::PolicyConfig;
use crate::strategy::MinerSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown sweep axis '{0}'")]
    UnknownAxis(String),
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Fee-per-size distribution for generated transactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeeDistribution {
    Constant { rate: f64 },
    Uniform { min: f64, max: f64 },
    Exponential { mean: f64 },
}

impl Default for FeeDistribution {
    fn default() -> Self {
        Self::Uniform { min: 1.0, max: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: u32,
    pub max: u32,
}

impl Default for SizeRange {
    fn default() -> Self {
        Self { min: 200, max: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDelay {
    pub from: String,
    pub to: String,
    pub delay: f64,
}

/// Per-edge block propagation delay on a complete graph. `min == max` is a
/// constant delay; otherwise each message draws uniformly from the range.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    #[serde(default)]
    pub min: f64,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub overrides: Vec<EdgeDelay>,
}

impl PropagationConfig {
    pub fn constant(delay: f64) -> Self {
        Self {
            min: delay,
            max: None,
            overrides: Vec::new(),
        }
    }

    pub fn upper(&self) -> f64 {
        self.max.unwrap_or(self.min)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSettings {
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub incoming_rate: f64,
}

/// Clients colluding with an attacker: a fraction of new transactions is
/// stamped `tip + stamp_offset` instead of the honest estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialClients {
    pub fraction: f64,
    pub stamp_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnExhausted {
    #[default]
    Stop,
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub miner: String,
    pub at: f64,
}

/// Forced discovery order replacing the mining lottery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub steps: Vec<ScriptStep>,
    #[serde(default)]
    pub on_exhausted: OnExhausted,
}

fn default_interval() -> f64 {
    10.0
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_blocks: u64,
    /// Mean time between blocks, in minutes.
    #[serde(default = "default_interval")]
    pub block_interval: f64,
    #[serde(default = "one")]
    pub block_reward: f64,
    /// Price of the rented hash power, per hour.
    #[serde(default)]
    pub rent_cost_per_hour: f64,
    pub block_capacity: usize,
    /// Mean transactions per block interval.
    pub tx_arrival_rate: f64,
    #[serde(default)]
    pub fee_distribution: FeeDistribution,
    #[serde(default)]
    pub tx_size: SizeRange,
    pub policy: PolicyConfig,
    #[serde(default = "one")]
    pub compliance_fraction: f64,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub adversarial_clients: Option<AdversarialClients>,
    #[serde(default)]
    pub propagation_delay: PropagationConfig,
    pub miners: Vec<MinerSpec>,
    #[serde(default)]
    pub script: Option<Script>,
    /// Check chain invariants after every event.
    #[serde(default)]
    pub audit: bool,
}

const SHARE_TOLERANCE: f64 = 1e-9;

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be finite and non-negative, got {v}")))
    }
}

fn unit_interval(field: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: display.clone(),
            source,
        })?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, is_json).map_err(|message| ConfigError::Parse {
            path: display,
            message,
        })
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, String> {
        if json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            capacity_per_block: self.block_capacity,
            noise_sigma: self.estimator.noise_sigma,
            incoming_rate: self.estimator.incoming_rate,
        }
    }

    pub fn miner_index(&self, id: &str) -> Option<usize> {
        self.miners.iter().position(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.miners.is_empty() {
            return Err(ConfigError::invalid("miners", "at least one miner is required"));
        }
        let mut ids = BTreeSet::new();
        let mut total = 0.0;
        for (i, m) in self.miners.iter().enumerate() {
            let field = |name: &str| format!("miners[{i}].{name}");
            if !ids.insert(m.id.as_str()) {
                return Err(ConfigError::invalid(field("id"), format!("duplicate miner id '{}'", m.id)));
            }
            unit_interval(&field("hash_share"), m.hash_share)?;
            non_negative(&field("rented_share"), m.rented_share)?;
            if m.hash_share + m.rented_share > 1.0 + SHARE_TOLERANCE {
                return Err(ConfigError::invalid(
                    field("rented_share"),
                    "hash_share + rented_share exceeds 1",
                ));
            }
            if m.strategy.is_selfish() && m.private_chain_length < 2 {
                return Err(ConfigError::invalid(
                    field("private_chain_length"),
                    "selfish strategies need a private chain of at least 2 blocks",
                ));
            }
            total += m.hash_share;
        }
        if (total - 1.0).abs() > SHARE_TOLERANCE {
            return Err(ConfigError::invalid(
                "miners.hash_share",
                format!("hash shares sum to {total}, expected 1"),
            ));
        }
        if self.duration_blocks < 10 {
            return Err(ConfigError::invalid("duration_blocks", "must be at least 10"));
        }
        if !(self.block_interval.is_finite() && self.block_interval > 0.0) {
            return Err(ConfigError::invalid("block_interval", "must be positive"));
        }
        non_negative("block_reward", self.block_reward)?;
        non_negative("rent_cost_per_hour", self.rent_cost_per_hour)?;
        non_negative("tx_arrival_rate", self.tx_arrival_rate)?;
        unit_interval("compliance_fraction", self.compliance_fraction)?;
        if self.block_capacity == 0 {
            return Err(ConfigError::invalid("block_capacity", "must be at least 1"));
        }
        self.estimator_config()
            .validate()
            .map_err(|e| ConfigError::invalid("estimator", e.to_string()))?;
        if let Some(adv) = &self.adversarial_clients {
            unit_interval("adversarial_clients.fraction", adv.fraction)?;
            if adv.stamp_offset == 0 {
                return Err(ConfigError::invalid("adversarial_clients.stamp_offset", "must be at least 1"));
            }
        }
        match self.fee_distribution {
            FeeDistribution::Constant { rate } => non_negative("fee_distribution.rate", rate)?,
            FeeDistribution::Uniform { min, max } => {
                non_negative("fee_distribution.min", min)?;
                non_negative("fee_distribution.max", max)?;
                if max < min {
                    return Err(ConfigError::invalid("fee_distribution.max", "must be >= min"));
                }
            }
            FeeDistribution::Exponential { mean } => {
                if !(mean.is_finite() && mean > 0.0) {
                    return Err(ConfigError::invalid("fee_distribution.mean", "must be positive"));
                }
            }
        }
        if self.tx_size.min == 0 || self.tx_size.max < self.tx_size.min {
            return Err(ConfigError::invalid("tx_size", "need 1 <= min <= max"));
        }
        let delay = &self.propagation_delay;
        non_negative("propagation_delay.min", delay.min)?;
        non_negative("propagation_delay.max", delay.upper())?;
        if delay.upper() < delay.min {
            return Err(ConfigError::invalid("propagation_delay.max", "must be >= min"));
        }
        for (i, edge) in delay.overrides.iter().enumerate() {
            for end in [&edge.from, &edge.to] {
                if self.miner_index(end).is_none() {
                    return Err(ConfigError::invalid(
                        format!("propagation_delay.overrides[{i}]"),
                        format!("unknown miner '{end}'"),
                    ));
                }
            }
            non_negative(&format!("propagation_delay.overrides[{i}].delay"), edge.delay)?;
        }
        if let PolicyConfig::Zeroblock {
            expected_interval,
            tolerance_factor,
        } = self.policy
        {
            if !(expected_interval > 0.0 && tolerance_factor > 0.0) {
                return Err(ConfigError::invalid(
                    "policy",
                    "zeroblock needs positive expected_interval and tolerance_factor",
                ));
            }
        }
        if let Some(script) = &self.script {
            let mut last = 0.0;
            for (i, step) in script.steps.iter().enumerate() {
                if self.miner_index(&step.miner).is_none() {
                    return Err(ConfigError::invalid(
                        format!("script.steps[{i}].miner"),
                        format!("unknown miner '{}'", step.miner),
                    ));
                }
                if !(step.at.is_finite() && step.at >= last) {
                    return Err(ConfigError::invalid(
                        format!("script.steps[{i}].at"),
                        "times must be finite and non-decreasing",
                    ));
                }
                last = step.at;
            }
        }
        Ok(())
    }

    /// Sets one numeric field by name, as used by sweeps.
    pub fn with_axis(&self, axis: &str, value: f64) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        match axis {
            "alpha" => cfg.set_alpha(value)?,
            "seed" => cfg.seed = value as u64,
            "noise_sigma" => cfg.estimator.noise_sigma = value,
            "incoming_rate" => cfg.estimator.incoming_rate = value,
            "compliance_fraction" => cfg.compliance_fraction = value,
            "tx_arrival_rate" => cfg.tx_arrival_rate = value,
            "block_interval" => cfg.block_interval = value,
            "block_reward" => cfg.block_reward = value,
            "rent_cost_per_hour" => cfg.rent_cost_per_hour = value,
            "duration_blocks" => cfg.duration_blocks = value as u64,
            "block_capacity" => cfg.block_capacity = value as usize,
            "propagation_delay" => cfg.propagation_delay = PropagationConfig::constant(value),
            "rented_share" => cfg.first_selfish_mut()?.rented_share = value,
            "private_chain_length" => cfg.first_selfish_mut()?.private_chain_length = value as usize,
            other => return Err(ConfigError::UnknownAxis(other.to_string())),
        }
        Ok(cfg)
    }

    fn first_selfish_mut(&mut self) -> Result<&mut MinerSpec, ConfigError> {
        self.miners
            .iter_mut()
            .find(|m| m.strategy.is_selfish())
            .ok_or_else(|| ConfigError::invalid("miners", "no selfish miner to sweep"))
    }

    /// Gives the first selfish miner `alpha` and rescales everyone else to fill the rest.
    fn set_alpha(&mut self, alpha: f64) -> Result<(), ConfigError> {
        unit_interval("alpha", alpha)?;
        let idx = self
            .miners
            .iter()
            .position(|m| m.strategy.is_selfish())
            .ok_or_else(|| ConfigError::invalid("miners", "no selfish miner to sweep"))?;
        let others: f64 = self
            .miners
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, m)| m.hash_share)
            .sum();
        let count = self.miners.len() - 1;
        for (i, m) in self.miners.iter_mut().enumerate() {
            if i == idx {
                m.hash_share = alpha;
            } else if others > 0.0 {
                m.hash_share *= (1.0 - alpha) / others;
            } else {
                m.hash_share = (1.0 - alpha) / count as f64;
            }
        }
        let rented = self.miners[idx].rented_share;
        self.miners[idx].rented_share = rented.min(1.0 - alpha);
        Ok(())
    }
}
