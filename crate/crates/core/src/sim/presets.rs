//! Scenarios bundled with the binary, addressable by name.

use super::config::{ConfigError, ScenarioConfig};

pub const PRESETS: [(&str, &str); 6] = [
    ("baseline_attack", include_str!("../../scenarios/baseline_attack.toml")),
    ("override_script", include_str!("../../scenarios/override_script.toml")),
    ("honest_fork", include_str!("../../scenarios/honest_fork.toml")),
    ("adaptive_empty", include_str!("../../scenarios/adaptive_empty.toml")),
    ("adaptive_future", include_str!("../../scenarios/adaptive_future.toml")),
    ("all_honest", include_str!("../../scenarios/all_honest.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<ScenarioConfig, ConfigError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::UnknownScenario(name.to_string()))?;
    ScenarioConfig::parse(text, false).map_err(|message| ConfigError::Parse {
        path: format!("<preset {name}>"),
        message,
    })
}
