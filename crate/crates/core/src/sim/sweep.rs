use rayon::prelude::*;

use super::config::ScenarioConfig;
use super::engine::{run, splitmix64, SimError};
use super::metrics::RunMetrics;

/// Seed for one sweep point. Depends on the value, not its position, so
/// permuting `values` permutes the results.
pub fn derived_seed(base: u64, axis: &str, value: f64) -> u64 {
    if axis == "seed" {
        return value as u64;
    }
    splitmix64(base ^ splitmix64(value.to_bits()))
}

/// Configs for every point of a sweep, validated up front.
pub fn sweep_configs(base: &ScenarioConfig, axis: &str, values: &[f64]) -> Result<Vec<ScenarioConfig>, SimError> {
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.with_axis(axis, v)?;
            cfg.seed = derived_seed(base.seed, axis, v);
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Runs every point in parallel; results follow the order of `values`.
pub fn run_sweep(base: &ScenarioConfig, axis: &str, values: &[f64]) -> Result<Vec<RunMetrics>, SimError> {
    let configs = sweep_configs(base, axis, values)?;
    configs.par_iter().map(run).collect()
}
