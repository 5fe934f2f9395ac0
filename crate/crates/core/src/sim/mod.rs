pub mod config;
pub mod engine;
pub mod metrics;
pub mod presets;
pub mod sweep;

pub use config::{ConfigError, ScenarioConfig};
pub use engine::{run, SimError};
pub use metrics::RunMetrics;
pub use sweep::run_sweep;
