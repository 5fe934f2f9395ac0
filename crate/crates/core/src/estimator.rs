//! Client-side expected confirmation height.
//!
//! A transaction is ranked against the pending pool by fee-per-size and packed
//! into successive blocks of `capacity_per_block`. Expected arrivals that outrank
//! it push the estimate back, and an optional rounded Gaussian term perturbs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Mempool, Transaction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub capacity_per_block: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub incoming_rate: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorConfigError {
    #[error("capacity_per_block must be at least 1")]
    Capacity,
    #[error("noise_sigma must be finite and non-negative, got {0}")]
    Noise(f64),
    #[error("incoming_rate must be finite and non-negative, got {0}")]
    IncomingRate(f64),
}

impl EstimatorConfig {
    pub fn exact(capacity_per_block: usize) -> Self {
        Self {
            capacity_per_block,
            noise_sigma: 0.0,
            incoming_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorConfigError> {
        if self.capacity_per_block == 0 {
            return Err(EstimatorConfigError::Capacity);
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(EstimatorConfigError::Noise(self.noise_sigma));
        }
        if !self.incoming_rate.is_finite() || self.incoming_rate < 0.0 {
            return Err(EstimatorConfigError::IncomingRate(self.incoming_rate));
        }
        Ok(())
    }
}

/// Predicts the block index `tx` will be confirmed in, given the pool it is about
/// to join and the current tip height. Deterministic in all arguments.
pub fn estimate(
    pool: &Mempool,
    tip_height: u64,
    tx: &Transaction,
    cfg: &EstimatorConfig,
    rng_seed: u64,
) -> u64 {
    let capacity = cfg.capacity_per_block.max(1) as u64;
    let ahead = pool.count_ahead_of(&tx.priority());
    let rank = ahead as u64 + 1;

    let outranking_fraction = if pool.is_empty() {
        0.0
    } else {
        ahead as f64 / pool.len() as f64
    };
    let competition = (cfg.incoming_rate * outranking_fraction).floor().max(0.0) as u64;
    let effective_rank = rank + competition;

    let base = tip_height + effective_rank.div_ceil(capacity);
    let floor = tip_height + 1;
    if cfg.noise_sigma <= 0.0 {
        return base.max(floor);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated non-negative");
    let offset = normal.sample(&mut rng).round() as i64;
    let perturbed = base as i64 + offset;
    perturbed.max(floor as i64) as u64
}
