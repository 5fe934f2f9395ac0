//! Attack feasibility: race success probability, rent-versus-reward profit and
//! per-coin tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TABLE1: &str = include_str!("../fixtures/table1.toml");

#[derive(Debug, Error, PartialEq)]
pub enum EconomicsError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("z must be at least 1")]
    ZeroLength,
    #[error("{0} must be finite and non-negative, got {1}")]
    Negative(&'static str, f64),
    #[error("unknown fixture '{0}'")]
    UnknownFixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub alpha: f64,
    pub z: u32,
    pub block_time_minutes: f64,
    pub block_reward: f64,
    pub rent_cost_per_hour: f64,
}

impl AttackParams {
    pub fn validate(&self) -> Result<(), EconomicsError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EconomicsError::Alpha(self.alpha));
        }
        if self.z == 0 {
            return Err(EconomicsError::ZeroLength);
        }
        for (name, v) in [
            ("block_time_minutes", self.block_time_minutes),
            ("block_reward", self.block_reward),
            ("rent_cost_per_hour", self.rent_cost_per_hour),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EconomicsError::Negative(name, v));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        1.0 - self.alpha
    }

    /// Profit earned per additional block in the private chain.
    pub fn margin_per_block(&self) -> f64 {
        self.block_reward - self.block_time_minutes * self.rent_cost_per_hour / 60.0
    }
}

/// Probability that an attacker holding `alpha` of the hash rate ever gets `z`
/// blocks ahead. A majority attacker always does; at exactly one half the
/// closed form is continued to 1.
pub fn success_probability(alpha: f64, z: u32) -> f64 {
    let gamma = 1.0 - alpha;
    if alpha >= gamma {
        return 1.0;
    }
    (alpha / gamma).powi(z as i32)
}

/// Rent paid for `z` block intervals of hash power.
pub fn attack_cost(params: &AttackParams) -> f64 {
    params.z as f64 * params.block_time_minutes * params.rent_cost_per_hour / 60.0
}

pub fn attack_profit(params: &AttackParams) -> f64 {
    params.z as f64 * params.block_reward - attack_cost(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicsRow {
    pub coin: String,
    pub z: u32,
    pub alpha: f64,
    pub probability: f64,
    pub cost: f64,
    pub profit: f64,
}

impl EconomicsRow {
    pub const HEADER: [&'static str; 6] = ["coin", "z", "alpha", "probability", "cost", "profit"];

    pub fn new(coin: &str, params: &AttackParams) -> Self {
        Self {
            coin: coin.to_string(),
            z: params.z,
            alpha: params.alpha,
            probability: success_probability(params.alpha, params.z),
            cost: attack_cost(params),
            profit: attack_profit(params),
        }
    }
}

/// Profit for every chain length from 1 to `z_max`.
pub fn profit_curve(coin: &str, params: &AttackParams, z_max: u32) -> Vec<EconomicsRow> {
    (1..=z_max)
        .map(|z| EconomicsRow::new(coin, &AttackParams { z, ..*params }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinFixture {
    pub name: String,
    pub block_time_minutes: f64,
    pub block_reward: f64,
    pub rent_cost_per_hour: f64,
    pub table_cost: f64,
    pub table_profit: f64,
}

impl CoinFixture {
    pub fn params(&self, alpha: f64, z: u32) -> AttackParams {
        AttackParams {
            alpha,
            z,
            block_time_minutes: self.block_time_minutes,
            block_reward: self.block_reward,
            rent_cost_per_hour: self.rent_cost_per_hour,
        }
    }
}

#[derive(Deserialize)]
struct FixtureFile {
    coin: Vec<CoinFixture>,
}

/// Backed-out parameters for the six coins of the two-block attack table.
pub fn table1() -> Vec<CoinFixture> {
    let file: FixtureFile = toml::from_str(TABLE1).expect("bundled fixture parses");
    file.coin
}

/// Looks up `table1` (all coins) or `table1-<coin>`.
pub fn fixture(name: &str) -> Result<Vec<CoinFixture>, EconomicsError> {
    let coins = table1();
    if name == "table1" {
        return Ok(coins);
    }
    let wanted = name.strip_prefix("table1-").unwrap_or(name);
    coins
        .into_iter()
        .find(|c| c.name == wanted)
        .map(|c| vec![c])
        .ok_or_else(|| EconomicsError::UnknownFixture(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceEstimate {
    pub trials: u64,
    pub successes: u64,
    pub frequency: f64,
    /// Normal-approximation 95% half-width of `frequency`.
    pub half_width: f64,
}

const SHARD: u64 = 8_192;
const MAX_STEPS: u64 = 1_000_000;

/// Lower barrier deep enough that truncating the walk there biases the
/// catch-up probability by less than one part in a million.
fn ruin_depth(alpha: f64) -> i64 {
    let gamma = 1.0 - alpha;
    if alpha >= gamma || alpha <= 0.0 {
        return i64::MAX;
    }
    let ratio = (gamma / alpha).ln();
    ((1e6f64).ln() / ratio).ceil().clamp(1.0, 100_000.0) as i64
}

fn race_once(rng: &mut ChaCha8Rng, alpha: f64, z: i64, depth: i64) -> bool {
    let mut lead = 0i64;
    for _ in 0..MAX_STEPS {
        if rng.random_bool(alpha) {
            lead += 1;
            if lead >= z {
                return true;
            }
        } else {
            lead -= 1;
            if lead <= -depth {
                return false;
            }
        }
    }
    false
}

/// Biased-coin race: each step the attacker finds the next block with
/// probability `alpha`; success once it leads by `z`. Trials are split into
/// fixed shards with their own streams, so results do not depend on the
/// thread count.
pub fn race_monte_carlo(alpha: f64, z: u32, trials: u64, seed: u64) -> RaceEstimate {
    if alpha <= 0.0 || z == 0 {
        let successes = if z == 0 { trials } else { 0 };
        return estimate_from(successes, trials);
    }
    let depth = ruin_depth(alpha);
    let shards = trials.div_ceil(SHARD);
    let successes: u64 = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let n = SHARD.min(trials - shard * SHARD);
            (0..n)
                .filter(|_| race_once(&mut rng, alpha, z as i64, depth))
                .count() as u64
        })
        .sum();
    estimate_from(successes, trials)
}

fn estimate_from(successes: u64, trials: u64) -> RaceEstimate {
    let frequency = if trials == 0 {
        0.0
    } else {
        successes as f64 / trials as f64
    };
    let half_width = if trials == 0 {
        f64::INFINITY
    } else {
        1.96 * (frequency * (1.0 - frequency) / trials as f64).sqrt()
    };
    RaceEstimate {
        trials,
        successes,
        frequency,
        half_width,
    }
}
