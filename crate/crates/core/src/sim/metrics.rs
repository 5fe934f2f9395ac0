use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::policy::{Branch, VerdictReason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerMetrics {
    pub id: String,
    pub strategy: String,
    pub policy: String,
    pub hash_share: f64,
    pub blocks: u64,
    pub revenue: f64,
    pub revenue_share: f64,
    pub orphaned_blocks: u64,
    pub attempts: u64,
    pub successes: u64,
    pub rejections: u64,
    pub aborts: u64,
}

/// One policy evaluation at one peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkRecord {
    pub time: f64,
    pub peer: String,
    pub policy: String,
    pub fork_height: u64,
    pub branch_a_len: usize,
    pub branch_b_len: usize,
    pub challenger: String,
    /// Challenger branch is a released private chain.
    pub release: bool,
    pub winner: Branch,
    pub verdict_reason: VerdictReason,
    pub s_state: Option<f64>,
    pub f_state: Option<f64>,
    pub h_state: Option<f64>,
    pub a_size: Option<usize>,
    pub n: Option<usize>,
    pub q: Option<usize>,
    /// Mean expected height of the first challenger block minus its height.
    pub first_block_excess: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackOutcome {
    Success,
    Rejected,
    Aborted,
}

/// One private-chain attempt from first withheld block to resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub miner: String,
    pub started: f64,
    pub ended: f64,
    pub fork_height: u64,
    pub private_len: usize,
    pub public_len: u64,
    pub outcome: AttackOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub policy: String,
    pub duration_blocks: u64,
    pub canonical_height: u64,
    pub sim_time: f64,
    pub miners: Vec<MinerMetrics>,
    pub orphans: u64,
    pub forks: u64,
    pub discarded_private_blocks: u64,
    pub attempts: u64,
    pub successes: u64,
    pub rejections: u64,
    pub aborts: u64,
    pub rented_minutes: f64,
    pub rent_cost: f64,
    pub transactions: u64,
    pub events: u64,
    pub fork_records: Vec<ForkRecord>,
    pub attacks: Vec<AttackRecord>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunMetrics {
    pub fn miner(&self, id: &str) -> Option<&MinerMetrics> {
        self.miners.iter().find(|m| m.id == id)
    }

    /// Combined revenue share of all withholding miners.
    pub fn selfish_share(&self) -> f64 {
        self.miners
            .iter()
            .filter(|m| m.strategy != "honest")
            .map(|m| m.revenue_share)
            .sum()
    }

    pub fn selfish_hash_share(&self) -> f64 {
        self.miners
            .iter()
            .filter(|m| m.strategy != "honest")
            .map(|m| m.hash_share)
            .sum()
    }

    pub fn selfish_blocks(&self) -> u64 {
        self.miners
            .iter()
            .filter(|m| m.strategy != "honest")
            .map(|m| m.blocks)
            .sum()
    }

    /// Fraction of released private chains the network refused. `None` without releases.
    pub fn detection_rate(&self) -> Option<f64> {
        let released = self.successes + self.rejections;
        (released > 0).then(|| self.rejections as f64 / released as f64)
    }

    pub fn summary(&self) -> String {
        let shares: Vec<String> = self
            .miners
            .iter()
            .map(|m| format!("{}={:.4}", m.id, m.revenue_share))
            .collect();
        format!(
            "{} seed={} policy={} height={} shares[{}] attacks: attempts={} successes={} rejections={} aborts={} forks={} orphans={}",
            self.scenario,
            self.seed,
            self.policy,
            self.canonical_height,
            shares.join(" "),
            self.attempts,
            self.successes,
            self.rejections,
            self.aborts,
            self.forks,
            self.orphans,
        )
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const MINER_HEADER: [&str; 12] = [
    "miner_id",
    "blocks",
    "revenue_share",
    "revenue",
    "hash_share",
    "strategy",
    "policy",
    "orphaned_blocks",
    "attempts",
    "successes",
    "rejections",
    "aborts",
];

pub fn write_miner_csv<W: Write>(metrics: &RunMetrics, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MINER_HEADER)?;
    for m in &metrics.miners {
        w.write_record([
            m.id.clone(),
            m.blocks.to_string(),
            m.revenue_share.to_string(),
            m.revenue.to_string(),
            m.hash_share.to_string(),
            m.strategy.clone(),
            m.policy.clone(),
            m.orphaned_blocks.to_string(),
            m.attempts.to_string(),
            m.successes.to_string(),
            m.rejections.to_string(),
            m.aborts.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const FORK_HEADER: [&str; 17] = [
    "time",
    "peer",
    "policy",
    "fork_height",
    "branch_a_len",
    "branch_b_len",
    "challenger",
    "release",
    "winner",
    "verdict_reason",
    "s_state",
    "f_state",
    "h_state",
    "a_size",
    "n",
    "q",
    "first_block_excess",
];

pub fn write_forks_csv<W: Write>(metrics: &RunMetrics, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FORK_HEADER)?;
    for f in &metrics.fork_records {
        w.write_record([
            f.time.to_string(),
            f.peer.clone(),
            f.policy.clone(),
            f.fork_height.to_string(),
            f.branch_a_len.to_string(),
            f.branch_b_len.to_string(),
            f.challenger.clone(),
            f.release.to_string(),
            format!("{:?}", f.winner),
            f.verdict_reason.to_string(),
            opt(f.s_state),
            opt(f.f_state),
            opt(f.h_state),
            opt(f.a_size),
            opt(f.n),
            opt(f.q),
            opt(f.first_block_excess),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 14] = [
    "axis",
    "value",
    "seed",
    "canonical_height",
    "selfish_share",
    "selfish_hash_share",
    "forks",
    "orphans",
    "attempts",
    "successes",
    "rejections",
    "aborts",
    "detection_rate",
    "rent_cost",
];

pub fn write_sweep_csv<W: Write>(axis: &str, rows: &[(f64, RunMetrics)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for (value, m) in rows {
        w.write_record([
            axis.to_string(),
            value.to_string(),
            m.seed.to_string(),
            m.canonical_height.to_string(),
            m.selfish_share().to_string(),
            m.selfish_hash_share().to_string(),
            m.forks.to_string(),
            m.orphans.to_string(),
            m.attempts.to_string(),
            m.successes.to_string(),
            m.rejections.to_string(),
            m.aborts.to_string(),
            opt(m.detection_rate()),
            m.rent_cost.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
