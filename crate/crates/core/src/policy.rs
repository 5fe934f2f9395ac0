//! Fork-resolution policies.
//!
//! Every policy looks at a [`ForkEvent`]: the incumbent branch a node currently
//! follows (`branch_a`) and a challenger that just arrived (`branch_b`), both
//! hanging off the same fork point. The truth-state policy scores the
//! challenger by how far its blocks sit above the heights their transactions
//! were stamped for.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Block, BlockId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictReason {
    LongerChain,
    RandomPick,
    Fresher,
    TruthStateReject,
    FutureStateReject,
    EmptyBlockReject,
    TimestampWindowReject,
    Accepted,
}

impl VerdictReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LongerChain => "LongerChain",
            Self::RandomPick => "RandomPick",
            Self::Fresher => "Fresher",
            Self::TruthStateReject => "TruthStateReject",
            Self::FutureStateReject => "FutureStateReject",
            Self::EmptyBlockReject => "EmptyBlockReject",
            Self::TimestampWindowReject => "TimestampWindowReject",
            Self::Accepted => "Accepted",
        }
    }

    /// Reasons that mark the losing branch invalid rather than merely shorter.
    pub fn is_rejection(self) -> bool {
        matches!(
            self,
            Self::TruthStateReject
                | Self::FutureStateReject
                | Self::EmptyBlockReject
                | Self::TimestampWindowReject
        )
    }
}

impl fmt::Display for VerdictReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub winner: Branch,
    pub reason: VerdictReason,
}

impl Verdict {
    fn new(winner: Branch, reason: VerdictReason) -> Self {
        Self { winner, reason }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ForkEventError {
    #[error("branch {0:?} is empty")]
    EmptyBranch(Branch),
    #[error("branch {0:?} does not attach to the fork point")]
    Detached(Branch),
    #[error("branch {0:?} is not parent-linked at block {1}")]
    Broken(Branch, BlockId),
    #[error("branch {0:?} has {1} blocks but {2} receive times")]
    ReceiveTimes(Branch, usize, usize),
}

/// Two competing branches from a common ancestor, as seen by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct ForkEvent {
    pub fork_point: BlockId,
    pub fork_point_received: f64,
    pub branch_a: Vec<Arc<Block>>,
    pub branch_b: Vec<Arc<Block>>,
    pub received_a: Vec<f64>,
    pub received_b: Vec<f64>,
}

impl ForkEvent {
    pub fn new(
        fork_point: BlockId,
        fork_point_received: f64,
        branch_a: Vec<Arc<Block>>,
        received_a: Vec<f64>,
        branch_b: Vec<Arc<Block>>,
        received_b: Vec<f64>,
    ) -> Result<Self, ForkEventError> {
        let event = Self {
            fork_point,
            fork_point_received,
            branch_a,
            branch_b,
            received_a,
            received_b,
        };
        event.check(Branch::A, &event.branch_a, &event.received_a)?;
        event.check(Branch::B, &event.branch_b, &event.received_b)?;
        Ok(event)
    }

    fn check(&self, which: Branch, blocks: &[Arc<Block>], times: &[f64]) -> Result<(), ForkEventError> {
        let first = blocks.first().ok_or(ForkEventError::EmptyBranch(which))?;
        if first.parent_id != Some(self.fork_point) {
            return Err(ForkEventError::Detached(which));
        }
        for pair in blocks.windows(2) {
            if pair[1].parent_id != Some(pair[0].id) {
                return Err(ForkEventError::Broken(which, pair[1].id));
            }
        }
        if times.len() != blocks.len() {
            return Err(ForkEventError::ReceiveTimes(which, blocks.len(), times.len()));
        }
        Ok(())
    }

    pub fn len_a(&self) -> usize {
        self.branch_a.len()
    }

    pub fn len_b(&self) -> usize {
        self.branch_b.len()
    }

    fn tip_a(&self) -> &Block {
        self.branch_a.last().expect("validated non-empty")
    }

    fn tip_b(&self) -> &Block {
        self.branch_b.last().expect("validated non-empty")
    }

    /// Branch that reached its current length first locally; the incumbent on ties.
    fn first_received(&self) -> Branch {
        let a = self.received_a.last().copied().unwrap_or(f64::INFINITY);
        let b = self.received_b.last().copied().unwrap_or(f64::INFINITY);
        if b < a {
            Branch::B
        } else {
            Branch::A
        }
    }

    fn longer(&self) -> Option<Branch> {
        match self.len_a().cmp(&self.len_b()) {
            std::cmp::Ordering::Greater => Some(Branch::A),
            std::cmp::Ordering::Less => Some(Branch::B),
            std::cmp::Ordering::Equal => None,
        }
    }
}

/// Scores of the challenger (private) and the incumbent (honest) branches.
///
/// `s_state` and `f_state` are `None` when the first challenger block carries no
/// transactions; those forks are decided on the transaction-count path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthStateReport {
    pub s_state: Option<f64>,
    pub f_state: Option<f64>,
    pub h_state: f64,
    pub a_size: usize,
    pub n: usize,
    pub q: usize,
    /// Incumbent tip had no transactions; `h_state` was set to 0.
    pub honest_empty: bool,
}

pub fn truth_states(event: &ForkEvent) -> TruthStateReport {
    let first = &event.branch_b[0];
    let last = event.tip_b();
    let first_mean = first.mean_expected_height();

    let honest = event.tip_a();
    let honest_mean = honest.mean_expected_height();

    TruthStateReport {
        s_state: first_mean.map(|m| last.height as f64 - m),
        f_state: first_mean.map(|m| first.height as f64 - m),
        h_state: honest_mean.map_or(0.0, |m| honest.height as f64 - m),
        a_size: event.branch_b.iter().map(|b| b.tx_count()).sum(),
        n: event.len_b(),
        q: honest.tx_count(),
        honest_empty: honest_mean.is_none(),
    }
}

/// Decides a fork from the truth-state report. Only a challenger that would win
/// on length is scored; anything shorter or equal stays with the incumbent.
pub fn truth_state_verdict(event: &ForkEvent) -> Verdict {
    if event.len_b() <= event.len_a() {
        return Verdict::new(Branch::A, VerdictReason::LongerChain);
    }
    verdict_from_report(&truth_states(event))
}

pub fn verdict_from_report(report: &TruthStateReport) -> Verdict {
    let reject = |reason| Verdict::new(Branch::A, reason);
    let (Some(s_state), Some(f_state)) = (report.s_state, report.f_state) else {
        return reject(VerdictReason::EmptyBlockReject);
    };
    if f_state < 0.0 {
        return reject(VerdictReason::FutureStateReject);
    }
    // ties go to the incumbent
    if report.h_state <= s_state {
        return reject(VerdictReason::TruthStateReject);
    }
    let mean_count = report.a_size as f64 / report.n as f64;
    if report.a_size == 0 || report.q as f64 > mean_count {
        return reject(VerdictReason::EmptyBlockReject);
    }
    Verdict::new(Branch::B, VerdictReason::Accepted)
}

pub fn longest_chain_verdict(event: &ForkEvent) -> Verdict {
    match event.longer() {
        Some(branch) => Verdict::new(branch, VerdictReason::LongerChain),
        None => Verdict::new(event.first_received(), VerdictReason::LongerChain),
    }
}

pub fn random_tiebreak_verdict(event: &ForkEvent, rng_seed: u64) -> Verdict {
    if let Some(branch) = event.longer() {
        return Verdict::new(branch, VerdictReason::LongerChain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let winner = if rng.random_bool(0.5) { Branch::A } else { Branch::B };
    Verdict::new(winner, VerdictReason::RandomPick)
}

pub fn freshness_preferred_verdict(event: &ForkEvent) -> Verdict {
    if let Some(branch) = event.longer() {
        return Verdict::new(branch, VerdictReason::LongerChain);
    }
    let a = event.tip_a().timestamp;
    let b = event.tip_b().timestamp;
    if a > b {
        Verdict::new(Branch::A, VerdictReason::Fresher)
    } else if b > a {
        Verdict::new(Branch::B, VerdictReason::Fresher)
    } else {
        Verdict::new(event.first_received(), VerdictReason::LongerChain)
    }
}

/// Rejects any branch holding a block that arrived more than
/// `expected_interval * tolerance_factor` after its parent.
pub fn zeroblock_verdict(event: &ForkEvent, expected_interval: f64, tolerance_factor: f64) -> Verdict {
    let window = expected_interval * tolerance_factor;
    let late = |times: &[f64]| {
        let mut prev = event.fork_point_received;
        times.iter().any(|&t| {
            let gap = t - prev;
            prev = t;
            gap > window
        })
    };
    match (late(&event.received_a), late(&event.received_b)) {
        (false, false) => longest_chain_verdict(event),
        (false, true) => Verdict::new(Branch::A, VerdictReason::TimestampWindowReject),
        (true, false) => Verdict::new(Branch::B, VerdictReason::TimestampWindowReject),
        (true, true) => Verdict::new(event.first_received(), VerdictReason::TimestampWindowReject),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyConfig {
    LongestChain,
    RandomTiebreak,
    Freshness,
    Zeroblock {
        expected_interval: f64,
        tolerance_factor: f64,
    },
    TruthState,
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LongestChain => "longest-chain",
            Self::RandomTiebreak => "random-tiebreak",
            Self::Freshness => "freshness",
            Self::Zeroblock { .. } => "zeroblock",
            Self::TruthState => "truth-state",
        }
    }

    pub fn decide(&self, event: &ForkEvent, rng_seed: u64) -> Verdict {
        match self {
            Self::LongestChain => longest_chain_verdict(event),
            Self::RandomTiebreak => random_tiebreak_verdict(event, rng_seed),
            Self::Freshness => freshness_preferred_verdict(event),
            Self::Zeroblock {
                expected_interval,
                tolerance_factor,
            } => zeroblock_verdict(event, *expected_interval, *tolerance_factor),
            Self::TruthState => truth_state_verdict(event),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::chain::{MinerId, Transaction, TxId};
    use proptest::prelude::*;

    /// Builds a parent-linked branch from `(height, timestamp, expected heights)`.
    pub(crate) fn branch(
        first_id: u64,
        parent: u64,
        specs: &[(u64, f64, Vec<u64>)],
    ) -> Vec<Arc<Block>> {
        let mut parent = BlockId(parent);
        let mut next_tx = first_id * 1_000;
        specs
            .iter()
            .enumerate()
            .map(|(i, (height, t, expected))| {
                let transactions = expected
                    .iter()
                    .map(|&e| {
                        next_tx += 1;
                        Transaction {
                            id: TxId(next_tx),
                            size: 1,
                            fee: 1,
                            created_height: 0,
                            expected_confirmation_height: e,
                        }
                    })
                    .collect();
                let block = Arc::new(Block {
                    id: BlockId(first_id + i as u64),
                    parent_id: Some(parent),
                    height: *height,
                    miner: MinerId(0),
                    timestamp: *t,
                    transactions,
                });
                parent = block.id;
                block
            })
            .collect()
    }

    pub(crate) fn event(a: Vec<Arc<Block>>, b: Vec<Arc<Block>>) -> ForkEvent {
        let ra = a.iter().map(|x| x.timestamp).collect();
        let rb = b.iter().map(|x| x.timestamp).collect();
        ForkEvent::new(BlockId(1), 0.0, a, ra, b, rb).unwrap()
    }

    #[test]
    fn honest_perfect_prediction_has_zero_state() {
        let e = event(
            branch(10, 1, &[(100, 1.0, vec![100; 4])]),
            branch(20, 1, &[(100, 1.0, vec![100]), (101, 2.0, vec![101])]),
        );
        assert_eq!(truth_states(&e).h_state, 0.0);
    }

    #[test]
    fn private_states_by_substitution() {
        let e = event(
            branch(10, 1, &[(100, 1.0, vec![100])]),
            branch(20, 1, &[(100, 1.0, vec![99, 101]), (101, 2.0, vec![101])]),
        );
        let r = truth_states(&e);
        assert_eq!(r.s_state, Some(1.0));
        assert_eq!(r.f_state, Some(0.0));
        assert_eq!((r.a_size, r.n, r.q), (3, 2, 1));
    }

    #[test]
    fn future_transactions_give_negative_future_state() {
        let e = event(
            branch(10, 1, &[(100, 1.0, vec![100])]),
            branch(20, 1, &[(100, 1.0, vec![102, 102]), (101, 2.0, vec![])]),
        );
        assert_eq!(truth_states(&e).f_state, Some(-2.0));
        assert_eq!(truth_state_verdict(&e).reason, VerdictReason::FutureStateReject);
    }

    #[test]
    fn baseline_fork_rejected_by_truth_state() {
        let report = TruthStateReport {
            s_state: Some(1.0),
            f_state: Some(0.0),
            h_state: 0.0,
            a_size: 20,
            n: 2,
            q: 10,
            honest_empty: false,
        };
        assert_eq!(
            verdict_from_report(&report),
            Verdict::new(Branch::A, VerdictReason::TruthStateReject)
        );
        let e = event(
            branch(10, 1, &[(100, 5.0, vec![100; 10])]),
            branch(20, 1, &[(100, 4.0, vec![100; 10]), (101, 6.0, vec![101; 10])]),
        );
        assert_eq!(
            truth_state_verdict(&e),
            Verdict::new(Branch::A, VerdictReason::TruthStateReject)
        );
    }

    #[test]
    fn empty_private_blocks_rejected() {
        let e = event(
            branch(10, 1, &[(100, 5.0, vec![100; 10])]),
            branch(20, 1, &[(100, 4.0, vec![]), (101, 6.0, vec![])]),
        );
        let r = truth_states(&e);
        assert_eq!(r.a_size, 0);
        assert_eq!(r.s_state, None);
        assert_eq!(
            truth_state_verdict(&e),
            Verdict::new(Branch::A, VerdictReason::EmptyBlockReject)
        );
    }

    #[test]
    fn circumvention_path_checks_transaction_count() {
        // h_state > s_state, but the challenger carries fewer transactions per block
        let mut report = TruthStateReport {
            s_state: Some(-0.5),
            f_state: Some(0.5),
            h_state: 0.0,
            a_size: 4,
            n: 2,
            q: 10,
            honest_empty: false,
        };
        assert_eq!(verdict_from_report(&report).reason, VerdictReason::EmptyBlockReject);
        report.a_size = 20;
        assert_eq!(
            verdict_from_report(&report),
            Verdict::new(Branch::B, VerdictReason::Accepted)
        );
    }

    #[test]
    fn equal_states_favour_incumbent() {
        let report = TruthStateReport {
            s_state: Some(0.0),
            f_state: Some(0.0),
            h_state: 0.0,
            a_size: 20,
            n: 2,
            q: 10,
            honest_empty: false,
        };
        assert_eq!(verdict_from_report(&report).winner, Branch::A);
    }

    #[test]
    fn empty_honest_block_scores_zero() {
        let e = event(
            branch(10, 1, &[(100, 5.0, vec![])]),
            branch(20, 1, &[(100, 4.0, vec![100]), (101, 6.0, vec![101])]),
        );
        let r = truth_states(&e);
        assert!(r.honest_empty);
        assert_eq!(r.h_state, 0.0);
        assert_eq!(r.q, 0);
    }

    #[test]
    fn shorter_challenger_never_scored() {
        let e = event(
            branch(10, 1, &[(100, 1.0, vec![100]), (101, 2.0, vec![101])]),
            branch(20, 1, &[(100, 1.5, vec![])]),
        );
        assert_eq!(
            truth_state_verdict(&e),
            Verdict::new(Branch::A, VerdictReason::LongerChain)
        );
    }

    #[test]
    fn longest_chain_cases() {
        let two_vs_one = event(
            branch(10, 1, &[(100, 5.0, vec![])]),
            branch(20, 1, &[(100, 4.0, vec![]), (101, 6.0, vec![])]),
        );
        assert_eq!(
            longest_chain_verdict(&two_vs_one),
            Verdict::new(Branch::B, VerdictReason::LongerChain)
        );
        let tie = event(
            branch(10, 1, &[(100, 5.0, vec![])]),
            branch(20, 1, &[(100, 6.0, vec![])]),
        );
        assert_eq!(longest_chain_verdict(&tie).winner, Branch::A);
    }

    #[test]
    fn random_tiebreak_cases() {
        let tie = event(
            branch(10, 1, &[(100, 5.0, vec![])]),
            branch(20, 1, &[(100, 6.0, vec![])]),
        );
        assert_eq!(random_tiebreak_verdict(&tie, 17), random_tiebreak_verdict(&tie, 17));
        assert_eq!(random_tiebreak_verdict(&tie, 17).reason, VerdictReason::RandomPick);

        let trials = 10_000u64;
        let b_wins = (0..trials)
            .filter(|&s| random_tiebreak_verdict(&tie, s).winner == Branch::B)
            .count() as f64;
        assert!((b_wins / trials as f64 - 0.5).abs() <= 0.02);

        let longer = event(
            branch(10, 1, &[(100, 5.0, vec![])]),
            branch(20, 1, &[(100, 4.0, vec![]), (101, 6.0, vec![])]),
        );
        for seed in 0..100 {
            assert_eq!(random_tiebreak_verdict(&longer, seed).winner, Branch::B);
        }
    }

    #[test]
    fn freshness_cases() {
        let e = event(
            branch(10, 1, &[(100, 95.0, vec![])]),
            branch(20, 1, &[(100, 100.0, vec![])]),
        );
        assert_eq!(
            freshness_preferred_verdict(&e),
            Verdict::new(Branch::B, VerdictReason::Fresher)
        );
        // withheld block stamped at creation (90) arrives after the honest one (100)
        let withheld = ForkEvent::new(
            BlockId(1),
            0.0,
            branch(10, 1, &[(100, 100.0, vec![])]),
            vec![100.0],
            branch(20, 1, &[(100, 90.0, vec![])]),
            vec![120.0],
        )
        .unwrap();
        assert_eq!(freshness_preferred_verdict(&withheld).winner, Branch::A);
        let same = event(
            branch(10, 1, &[(100, 50.0, vec![])]),
            branch(20, 1, &[(100, 50.0, vec![])]),
        );
        assert_eq!(freshness_preferred_verdict(&same).winner, Branch::A);
    }

    #[test]
    fn zeroblock_cases() {
        let make = |a_time: f64, b_time: f64| {
            ForkEvent::new(
                BlockId(1),
                0.0,
                branch(10, 1, &[(100, a_time, vec![])]),
                vec![a_time],
                branch(20, 1, &[(100, 1.0, vec![]), (101, b_time, vec![])]),
                vec![b_time, b_time],
            )
            .unwrap()
        };
        // withheld chain shows up 2.5 intervals after its parent
        let v = zeroblock_verdict(&make(10.0, 25.0), 10.0, 2.0);
        assert_eq!(v, Verdict::new(Branch::A, VerdictReason::TimestampWindowReject));
        // a slow honest block gets thrown out just the same
        let v = zeroblock_verdict(&make(25.0, 12.0), 10.0, 2.0);
        assert_eq!(v, Verdict::new(Branch::B, VerdictReason::TimestampWindowReject));
        let v = zeroblock_verdict(&make(10.0, 12.0), 10.0, 2.0);
        assert_eq!(v, Verdict::new(Branch::B, VerdictReason::LongerChain));
        let v = zeroblock_verdict(&make(25.0, 30.0), 10.0, 2.0);
        assert_eq!(v, Verdict::new(Branch::A, VerdictReason::TimestampWindowReject));
    }

    #[test]
    fn malformed_events_rejected() {
        let a = branch(10, 1, &[(100, 1.0, vec![])]);
        let detached = branch(20, 5, &[(100, 1.0, vec![])]);
        assert_eq!(
            ForkEvent::new(BlockId(1), 0.0, a.clone(), vec![1.0], detached, vec![1.0]),
            Err(ForkEventError::Detached(Branch::B))
        );
        assert_eq!(
            ForkEvent::new(BlockId(1), 0.0, a, vec![], vec![], vec![]),
            Err(ForkEventError::ReceiveTimes(Branch::A, 1, 0))
        );
    }

    fn arb_branch(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<u64>>> {
        prop::collection::vec(prop::collection::vec(90u64..120, 0..12), len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn state_identity_and_purity(a in arb_branch(1..3), b in arb_branch(1..6)) {
            let spec = |txs: &Vec<Vec<u64>>| -> Vec<(u64, f64, Vec<u64>)> {
                txs.iter().enumerate().map(|(i, e)| (100 + i as u64, i as f64, e.clone())).collect()
            };
            let e = event(branch(10, 1, &spec(&a)), branch(20, 1, &spec(&b)));
            let snapshot = e.clone();
            let r = truth_states(&e);
            if let (Some(s), Some(f)) = (r.s_state, r.f_state) {
                prop_assert_eq!(s - f, (r.n - 1) as f64);
            } else {
                prop_assert!(b[0].is_empty());
            }
            prop_assert_eq!(truth_state_verdict(&e), truth_state_verdict(&e));
            prop_assert_eq!(&e, &snapshot);
        }
    }
}
