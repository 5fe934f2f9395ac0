//! Miner behaviours: honest mining, the two-round withholding attack and the
//! two adaptive variants that try to slip past truth-state checks.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chain::{select_transactions, Block, BlockId, BlockTree, Mempool, MinerId, Transaction, TxId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Honest,
    BaselineSelfish,
    AdaptiveFutureTx,
    AdaptiveEmptyBlocks,
}

impl StrategyKind {
    pub fn is_selfish(self) -> bool {
        !matches!(self, Self::Honest)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Honest => "honest",
            Self::BaselineSelfish => "baseline-selfish",
            Self::AdaptiveFutureTx => "adaptive-future-tx",
            Self::AdaptiveEmptyBlocks => "adaptive-empty-blocks",
        }
    }
}

fn default_private_chain_length() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinerSpec {
    pub id: String,
    pub hash_share: f64,
    pub strategy: StrategyKind,
    /// Private chain length `n` the attacker completes before releasing.
    #[serde(default = "default_private_chain_length")]
    pub private_chain_length: usize,
    /// Extra hash fraction leased for the second attack round.
    #[serde(default)]
    pub rented_share: f64,
}

impl MinerSpec {
    pub fn honest(id: &str, hash_share: f64) -> Self {
        Self {
            id: id.to_string(),
            hash_share,
            strategy: StrategyKind::Honest,
            private_chain_length: 2,
            rented_share: 0.0,
        }
    }

    pub fn selfish(id: &str, hash_share: f64, strategy: StrategyKind) -> Self {
        Self {
            strategy,
            ..Self::honest(id, hash_share)
        }
    }
}

/// Picks transactions for a block at `height`.
///
/// Honest and baseline miners take the best fee-per-size transactions.
/// `AdaptiveEmptyBlocks` takes none. `AdaptiveFutureTx` fills the first block of
/// a private chain with transactions stamped for later heights before anything
/// else, and mines normally afterwards.
pub fn fill_block<'a>(
    kind: StrategyKind,
    candidates: impl Iterator<Item = &'a Transaction> + Clone,
    height: u64,
    first_private: bool,
    capacity: usize,
) -> Vec<Transaction> {
    match kind {
        StrategyKind::AdaptiveEmptyBlocks => Vec::new(),
        StrategyKind::AdaptiveFutureTx if first_private => {
            let future = candidates
                .clone()
                .filter(|tx| tx.expected_confirmation_height > height);
            let rest = candidates.filter(|tx| tx.expected_confirmation_height <= height);
            future.chain(rest).take(capacity).copied().collect()
        }
        _ => candidates.take(capacity).copied().collect(),
    }
}

/// Builds the block an honest miner broadcasts on winning the lottery.
pub fn honest_build_block(
    id: BlockId,
    miner: MinerId,
    tree: &BlockTree,
    pool: &Mempool,
    timestamp: f64,
) -> Block {
    let parent = tree
        .get(tree.canonical_tip())
        .expect("canonical tip is in the tree");
    Block {
        id,
        parent_id: Some(parent.id),
        height: parent.height + 1,
        miner,
        timestamp: timestamp.max(parent.timestamp),
        transactions: select_transactions(pool, pool.capacity_per_block()),
    }
}

/// Builds the next private block for a withholding miner. `parent` is either the
/// public tip (new attempt) or the private tip.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_build_block(
    kind: StrategyKind,
    id: BlockId,
    miner: MinerId,
    parent: &Block,
    pool: &Mempool,
    exclude: &BTreeSet<TxId>,
    first_private: bool,
    timestamp: f64,
) -> Block {
    let height = parent.height + 1;
    let candidates = pool.by_priority().filter(|tx| !exclude.contains(&tx.id));
    Block {
        id,
        parent_id: Some(parent.id),
        height,
        miner,
        timestamp: timestamp.max(parent.timestamp),
        transactions: fill_block(kind, candidates, height, first_private, pool.capacity_per_block()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelfishAction {
    /// Nothing to publish.
    Hold,
    /// Block kept private.
    Withhold(Arc<Block>),
    /// Publish the whole private chain at once.
    Release(Vec<Arc<Block>>),
    /// Private chain can no longer win; discard it.
    Abort(Vec<Arc<Block>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateChain {
    pub fork_point: BlockId,
    pub fork_height: u64,
    pub blocks: Vec<Arc<Block>>,
}

impl PrivateChain {
    pub fn tip(&self) -> &Arc<Block> {
        self.blocks.last().expect("private chains are never empty")
    }
}

/// Withhold / release / abort state machine shared by every selfish variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfishMiner {
    pub target_len: usize,
    private: Option<PrivateChain>,
    public_len: u64,
}

impl SelfishMiner {
    pub fn new(target_len: usize) -> Self {
        Self {
            target_len: target_len.max(2),
            private: None,
            public_len: 0,
        }
    }

    pub fn private_chain(&self) -> Option<&PrivateChain> {
        self.private.as_ref()
    }

    pub fn is_withholding(&self) -> bool {
        self.private.is_some()
    }

    /// Second round: the public chain has moved past the fork while a private
    /// chain is held. Rented hash power is on only in this window.
    pub fn attack_window_active(&self) -> bool {
        self.private.is_some() && self.public_len >= 1
    }

    /// Block the next private block should extend.
    pub fn mining_parent<'a>(&'a self, public_tip: &'a Arc<Block>) -> &'a Arc<Block> {
        self.private.as_ref().map_or(public_tip, |p| p.tip())
    }

    pub fn starts_new_chain(&self) -> bool {
        self.private.is_none()
    }

    /// Transactions already used by the private chain.
    pub fn private_txs(&self) -> BTreeSet<TxId> {
        self.private
            .iter()
            .flat_map(|p| p.blocks.iter())
            .flat_map(|b| b.transactions.iter().map(|tx| tx.id))
            .collect()
    }

    /// Called with a block the attacker just mined on [`Self::mining_parent`].
    pub fn on_block_found(&mut self, block: Arc<Block>, public_height: u64) -> SelfishAction {
        match &mut self.private {
            None => {
                let parent_height = block.height - 1;
                self.private = Some(PrivateChain {
                    fork_point: block.parent_id.expect("mined blocks have parents"),
                    fork_height: parent_height,
                    blocks: vec![block.clone()],
                });
                self.public_len = public_height.saturating_sub(parent_height);
            }
            Some(chain) => chain.blocks.push(block.clone()),
        }
        match self.step() {
            SelfishAction::Hold => SelfishAction::Withhold(block),
            other => other,
        }
    }

    /// Drops the private chain, e.g. when the public chain moved off its fork point.
    pub fn abandon(&mut self) -> SelfishAction {
        self.public_len = 0;
        match self.private.take() {
            Some(chain) => SelfishAction::Abort(chain.blocks),
            None => SelfishAction::Hold,
        }
    }

    /// Called whenever the attacker's view of the public chain changes.
    pub fn on_public_update(&mut self, public_height: u64) -> SelfishAction {
        let Some(chain) = &self.private else {
            return SelfishAction::Hold;
        };
        self.public_len = public_height.saturating_sub(chain.fork_height);
        self.step()
    }

    fn step(&mut self) -> SelfishAction {
        let Some(chain) = &self.private else {
            return SelfishAction::Hold;
        };
        let private_len = chain.blocks.len() as u64;
        let public_len = self.public_len;
        if private_len >= self.target_len as u64 && public_len >= 1 && private_len > public_len {
            let chain = self.private.take().expect("checked above");
            self.public_len = 0;
            return SelfishAction::Release(chain.blocks);
        }
        if public_len >= self.target_len as u64 {
            let chain = self.private.take().expect("checked above");
            self.public_len = 0;
            return SelfishAction::Abort(chain.blocks);
        }
        SelfishAction::Hold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{reorganize, TxId};

    fn tx(id: u64, fee: u64, e: u64) -> Transaction {
        Transaction {
            id: TxId(id),
            size: 1,
            fee,
            created_height: 0,
            expected_confirmation_height: e,
        }
    }

    fn chain_to_height(h: u64) -> BlockTree {
        let mut tree = BlockTree::default();
        let mut pool = Mempool::new(10);
        for i in 1..=h {
            tree.append_block(Arc::new(Block {
                id: BlockId(i),
                parent_id: Some(BlockId(i - 1)),
                height: i,
                miner: MinerId(0),
                timestamp: i as f64,
                transactions: vec![],
            }))
            .unwrap();
        }
        reorganize(&mut tree, &mut pool, BlockId(h)).unwrap();
        tree
    }

    fn private_block(id: u64, parent: u64, height: u64) -> Arc<Block> {
        Arc::new(Block {
            id: BlockId(id),
            parent_id: Some(BlockId(parent)),
            height,
            miner: MinerId(1),
            timestamp: id as f64,
            transactions: vec![],
        })
    }

    #[test]
    fn honest_takes_best_ten() {
        let tree = chain_to_height(100);
        let mut pool = Mempool::new(10);
        for i in 0..50 {
            pool.insert(tx(i, i, 101));
        }
        let block = honest_build_block(BlockId(500), MinerId(0), &tree, &pool, 200.0);
        assert_eq!(block.height, 101);
        assert_eq!(block.transactions.len(), 10);
        let fees: Vec<_> = block.transactions.iter().map(|t| t.fee).collect();
        assert_eq!(fees, (40..50).rev().collect::<Vec<_>>());
    }

    #[test]
    fn honest_empty_pool() {
        let tree = chain_to_height(100);
        let block = honest_build_block(BlockId(500), MinerId(0), &tree, &Mempool::new(10), 200.0);
        assert_eq!(block.height, 101);
        assert!(block.transactions.is_empty());
    }

    #[test]
    fn two_block_sequence_releases_both_blocks() {
        let mut miner = SelfishMiner::new(2);
        // B_S1 on B3 while the public tip is B3
        let s1 = private_block(20, 3, 4);
        assert!(matches!(miner.on_block_found(s1, 3), SelfishAction::Withhold(_)));
        assert!(!miner.attack_window_active());
        // B_H lands publicly: round two starts
        assert_eq!(miner.on_public_update(4), SelfishAction::Hold);
        assert!(miner.attack_window_active());
        let s2 = private_block(21, 20, 5);
        match miner.on_block_found(s2, 4) {
            SelfishAction::Release(chain) => {
                let ids: Vec<_> = chain.iter().map(|b| b.id.0).collect();
                assert_eq!(ids, vec![20, 21]);
            }
            other => panic!("expected release, got {other:?}"),
        }
        assert!(!miner.is_withholding());
        assert!(!miner.attack_window_active());
    }

    #[test]
    fn aborts_when_public_reaches_target() {
        let mut miner = SelfishMiner::new(2);
        miner.on_block_found(private_block(20, 3, 4), 3);
        assert_eq!(miner.on_public_update(4), SelfishAction::Hold);
        match miner.on_public_update(5) {
            SelfishAction::Abort(chain) => assert_eq!(chain.len(), 1),
            other => panic!("expected abort, got {other:?}"),
        }
        assert!(!miner.is_withholding());
    }

    #[test]
    fn complete_chain_waits_for_public_block() {
        let mut miner = SelfishMiner::new(2);
        miner.on_block_found(private_block(20, 3, 4), 3);
        assert!(matches!(
            miner.on_block_found(private_block(21, 20, 5), 3),
            SelfishAction::Withhold(_)
        ));
        assert!(matches!(
            miner.on_block_found(private_block(22, 21, 6), 3),
            SelfishAction::Withhold(_)
        ));
        match miner.on_public_update(4) {
            SelfishAction::Release(chain) => assert_eq!(chain.len(), 3),
            other => panic!("expected release, got {other:?}"),
        }
    }

    #[test]
    fn mining_parent_follows_private_tip() {
        let public = private_block(3, 2, 3);
        let mut miner = SelfishMiner::new(2);
        assert_eq!(miner.mining_parent(&public).id, BlockId(3));
        miner.on_block_found(private_block(20, 3, 4), 3);
        assert_eq!(miner.mining_parent(&public).id, BlockId(20));
    }

    #[test]
    fn empty_block_variant() {
        let mut pool = Mempool::new(10);
        for i in 0..5 {
            pool.insert(tx(i, 10, 101));
        }
        let parent = private_block(100, 99, 100);
        let b = adaptive_build_block(
            StrategyKind::AdaptiveEmptyBlocks,
            BlockId(1),
            MinerId(1),
            &parent,
            &pool,
            &BTreeSet::new(),
            true,
            1.0,
        );
        assert!(b.transactions.is_empty());
    }

    #[test]
    fn future_tx_variant_front_loads_future_stamps() {
        let mut pool = Mempool::new(2);
        pool.insert(tx(1, 30, 101));
        pool.insert(tx(2, 20, 105));
        pool.insert(tx(3, 10, 106));
        let parent = private_block(100, 99, 100);
        let b = adaptive_build_block(
            StrategyKind::AdaptiveFutureTx,
            BlockId(1),
            MinerId(1),
            &parent,
            &pool,
            &BTreeSet::new(),
            true,
            1.0,
        );
        let stamps: BTreeSet<_> = b.transactions.iter().map(|t| t.expected_confirmation_height).collect();
        assert_eq!(stamps, BTreeSet::from([105, 106]));

        let later = adaptive_build_block(
            StrategyKind::AdaptiveFutureTx,
            BlockId(2),
            MinerId(1),
            &parent,
            &pool,
            &BTreeSet::new(),
            false,
            1.0,
        );
        assert_eq!(later.transactions[0].id, TxId(1));

        let empty = adaptive_build_block(
            StrategyKind::AdaptiveFutureTx,
            BlockId(3),
            MinerId(1),
            &parent,
            &Mempool::new(2),
            &BTreeSet::new(),
            true,
            1.0,
        );
        assert!(empty.transactions.is_empty());
    }

    #[test]
    fn private_txs_are_excluded_from_next_block() {
        let mut pool = Mempool::new(1);
        pool.insert(tx(1, 30, 101));
        pool.insert(tx(2, 20, 101));
        let parent = private_block(100, 99, 100);
        let mut miner = SelfishMiner::new(2);
        let first = adaptive_build_block(
            StrategyKind::BaselineSelfish,
            BlockId(1),
            MinerId(1),
            &parent,
            &pool,
            &miner.private_txs(),
            true,
            1.0,
        );
        miner.on_block_found(Arc::new(first), 100);
        let second = adaptive_build_block(
            StrategyKind::BaselineSelfish,
            BlockId(2),
            MinerId(1),
            &parent,
            &pool,
            &miner.private_txs(),
            false,
            2.0,
        );
        assert_eq!(second.transactions[0].id, TxId(2));
    }
}
