//! Fork-aware chain state: transactions, blocks, the block tree and the mempool.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u64);

/// Index of a miner within a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MinerId(pub u32);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx{}", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

pub const GENESIS_ID: BlockId = BlockId(0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("block {block} references unknown parent {parent}")]
    Orphan { block: BlockId, parent: BlockId },
    #[error("block {0} is already in the tree")]
    DuplicateBlock(BlockId),
    #[error("block {block} has height {height}, expected {expected}")]
    BadHeight {
        block: BlockId,
        height: u64,
        expected: u64,
    },
    #[error("block {0} is timestamped before its parent")]
    TimestampRegression(BlockId),
    #[error("block {block} contains {tx} more than once")]
    DuplicateTransaction { block: BlockId, tx: TxId },
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("non-genesis block {0} has no parent")]
    MissingParent(BlockId),
    #[error("invalid transaction {tx}: {reason}")]
    InvalidTransaction { tx: TxId, reason: &'static str },
}

/// A fee-bearing payload stamped with the block index it is expected to land in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub size: u32,
    pub fee: u64,
    pub created_height: u64,
    pub expected_confirmation_height: u64,
}

impl Transaction {
    pub fn new(
        id: TxId,
        size: u32,
        fee: u64,
        created_height: u64,
        expected_confirmation_height: u64,
    ) -> Result<Self, ChainError> {
        let tx = Self {
            id,
            size,
            fee,
            created_height,
            expected_confirmation_height,
        };
        tx.validate()?;
        Ok(tx)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.size == 0 {
            return Err(ChainError::InvalidTransaction {
                tx: self.id,
                reason: "size must be positive",
            });
        }
        if self.expected_confirmation_height <= self.created_height {
            return Err(ChainError::InvalidTransaction {
                tx: self.id,
                reason: "expected confirmation height must exceed creation height",
            });
        }
        Ok(())
    }

    pub fn priority(&self) -> Priority {
        Priority {
            fee: self.fee,
            size: self.size,
            id: self.id,
        }
    }
}

/// Mining priority key. Orders by fee-per-size descending, then by id ascending,
/// so the smallest key is the transaction a fee-maximizing miner picks first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Priority {
    pub fee: u64,
    pub size: u32,
    pub id: TxId,
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> Ordering {
        // fee_a / size_a vs fee_b / size_b without rounding
        let lhs = self.fee as u128 * other.size as u128;
        let rhs = other.fee as u128 * self.size as u128;
        rhs.cmp(&lhs).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub parent_id: Option<BlockId>,
    pub height: u64,
    pub miner: MinerId,
    pub timestamp: f64,
    pub transactions: Vec<Transaction>,
}

impl Block {
    pub fn genesis() -> Self {
        Self {
            id: GENESIS_ID,
            parent_id: None,
            height: 0,
            miner: MinerId(u32::MAX),
            timestamp: 0.0,
            transactions: Vec::new(),
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.parent_id.is_none()
    }

    pub fn tx_count(&self) -> usize {
        self.transactions.len()
    }

    /// Mean expected confirmation height of the contained transactions, `None` when empty.
    pub fn mean_expected_height(&self) -> Option<f64> {
        if self.transactions.is_empty() {
            return None;
        }
        let sum: f64 = self
            .transactions
            .iter()
            .map(|tx| tx.expected_confirmation_height as f64)
            .sum();
        Some(sum / self.transactions.len() as f64)
    }

    fn check_unique_transactions(&self) -> Result<(), ChainError> {
        let mut seen = BTreeSet::new();
        for tx in &self.transactions {
            if !seen.insert(tx.id) {
                return Err(ChainError::DuplicateTransaction {
                    block: self.id,
                    tx: tx.id,
                });
            }
        }
        Ok(())
    }
}

/// Every block a node knows about, the leaves, and the node's current best tip.
#[derive(Debug, Clone)]
pub struct BlockTree {
    blocks: BTreeMap<BlockId, Arc<Block>>,
    children: BTreeMap<BlockId, Vec<BlockId>>,
    tips: BTreeSet<BlockId>,
    canonical_tip: BlockId,
}

impl Default for BlockTree {
    fn default() -> Self {
        Self::new(Arc::new(Block::genesis()))
    }
}

impl BlockTree {
    pub fn new(genesis: Arc<Block>) -> Self {
        let id = genesis.id;
        let mut blocks = BTreeMap::new();
        blocks.insert(id, genesis);
        Self {
            blocks,
            children: BTreeMap::new(),
            tips: BTreeSet::from([id]),
            canonical_tip: id,
        }
    }

    /// Inserts `block` below its parent. The canonical tip is left untouched.
    pub fn append_block(&mut self, block: Arc<Block>) -> Result<(), ChainError> {
        if self.blocks.contains_key(&block.id) {
            return Err(ChainError::DuplicateBlock(block.id));
        }
        let parent_id = block.parent_id.ok_or(ChainError::MissingParent(block.id))?;
        let parent = self.blocks.get(&parent_id).ok_or(ChainError::Orphan {
            block: block.id,
            parent: parent_id,
        })?;
        if block.height != parent.height + 1 {
            return Err(ChainError::BadHeight {
                block: block.id,
                height: block.height,
                expected: parent.height + 1,
            });
        }
        if block.timestamp < parent.timestamp {
            return Err(ChainError::TimestampRegression(block.id));
        }
        block.check_unique_transactions()?;

        self.tips.remove(&parent_id);
        self.tips.insert(block.id);
        self.children.entry(parent_id).or_default().push(block.id);
        self.blocks.insert(block.id, block);
        Ok(())
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.blocks.contains_key(&id)
    }

    pub fn get(&self, id: BlockId) -> Option<&Arc<Block>> {
        self.blocks.get(&id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tips(&self) -> &BTreeSet<BlockId> {
        &self.tips
    }

    pub fn canonical_tip(&self) -> BlockId {
        self.canonical_tip
    }

    pub fn canonical_height(&self) -> u64 {
        self.blocks[&self.canonical_tip].height
    }

    pub fn children(&self, id: BlockId) -> &[BlockId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Arc<Block>> {
        self.blocks.values()
    }

    /// Walks from `id` back to genesis, `id` first.
    pub fn ancestors(&self, id: BlockId) -> Ancestors<'_> {
        Ancestors {
            tree: self,
            next: self.blocks.get(&id).map(|b| b.id),
        }
    }

    /// Blocks from genesis (exclusive) up to and including `tip`.
    pub fn chain_to(&self, tip: BlockId) -> Result<Vec<Arc<Block>>, ChainError> {
        if !self.contains(tip) {
            return Err(ChainError::UnknownBlock(tip));
        }
        let mut chain: Vec<_> = self
            .ancestors(tip)
            .filter(|b| !b.is_genesis())
            .cloned()
            .collect();
        chain.reverse();
        Ok(chain)
    }

    pub fn canonical_chain(&self) -> Vec<Arc<Block>> {
        self.chain_to(self.canonical_tip)
            .expect("canonical tip is always in the tree")
    }

    /// True when `ancestor` lies on the path from `descendant` to genesis (inclusive).
    pub fn is_ancestor(&self, ancestor: BlockId, descendant: BlockId) -> bool {
        let Some(target) = self.blocks.get(&ancestor) else {
            return false;
        };
        self.ancestors(descendant)
            .take_while(|b| b.height >= target.height)
            .any(|b| b.id == ancestor)
    }

    pub fn common_ancestor(&self, a: BlockId, b: BlockId) -> Result<BlockId, ChainError> {
        let mut x = self.blocks.get(&a).ok_or(ChainError::UnknownBlock(a))?;
        let mut y = self.blocks.get(&b).ok_or(ChainError::UnknownBlock(b))?;
        while x.id != y.id {
            if x.height >= y.height {
                x = &self.blocks[&x.parent_id.expect("only genesis lacks a parent")];
            } else {
                y = &self.blocks[&y.parent_id.expect("only genesis lacks a parent")];
            }
        }
        Ok(x.id)
    }

    /// Blocks strictly after `from` up to and including `tip`, oldest first.
    pub fn branch(&self, from: BlockId, tip: BlockId) -> Result<Vec<Arc<Block>>, ChainError> {
        let floor = self.blocks.get(&from).ok_or(ChainError::UnknownBlock(from))?.height;
        if !self.contains(tip) {
            return Err(ChainError::UnknownBlock(tip));
        }
        let mut out: Vec<_> = self
            .ancestors(tip)
            .take_while(|b| b.height > floor)
            .cloned()
            .collect();
        out.reverse();
        Ok(out)
    }

    pub(crate) fn set_canonical_tip(&mut self, tip: BlockId) {
        debug_assert!(self.tips.contains(&tip) || self.contains(tip));
        self.canonical_tip = tip;
    }
}

pub struct Ancestors<'a> {
    tree: &'a BlockTree,
    next: Option<BlockId>,
}

impl<'a> Iterator for Ancestors<'a> {
    type Item = &'a Arc<Block>;

    fn next(&mut self) -> Option<Self::Item> {
        let block = self.tree.blocks.get(&self.next?)?;
        self.next = block.parent_id;
        Some(block)
    }
}

/// Unconfirmed transactions relative to one node's canonical chain.
#[derive(Debug, Clone, Default)]
pub struct Mempool {
    pending: BTreeMap<TxId, Transaction>,
    order: BTreeSet<Priority>,
    capacity_per_block: usize,
}

impl Mempool {
    pub fn new(capacity_per_block: usize) -> Self {
        Self {
            pending: BTreeMap::new(),
            order: BTreeSet::new(),
            capacity_per_block: capacity_per_block.max(1),
        }
    }

    pub fn capacity_per_block(&self) -> usize {
        self.capacity_per_block
    }

    /// Returns false if the transaction was already pending.
    pub fn insert(&mut self, tx: Transaction) -> bool {
        if self.pending.insert(tx.id, tx).is_some() {
            return false;
        }
        self.order.insert(tx.priority());
        true
    }

    pub fn remove(&mut self, id: TxId) -> Option<Transaction> {
        let tx = self.pending.remove(&id)?;
        self.order.remove(&tx.priority());
        Some(tx)
    }

    pub fn contains(&self, id: TxId) -> bool {
        self.pending.contains_key(&id)
    }

    pub fn get(&self, id: TxId) -> Option<&Transaction> {
        self.pending.get(&id)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TxId> + '_ {
        self.pending.keys().copied()
    }

    /// Pending transactions, best fee-per-size first.
    pub fn by_priority(&self) -> impl Iterator<Item = &Transaction> + Clone + '_ {
        self.order.iter().map(|p| &self.pending[&p.id])
    }

    /// Number of pending transactions a miner would pick ahead of `key`.
    pub fn count_ahead_of(&self, key: &Priority) -> usize {
        self.order.range(..*key).count()
    }
}

/// The `capacity` best transactions by fee-per-size. Nothing is removed from the pool.
pub fn select_transactions(pool: &Mempool, capacity: usize) -> Vec<Transaction> {
    pool.by_priority().take(capacity).copied().collect()
}

/// Outcome of switching a node's canonical tip.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reorg {
    pub fork_point: Option<BlockId>,
    pub abandoned: Vec<BlockId>,
    pub adopted: Vec<BlockId>,
    pub returned: usize,
    pub confirmed: usize,
}

impl Reorg {
    pub fn is_noop(&self) -> bool {
        self.abandoned.is_empty() && self.adopted.is_empty()
    }
}

/// Makes `new_tip` canonical and rebalances the mempool against the switch.
pub fn reorganize(
    tree: &mut BlockTree,
    pool: &mut Mempool,
    new_tip: BlockId,
) -> Result<Reorg, ChainError> {
    if !tree.contains(new_tip) {
        return Err(ChainError::UnknownBlock(new_tip));
    }
    let old_tip = tree.canonical_tip();
    if old_tip == new_tip {
        return Ok(Reorg::default());
    }
    let fork_point = tree.common_ancestor(old_tip, new_tip)?;
    let abandoned = tree.branch(fork_point, old_tip)?;
    let adopted = tree.branch(fork_point, new_tip)?;

    let adopted_txs: BTreeSet<TxId> = adopted
        .iter()
        .flat_map(|b| b.transactions.iter().map(|tx| tx.id))
        .collect();

    let mut reorg = Reorg {
        fork_point: Some(fork_point),
        abandoned: abandoned.iter().map(|b| b.id).collect(),
        adopted: adopted.iter().map(|b| b.id).collect(),
        ..Reorg::default()
    };
    for tx in abandoned.iter().flat_map(|b| b.transactions.iter()) {
        if !adopted_txs.contains(&tx.id) && pool.insert(*tx) {
            reorg.returned += 1;
        }
    }
    for id in &adopted_txs {
        if pool.remove(*id).is_some() {
            reorg.confirmed += 1;
        }
    }
    tree.set_canonical_tip(new_tip);
    Ok(reorg)
}
