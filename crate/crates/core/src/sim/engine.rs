//! Event loop. Every miner is also a peer with its own block tree, mempool and
//! fork policy. Blocks travel over a complete graph with per-edge delay;
//! transactions reach every peer at once.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::chain::{reorganize, Block, BlockId, BlockTree, ChainError, Mempool, MinerId, Transaction, TxId};
use crate::estimator::{estimate, EstimatorConfig};
use crate::policy::{truth_states, Branch, ForkEvent, PolicyConfig, Verdict};
use crate::strategy::{adaptive_build_block, honest_build_block, SelfishAction, SelfishMiner, StrategyKind};

use super::config::{ConfigError, FeeDistribution, OnExhausted, ScenarioConfig};
use super::metrics::{AttackOutcome, AttackRecord, ForkRecord, MinerMetrics, RunMetrics};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("chain error: {0}")]
    Chain(#[from] ChainError),
    #[error("invariant violated at t={time}: {message}")]
    Invariant { time: f64, message: String },
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STREAM_LOTTERY: u64 = 1;
const STREAM_TX: u64 = 2;
const STREAM_NET: u64 = 3;
const NOISE_SALT: u64 = 0x006e_6f69_7365;
const POLICY_SALT: u64 = 0x706f_6c69_6379;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug)]
enum EventKind {
    Discovery { scripted: Option<usize> },
    TxArrival,
    Deliver {
        to: usize,
        blocks: Arc<[Arc<Block>]>,
        release: Option<usize>,
    },
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl Ord for Event {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Node {
    tree: BlockTree,
    pool: Mempool,
    policy: PolicyConfig,
    received: BTreeMap<BlockId, f64>,
    rejected: BTreeSet<BlockId>,
    waiting: BTreeMap<BlockId, Vec<Arc<Block>>>,
}

struct Attacker {
    kind: StrategyKind,
    machine: SelfishMiner,
    rented_share: f64,
    started: f64,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    attempts: u64,
    successes: u64,
    rejections: u64,
    aborts: u64,
}

struct PendingRelease {
    miner: usize,
    tip: BlockId,
    remaining: usize,
    record: AttackRecord,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    estimator: EstimatorConfig,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Event>,
    nodes: Vec<Node>,
    attackers: Vec<Option<Attacker>>,
    tallies: Vec<Tally>,
    published: BTreeMap<BlockId, Arc<Block>>,
    released: BTreeSet<BlockId>,
    pending_releases: Vec<Option<PendingRelease>>,
    open_releases: usize,
    in_flight: usize,
    script_left: usize,
    lottery_on: bool,
    next_block: u64,
    next_tx: u64,
    policy_evals: u64,
    events: u64,
    rented_minutes: f64,
    discarded_private: u64,
    fork_records: Vec<ForkRecord>,
    attacks: Vec<AttackRecord>,
    lottery: ChaCha8Rng,
    tx_rng: ChaCha8Rng,
    net: ChaCha8Rng,
    edge_delays: BTreeMap<(usize, usize), f64>,
}

/// Runs one scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunMetrics, SimError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut engine = Engine::new(cfg);
    engine.start();
    engine.event_loop()?;
    let mut metrics = engine.finish()?;
    metrics.wall_time = started.elapsed();
    Ok(metrics)
}

fn assign_policies(cfg: &ScenarioConfig) -> Vec<PolicyConfig> {
    let budget = cfg.compliance_fraction + 1e-9;
    let mut assigned = 0.0;
    cfg.miners
        .iter()
        .map(|m| {
            if assigned + m.hash_share <= budget {
                assigned += m.hash_share;
                cfg.policy.clone()
            } else {
                PolicyConfig::LongestChain
            }
        })
        .collect()
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        let genesis = Arc::new(Block::genesis());
        let nodes = assign_policies(cfg)
            .into_iter()
            .map(|policy| Node {
                tree: BlockTree::new(genesis.clone()),
                pool: Mempool::new(cfg.block_capacity),
                policy,
                received: BTreeMap::from([(genesis.id, 0.0)]),
                rejected: BTreeSet::new(),
                waiting: BTreeMap::new(),
            })
            .collect();
        let attackers = cfg
            .miners
            .iter()
            .map(|m| {
                m.strategy.is_selfish().then(|| Attacker {
                    kind: m.strategy,
                    machine: SelfishMiner::new(m.private_chain_length),
                    rented_share: m.rented_share,
                    started: 0.0,
                })
            })
            .collect();
        let edge_delays = cfg
            .propagation_delay
            .overrides
            .iter()
            .map(|e| {
                let from = cfg.miner_index(&e.from).expect("validated");
                let to = cfg.miner_index(&e.to).expect("validated");
                ((from, to), e.delay)
            })
            .collect();
        Self {
            cfg,
            estimator: cfg.estimator_config(),
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            attackers,
            tallies: vec![Tally::default(); cfg.miners.len()],
            published: BTreeMap::from([(genesis.id, genesis)]),
            released: BTreeSet::new(),
            pending_releases: Vec::new(),
            open_releases: 0,
            in_flight: 0,
            script_left: 0,
            lottery_on: false,
            next_block: 1,
            next_tx: 0,
            policy_evals: 0,
            events: 0,
            rented_minutes: 0.0,
            discarded_private: 0,
            fork_records: Vec::new(),
            attacks: Vec::new(),
            lottery: stream(cfg.seed, STREAM_LOTTERY),
            tx_rng: stream(cfg.seed, STREAM_TX),
            net: stream(cfg.seed, STREAM_NET),
            edge_delays,
        }
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn start(&mut self) {
        match &self.cfg.script {
            Some(script) => {
                self.script_left = script.steps.len();
                for step in &script.steps {
                    let idx = self.cfg.miner_index(&step.miner).expect("validated");
                    self.schedule(step.at, EventKind::Discovery { scripted: Some(idx) });
                }
                if script.steps.is_empty() && script.on_exhausted == OnExhausted::Continue {
                    self.start_lottery();
                }
            }
            None => self.start_lottery(),
        }
        self.schedule_tx_arrival();
    }

    fn start_lottery(&mut self) {
        self.lottery_on = true;
        self.schedule_discovery();
    }

    fn schedule_discovery(&mut self) {
        let exp = Exp::new(1.0 / self.cfg.block_interval).expect("interval validated positive");
        let t = self.now + exp.sample(&mut self.lottery);
        self.schedule(t, EventKind::Discovery { scripted: None });
    }

    fn schedule_tx_arrival(&mut self) {
        if self.cfg.tx_arrival_rate <= 0.0 {
            return;
        }
        let rate = self.cfg.tx_arrival_rate / self.cfg.block_interval;
        let exp = Exp::new(rate).expect("rate validated positive");
        let t = self.now + exp.sample(&mut self.tx_rng);
        self.schedule(t, EventKind::TxArrival);
    }

    fn event_loop(&mut self) -> Result<(), SimError> {
        while let Some(event) = self.queue.pop() {
            self.accrue_rent(event.time);
            self.now = event.time;
            self.events += 1;
            match event.kind {
                EventKind::Discovery { scripted } => self.on_discovery(scripted)?,
                EventKind::TxArrival => self.on_tx_arrival(),
                EventKind::Deliver { to, blocks, release } => {
                    self.in_flight -= 1;
                    self.receive(to, &blocks, release)?;
                }
            }
            if self.cfg.audit {
                self.audit()?;
            }
            if self.should_stop() {
                break;
            }
        }
        Ok(())
    }

    fn should_stop(&self) -> bool {
        let (tip, node) = self.reference();
        if self.nodes[node].tree.get(tip).expect("tip known").height >= self.cfg.duration_blocks {
            return true;
        }
        !self.lottery_on && self.script_left == 0 && self.in_flight == 0 && self.open_releases == 0
    }

    fn accrue_rent(&mut self, until: f64) {
        let dt = until - self.now;
        if dt <= 0.0 {
            return;
        }
        for attacker in self.attackers.iter().flatten() {
            if attacker.rented_share > 0.0 && attacker.machine.attack_window_active() {
                self.rented_minutes += dt;
            }
        }
    }

    /// Lottery weights with rented power folded in; the total stays 1.
    fn effective_weights(&self) -> Vec<f64> {
        let shares: Vec<f64> = self.cfg.miners.iter().map(|m| m.hash_share).collect();
        let boosted: Vec<bool> = self
            .attackers
            .iter()
            .map(|a| {
                a.as_ref()
                    .is_some_and(|a| a.rented_share > 0.0 && a.machine.attack_window_active())
            })
            .collect();
        if !boosted.iter().any(|&b| b) {
            return shares;
        }
        let boosted_total: f64 = shares
            .iter()
            .zip(&self.attackers)
            .zip(&boosted)
            .map(|((s, a), &b)| if b { s + a.as_ref().unwrap().rented_share } else { 0.0 })
            .sum::<f64>()
            .min(1.0);
        let rest_total: f64 = shares
            .iter()
            .zip(&boosted)
            .filter(|(_, &b)| !b)
            .map(|(s, _)| s)
            .sum();
        shares
            .iter()
            .zip(&self.attackers)
            .zip(&boosted)
            .map(|((s, a), &b)| {
                if b {
                    s + a.as_ref().unwrap().rented_share
                } else if rest_total > 0.0 {
                    s * (1.0 - boosted_total) / rest_total
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn pick_winner(&mut self) -> usize {
        let weights = self.effective_weights();
        let total: f64 = weights.iter().sum();
        let mut draw = self.lottery.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                return i;
            }
            draw -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    fn on_discovery(&mut self, scripted: Option<usize>) -> Result<(), SimError> {
        let miner = match scripted {
            Some(idx) => {
                self.script_left -= 1;
                if self.script_left == 0
                    && self.cfg.script.as_ref().map(|s| s.on_exhausted) == Some(OnExhausted::Continue)
                {
                    self.start_lottery();
                }
                idx
            }
            None => {
                let winner = self.pick_winner();
                self.schedule_discovery();
                winner
            }
        };
        let id = BlockId(self.next_block);
        self.next_block += 1;
        if self.attackers[miner].is_some() {
            self.selfish_found(miner, id)
        } else {
            self.honest_found(miner, id)
        }
    }

    fn honest_found(&mut self, miner: usize, id: BlockId) -> Result<(), SimError> {
        let node = &self.nodes[miner];
        let block = Arc::new(honest_build_block(
            id,
            MinerId(miner as u32),
            &node.tree,
            &node.pool,
            self.now,
        ));
        self.published.insert(block.id, block.clone());
        self.receive(miner, std::slice::from_ref(&block), None)?;
        self.broadcast(miner, Arc::from(vec![block]), None);
        Ok(())
    }

    fn selfish_found(&mut self, miner: usize, id: BlockId) -> Result<(), SimError> {
        let node = &self.nodes[miner];
        let attacker = self.attackers[miner].as_ref().expect("caller checked");
        let public_tip = node.tree.get(node.tree.canonical_tip()).expect("tip known").clone();
        let public_height = public_tip.height;
        let parent = attacker.machine.mining_parent(&public_tip).clone();
        let first = attacker.machine.starts_new_chain();
        let block = Arc::new(adaptive_build_block(
            attacker.kind,
            id,
            MinerId(miner as u32),
            &parent,
            &node.pool,
            &attacker.machine.private_txs(),
            first,
            self.now,
        ));
        let attacker = self.attackers[miner].as_mut().expect("caller checked");
        if first {
            attacker.started = self.now;
            self.tallies[miner].attempts += 1;
        }
        let action = attacker.machine.on_block_found(block, public_height);
        self.handle_selfish_action(miner, action)
    }

    fn handle_selfish_action(&mut self, miner: usize, action: SelfishAction) -> Result<(), SimError> {
        match action {
            SelfishAction::Hold | SelfishAction::Withhold(_) => Ok(()),
            SelfishAction::Abort(blocks) => {
                let started = self.attackers[miner].as_ref().map_or(self.now, |a| a.started);
                let fork_height = blocks[0].height - 1;
                let public_len = self.nodes[miner].tree.canonical_height().saturating_sub(fork_height);
                self.discarded_private += blocks.len() as u64;
                self.tallies[miner].aborts += 1;
                self.attacks.push(AttackRecord {
                    miner: self.cfg.miners[miner].id.clone(),
                    started,
                    ended: self.now,
                    fork_height,
                    private_len: blocks.len(),
                    public_len,
                    outcome: AttackOutcome::Aborted,
                });
                Ok(())
            }
            SelfishAction::Release(blocks) => self.release(miner, blocks),
        }
    }

    fn release(&mut self, miner: usize, blocks: Vec<Arc<Block>>) -> Result<(), SimError> {
        let started = self.attackers[miner].as_ref().map_or(self.now, |a| a.started);
        let fork_height = blocks[0].height - 1;
        let public_len = self.nodes[miner].tree.canonical_height().saturating_sub(fork_height);
        for b in &blocks {
            self.published.insert(b.id, b.clone());
            self.released.insert(b.id);
        }
        let tip = blocks.last().expect("released chains are non-empty").id;
        let record = AttackRecord {
            miner: self.cfg.miners[miner].id.clone(),
            started,
            ended: self.now,
            fork_height,
            private_len: blocks.len(),
            public_len,
            outcome: AttackOutcome::Rejected,
        };
        let slot = self.pending_releases.len();
        self.pending_releases.push(Some(PendingRelease {
            miner,
            tip,
            remaining: self.nodes.len(),
            record,
        }));
        self.open_releases += 1;
        let blocks: Arc<[Arc<Block>]> = Arc::from(blocks);
        self.broadcast(miner, blocks.clone(), Some(slot));
        self.receive(miner, &blocks, Some(slot))
    }

    fn delay(&mut self, from: usize, to: usize) -> f64 {
        if let Some(d) = self.edge_delays.get(&(from, to)) {
            return *d;
        }
        let p = &self.cfg.propagation_delay;
        let (lo, hi) = (p.min, p.upper());
        if hi > lo {
            self.net.random_range(lo..hi)
        } else {
            lo
        }
    }

    fn broadcast(&mut self, from: usize, blocks: Arc<[Arc<Block>]>, release: Option<usize>) {
        for to in 0..self.nodes.len() {
            if to == from {
                continue;
            }
            let t = self.now + self.delay(from, to);
            self.in_flight += 1;
            self.schedule(
                t,
                EventKind::Deliver {
                    to,
                    blocks: blocks.clone(),
                    release,
                },
            );
        }
    }

    fn on_tx_arrival(&mut self) {
        let id = TxId(self.next_tx);
        self.next_tx += 1;
        let size = self.tx_rng.random_range(self.cfg.tx_size.min..=self.cfg.tx_size.max);
        let rate = match self.cfg.fee_distribution {
            FeeDistribution::Constant { rate } => rate,
            FeeDistribution::Uniform { min, max } if max > min => self.tx_rng.random_range(min..max),
            FeeDistribution::Uniform { min, .. } => min,
            FeeDistribution::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("mean validated").sample(&mut self.tx_rng)
            }
        };
        let fee = (rate * size as f64).round() as u64;

        let (tip, reference) = self.reference();
        let node = &self.nodes[reference];
        let tip_height = node.tree.get(tip).expect("tip known").height;
        let mut tx = Transaction {
            id,
            size,
            fee,
            created_height: tip_height,
            expected_confirmation_height: tip_height + 1,
        };
        let colluding = self
            .cfg
            .adversarial_clients
            .as_ref()
            .filter(|adv| adv.fraction > 0.0 && self.tx_rng.random_bool(adv.fraction))
            .map(|adv| adv.stamp_offset);
        tx.expected_confirmation_height = match colluding {
            Some(offset) => tip_height + offset,
            None => estimate(
                &node.pool,
                tip_height,
                &tx,
                &self.estimator,
                splitmix64(self.cfg.seed ^ NOISE_SALT ^ splitmix64(id.0)),
            ),
        };
        for node in &mut self.nodes {
            node.pool.insert(tx);
        }
        self.schedule_tx_arrival();
    }

    /// Canonical tip held by the largest hash weight of peers, with the
    /// index of the first peer holding it.
    fn reference(&self) -> (BlockId, usize) {
        let mut weight: BTreeMap<BlockId, (f64, usize)> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let entry = weight.entry(node.tree.canonical_tip()).or_insert((0.0, i));
            entry.0 += self.cfg.miners[i].hash_share;
        }
        let mut best: Option<(BlockId, f64, u64, usize)> = None;
        for (tip, (w, i)) in weight {
            let h = self.nodes[i].tree.get(tip).expect("tip known").height;
            let better = match best {
                None => true,
                Some((_, bw, bh, _)) => w > bw + 1e-12 || ((w - bw).abs() <= 1e-12 && h > bh),
            };
            if better {
                best = Some((tip, w, h, i));
            }
        }
        let (tip, _, _, i) = best.expect("at least one node");
        (tip, i)
    }

    fn receive(&mut self, to: usize, blocks: &[Arc<Block>], release: Option<usize>) -> Result<(), SimError> {
        let now = self.now;
        let mut connected = Vec::new();
        {
            let node = &mut self.nodes[to];
            for block in blocks {
                if node.tree.contains(block.id) || node.received.contains_key(&block.id) {
                    continue;
                }
                node.received.insert(block.id, now);
                let parent = block.parent_id.expect("mined blocks have parents");
                if node.tree.contains(parent) {
                    connect(node, block.clone(), &mut connected)?;
                } else {
                    node.waiting.entry(parent).or_default().push(block.clone());
                }
            }
        }
        let candidate = {
            let node = &self.nodes[to];
            connected
                .iter()
                .filter(|id| !node.rejected.contains(id))
                .filter_map(|id| node.tree.get(*id))
                .max_by(|a, b| a.height.cmp(&b.height).then(b.id.cmp(&a.id)))
                .map(|b| b.id)
        };
        if let Some(tip) = candidate {
            self.consider(to, tip)?;
        }
        if let Some(slot) = release {
            self.release_delivered(slot);
        }
        Ok(())
    }

    /// Offers `tip` to peer `to` as a new canonical candidate.
    fn consider(&mut self, to: usize, tip: BlockId) -> Result<(), SimError> {
        let current = self.nodes[to].tree.canonical_tip();
        if current == tip {
            return Ok(());
        }
        if self.nodes[to].tree.is_ancestor(current, tip) {
            return self.adopt(to, tip);
        }
        let node = &self.nodes[to];
        let fork_point = node.tree.common_ancestor(current, tip)?;
        let branch_a = node.tree.branch(fork_point, current)?;
        let branch_b = node.tree.branch(fork_point, tip)?;
        if branch_b.len() < branch_a.len() {
            return Ok(());
        }
        let times = |branch: &[Arc<Block>]| -> Vec<f64> {
            branch.iter().map(|b| node.received[&b.id]).collect()
        };
        let event = ForkEvent::new(
            fork_point,
            node.received.get(&fork_point).copied().unwrap_or(0.0),
            branch_a.clone(),
            times(&branch_a),
            branch_b.clone(),
            times(&branch_b),
        )
        .map_err(|e| SimError::Invariant {
            time: self.now,
            message: e.to_string(),
        })?;
        self.policy_evals += 1;
        let seed = splitmix64(self.cfg.seed ^ POLICY_SALT ^ splitmix64(self.policy_evals));
        let verdict = node.policy.decide(&event, seed);
        self.record_fork(to, &event, verdict);

        if verdict.reason.is_rejection() {
            let loser = match verdict.winner {
                Branch::A => &branch_b,
                Branch::B => &branch_a,
            };
            let node = &mut self.nodes[to];
            for b in loser {
                mark_rejected(node, b.id);
            }
        }
        if verdict.winner == Branch::B {
            self.adopt(to, tip)?;
        }
        Ok(())
    }

    fn record_fork(&mut self, to: usize, event: &ForkEvent, verdict: Verdict) {
        let node = &self.nodes[to];
        let tip_b = event.branch_b.last().expect("non-empty");
        let report = matches!(node.policy, PolicyConfig::TruthState).then(|| truth_states(event));
        let first = &event.branch_b[0];
        self.fork_records.push(ForkRecord {
            time: self.now,
            peer: self.cfg.miners[to].id.clone(),
            policy: node.policy.name().to_string(),
            fork_height: first.height - 1,
            branch_a_len: event.len_a(),
            branch_b_len: event.len_b(),
            challenger: self.miner_name(tip_b.miner),
            release: event.branch_b.iter().any(|b| self.released.contains(&b.id)),
            winner: verdict.winner,
            verdict_reason: verdict.reason,
            s_state: report.and_then(|r| r.s_state),
            f_state: report.and_then(|r| r.f_state),
            h_state: report.map(|r| r.h_state),
            a_size: report.map(|r| r.a_size),
            n: report.map(|r| r.n),
            q: report.map(|r| r.q),
            first_block_excess: first.mean_expected_height().map(|m| m - first.height as f64),
        });
    }

    fn miner_name(&self, miner: MinerId) -> String {
        self.cfg
            .miners
            .get(miner.0 as usize)
            .map_or_else(|| "genesis".to_string(), |m| m.id.clone())
    }

    fn adopt(&mut self, to: usize, tip: BlockId) -> Result<(), SimError> {
        let node = &mut self.nodes[to];
        reorganize(&mut node.tree, &mut node.pool, tip)?;
        if let Some(attacker) = self.attackers[to].as_mut() {
            let tree = &self.nodes[to].tree;
            let detached = attacker
                .machine
                .private_chain()
                .is_some_and(|c| !tree.is_ancestor(c.fork_point, tree.canonical_tip()));
            let action = if detached {
                attacker.machine.abandon()
            } else {
                attacker.machine.on_public_update(tree.canonical_height())
            };
            self.handle_selfish_action(to, action)?;
        }
        Ok(())
    }

    fn release_delivered(&mut self, slot: usize) {
        let done = {
            let pending = self.pending_releases[slot].as_mut().expect("open release");
            pending.remaining -= 1;
            pending.remaining == 0
        };
        if done {
            let pending = self.pending_releases[slot].take().expect("open release");
            self.resolve_release(pending);
        }
    }

    fn resolve_release(&mut self, mut pending: PendingRelease) {
        self.open_releases -= 1;
        let (tip, node) = self.reference();
        let success = self.nodes[node].tree.is_ancestor(pending.tip, tip);
        let tally = &mut self.tallies[pending.miner];
        pending.record.ended = self.now;
        if success {
            tally.successes += 1;
            pending.record.outcome = AttackOutcome::Success;
        } else {
            tally.rejections += 1;
            pending.record.outcome = AttackOutcome::Rejected;
        }
        self.attacks.push(pending.record);
    }

    fn audit(&self) -> Result<(), SimError> {
        let generated = self.next_tx as usize;
        for (i, node) in self.nodes.iter().enumerate() {
            let fail = |message: String| SimError::Invariant {
                time: self.now,
                message: format!("peer {}: {message}", self.cfg.miners[i].id),
            };
            let mut confirmed = BTreeSet::new();
            for block in node.tree.canonical_chain() {
                for tx in &block.transactions {
                    if !confirmed.insert(tx.id) {
                        return Err(fail(format!("{} confirmed twice", tx.id)));
                    }
                    if node.pool.contains(tx.id) {
                        return Err(fail(format!("{} both pending and confirmed", tx.id)));
                    }
                }
            }
            if confirmed.len() + node.pool.len() != generated {
                return Err(fail(format!(
                    "{} confirmed + {} pending != {} generated",
                    confirmed.len(),
                    node.pool.len(),
                    generated
                )));
            }
            for block in node.tree.blocks() {
                if let Some(parent) = block.parent_id {
                    let p = node.tree.get(parent).ok_or_else(|| fail(format!("{} lost its parent", block.id)))?;
                    if block.height != p.height + 1 {
                        return Err(fail(format!("{} breaks height monotonicity", block.id)));
                    }
                }
            }
            if !node.tree.tips().contains(&node.tree.canonical_tip()) {
                return Err(fail("canonical tip is not a leaf".into()));
            }
        }
        for attacker in self.attackers.iter().flatten() {
            if let Some(chain) = attacker.machine.private_chain() {
                for block in &chain.blocks {
                    if self.published.contains_key(&block.id) {
                        return Err(SimError::Invariant {
                            time: self.now,
                            message: format!("withheld {} already published", block.id),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunMetrics, SimError> {
        // anything still open at the horizon is settled as it stands
        for slot in 0..self.pending_releases.len() {
            if let Some(pending) = self.pending_releases[slot].take() {
                self.resolve_release(pending);
            }
        }
        for miner in 0..self.attackers.len() {
            let Some(attacker) = self.attackers[miner].as_ref() else {
                continue;
            };
            if let Some(chain) = attacker.machine.private_chain() {
                let blocks = chain.blocks.clone();
                self.handle_selfish_action(miner, SelfishAction::Abort(blocks))?;
            }
        }

        let (tip, reference) = self.reference();
        let chain = self.nodes[reference].tree.chain_to(tip)?;
        let canonical: BTreeSet<BlockId> = chain.iter().map(|b| b.id).collect();
        let mut blocks = vec![0u64; self.cfg.miners.len()];
        for b in &chain {
            blocks[b.miner.0 as usize] += 1;
        }
        let mut orphaned = vec![0u64; self.cfg.miners.len()];
        let mut children: BTreeMap<BlockId, u32> = BTreeMap::new();
        for b in self.published.values().filter(|b| !b.is_genesis()) {
            if !canonical.contains(&b.id) {
                orphaned[b.miner.0 as usize] += 1;
            }
            *children.entry(b.parent_id.expect("non-genesis")).or_default() += 1;
        }
        let total = chain.len() as u64;
        let reward = self.cfg.block_reward;
        let miners = self
            .cfg
            .miners
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let t = self.tallies[i];
                MinerMetrics {
                    id: spec.id.clone(),
                    strategy: spec.strategy.name().to_string(),
                    policy: self.nodes[i].policy.name().to_string(),
                    hash_share: spec.hash_share,
                    blocks: blocks[i],
                    revenue: blocks[i] as f64 * reward,
                    revenue_share: if total > 0 {
                        blocks[i] as f64 / total as f64
                    } else {
                        0.0
                    },
                    orphaned_blocks: orphaned[i],
                    attempts: t.attempts,
                    successes: t.successes,
                    rejections: t.rejections,
                    aborts: t.aborts,
                }
            })
            .collect::<Vec<_>>();
        let sum = |f: fn(&Tally) -> u64| self.tallies.iter().map(f).sum::<u64>();
        let (attempts, successes, rejections, aborts) = (
            sum(|t| t.attempts),
            sum(|t| t.successes),
            sum(|t| t.rejections),
            sum(|t| t.aborts),
        );
        if successes + rejections + aborts != attempts {
            return Err(SimError::Invariant {
                time: self.now,
                message: format!(
                    "attack outcomes {successes}+{rejections}+{aborts} do not add up to {attempts} attempts"
                ),
            });
        }
        let revenue_total: f64 = miners.iter().map(|m| m.revenue).sum();
        if (revenue_total - total as f64 * reward).abs() > 1e-6 * revenue_total.abs().max(1.0) {
            return Err(SimError::Invariant {
                time: self.now,
                message: "revenue does not match canonical length".into(),
            });
        }
        Ok(RunMetrics {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            policy: self.cfg.policy.name().to_string(),
            duration_blocks: self.cfg.duration_blocks,
            canonical_height: total,
            sim_time: self.now,
            miners,
            orphans: orphaned.iter().sum(),
            forks: children.values().filter(|&&c| c > 1).count() as u64,
            discarded_private_blocks: self.discarded_private,
            attempts,
            successes,
            rejections,
            aborts,
            rented_minutes: self.rented_minutes,
            rent_cost: self.rented_minutes * self.cfg.rent_cost_per_hour / 60.0,
            transactions: self.next_tx,
            events: self.events,
            fork_records: self.fork_records,
            attacks: self.attacks,
            wall_time: Default::default(),
        })
    }
}

/// Inserts `block` and anything that was waiting on it.
fn connect(node: &mut Node, block: Arc<Block>, connected: &mut Vec<BlockId>) -> Result<(), ChainError> {
    let mut stack = vec![block];
    while let Some(block) = stack.pop() {
        let parent = block.parent_id.expect("mined blocks have parents");
        if node.rejected.contains(&parent) {
            node.rejected.insert(block.id);
        }
        node.tree.append_block(block.clone())?;
        connected.push(block.id);
        if let Some(children) = node.waiting.remove(&block.id) {
            stack.extend(children);
        }
    }
    Ok(())
}

fn mark_rejected(node: &mut Node, id: BlockId) {
    let mut stack = vec![id];
    while let Some(id) = stack.pop() {
        if node.rejected.insert(id) {
            stack.extend(node.tree.children(id).iter().copied());
        }
    }
}
