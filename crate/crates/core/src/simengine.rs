//! Slot-synchronous simulation engine.
//!
//! Each step executes one global slot: commit boundaries, proposal timeouts,
//! superframe-start planning, transmission gathering, collision-aware
//! delivery, and end-of-slot schedule mutation, always iterating nodes in
//! ascending id so runs are reproducible bit for bit. Reservation grants
//! (GRT) and confirmation acknowledgments (ACK) resolve reliably within the
//! slot that carried the triggering message; everything else rides the
//! sender's reserved data slot toward the receiving neighbor.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::protocol::{
    CommitOutcome, DuplicatePropMode, Effect, Message, MessageKind, NodeState, Payload,
    ProtocolCtx,
};
use crate::schedule::{Registry, SlotIndex, Superframe};
use crate::topology::{Link, NodeId, Topology};

/// How the common initial period is derived from the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InitialPeriodPolicy {
    /// Twice the maximum degree; guarantees a feasible slot always exists.
    DoubleMaxDegree,
    /// A fixed period regardless of topology.
    Constant(u32),
    /// `ceil(max_degree / 3) + 5`; deliberately tight, may start insufficient.
    ThirdMaxDegreePlusFive,
}

impl InitialPeriodPolicy {
    pub fn period_for(self, max_degree: u32) -> u32 {
        let p = match self {
            InitialPeriodPolicy::DoubleMaxDegree => 2 * max_degree,
            InitialPeriodPolicy::Constant(p) => p,
            InitialPeriodPolicy::ThirdMaxDegreePlusFive => max_degree.div_ceil(3) + 5,
        };
        p.max(2)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("insufficient initial period: link {0:?} found no feasible slot and the schedule is stuck")]
    InsufficientPeriod(Link),
    #[error("no convergence within {0} slots")]
    MaxSlotsExceeded(u64),
    #[error("join requires an existing neighbor set, got none")]
    InvalidJoin,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub topology: Topology,
    pub policy: InitialPeriodPolicy,
    pub seed: u64,
    /// Slot budget before giving up; default `10_000 * P_i`.
    pub max_slots: Option<u64>,
    /// Proposal/approval timeout in slots; default `2 * |V| * P_i`.
    pub timeout: Option<u64>,
    pub duplicate_mode: DuplicatePropMode,
    /// Keep per-message trace lines (`slot,kind,src,dst,payload-json`).
    pub collect_message_log: bool,
    /// Run the period-shrink machinery (Part 2). Disabled for experiments
    /// that study the reservation race in isolation: the run then ends at
    /// the first slot where no link can move earlier.
    pub part2: bool,
}

impl SimConfig {
    pub fn new(topology: Topology, policy: InitialPeriodPolicy, seed: u64) -> Self {
        SimConfig {
            topology,
            policy,
            seed,
            max_slots: None,
            timeout: None,
            duplicate_mode: DuplicatePropMode::Responsive,
            collect_message_log: false,
            part2: true,
        }
    }
}

/// One slot of aggregate activity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlotRecord {
    pub slot: u64,
    /// Scheduled link activations this slot (data transmissions).
    pub transmissions: u32,
    /// RESV attempts that found the receiver transmitting.
    pub collisions: u32,
    pub messages_by_kind: BTreeMap<MessageKind, u32>,
    pub period_by_node: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RetryEventKind {
    Success,
    Failure,
    /// Budget refill when a link re-enters the improvement race.
    Reset,
}

/// Retry-budget sample for one improvement attempt, for stabilization checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RetryEvent {
    pub slot: u64,
    pub link: Link,
    pub kind: RetryEventKind,
    pub budget_after: u32,
}

/// One period-shrink attempt from PROP emission to commit (or failure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub root: NodeId,
    pub proposed_period: u32,
    pub period_at_start: u32,
    pub start_slot: u64,
    pub commit_slot: Option<u64>,
    pub closed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimTrace {
    pub initial_period: u32,
    pub final_period: u32,
    pub convergence_slot: Option<u64>,
    /// First slot at which every link holds a reservation and none can move
    /// strictly earlier (Definition-1 convergence of the reservation race,
    /// before any period-shrink episodes or plateau wandering).
    pub part1_slot: Option<u64>,
    pub part1_resv: u64,
    pub part1_grt: u64,
    pub rows: Vec<SlotRecord>,
    pub resv_total: u64,
    pub grt_total: u64,
    #[serde(serialize_with = "ser_link_map")]
    pub resv_per_link: BTreeMap<Link, u32>,
    pub retry_events: Vec<RetryEvent>,
    pub episodes: Vec<Episode>,
    pub starvation_events: u64,
    pub message_log: Vec<String>,
    pub final_superframe: Option<Superframe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub initial_period: u32,
    pub final_period: u32,
    pub convergence_slots: u64,
    pub resv_count: u64,
    pub grt_count: u64,
    /// Mean concurrently active links per slot of the final superframe.
    pub avg_links_per_slot: f64,
    pub resv_per_link_mean: f64,
    /// Slot of Definition-1 convergence: every link reserved, none able to
    /// move strictly earlier. Reached well before full quiescence, which
    /// also waits out period-shrink episodes and plateau wandering.
    pub part1_convergence_slots: u64,
    /// RESV transmissions per link up to Definition-1 convergence.
    pub part1_resv_per_link_mean: f64,
    /// GRT count up to Definition-1 convergence.
    pub part1_grt_count: u64,
}

fn ser_link_map<S: serde::Serializer>(
    m: &BTreeMap<Link, u32>,
    s: S,
) -> Result<S::Ok, S::Error> {
    s.collect_seq(m.iter())
}

pub struct Engine {
    cfg: SimConfig,
    nodes: Vec<NodeState>,
    registry: Registry,
    adjacency: Vec<BTreeSet<NodeId>>,
    now: u64,
    timeout: u64,
    max_slots: u64,
    converged: bool,
    trace: SimTrace,
    last_registry_change: u64,
    /// First slot of the current feasibility-starvation streak per link.
    starved_since: BTreeMap<Link, u64>,
    episode_open: BTreeMap<NodeId, usize>,
}

fn node_rng(seed: u64, id: NodeId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id.0 as u64 + 1))
}

impl Engine {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        let stats = cfg.topology.stats().expect("connected topology");
        let initial_period = cfg.policy.period_for(stats.max_degree);
        let timeout =
            cfg.timeout.unwrap_or(2 * stats.node_count as u64 * initial_period as u64);
        let max_slots = cfg.max_slots.unwrap_or(10_000 * initial_period as u64);
        let nodes: Vec<NodeState> = cfg
            .topology
            .node_ids()
            .map(|id| {
                NodeState::new(
                    id,
                    cfg.topology.neighbors(id).clone(),
                    initial_period,
                    cfg.topology.is_local_max(id),
                    node_rng(cfg.seed, id),
                )
            })
            .collect();
        let adjacency = cfg.topology.node_ids().map(|id| cfg.topology.neighbors(id).clone()).collect();
        Ok(Engine {
            cfg,
            nodes,
            registry: Registry::new(),
            adjacency,
            now: 1,
            timeout,
            max_slots,
            converged: false,
            trace: SimTrace {
                initial_period,
                final_period: initial_period,
                convergence_slot: None,
                part1_slot: None,
                part1_resv: 0,
                part1_grt: 0,
                rows: Vec::new(),
                resv_total: 0,
                grt_total: 0,
                resv_per_link: BTreeMap::new(),
                retry_events: Vec::new(),
                episodes: Vec::new(),
                starvation_events: 0,
                message_log: Vec::new(),
                final_superframe: None,
            },
            last_registry_change: 0,
            starved_since: BTreeMap::new(),
            episode_open: BTreeMap::new(),
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn current_slot(&self) -> u64 {
        self.now
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        &self.nodes[id.index()]
    }

    fn log_message(&mut self, slot: u64, msg: &Message) {
        if self.cfg.collect_message_log {
            self.trace.message_log.push(format!(
                "{},{:?},{},{},{}",
                slot,
                msg.payload.kind(),
                msg.src.0,
                msg.dst.0,
                msg.payload.to_json()
            ));
        }
    }

    fn count_kind(row: &mut SlotRecord, kind: MessageKind, n: u32) {
        if n > 0 {
            *row.messages_by_kind.entry(kind).or_insert(0) += n;
        }
    }

    fn close_episode(&mut self, root: NodeId, commit_slot: Option<u64>) {
        if let Some(idx) = self.episode_open.remove(&root) {
            let ep = &mut self.trace.episodes[idx];
            ep.commit_slot = commit_slot;
            ep.closed = true;
        }
    }

    /// Advance the simulation by one slot. Returns true once every node is
    /// quiescent (first time only; the flag sticks until a join).
    pub fn step(&mut self) -> Result<bool, SimError> {
        let now = self.now;
        let mut row = SlotRecord {
            slot: now,
            transmissions: 0,
            collisions: 0,
            messages_by_kind: BTreeMap::new(),
            period_by_node: Vec::new(),
        };

        // Phase 1: commit boundaries, in id order. Grants from past slots are
        // already in the registry, so the integrity assertion is exact.
        for i in 0..self.nodes.len() {
            let outcome = self.nodes[i].process_commit_boundary(now);
            if std::env::var("DBG_NODE").is_ok_and(|v| v.parse::<usize>().unwrap() == i)
                && !matches!(outcome, CommitOutcome::None)
            {
                eprintln!("slot {now}: node {i} commit outcome {outcome:?}");
            }
            match outcome {
                CommitOutcome::Committed { root, new_period, .. } => {
                    if self.registry.global_last_occupied() > new_period {
                        let bad: Vec<_> = self
                            .registry
                            .reserved_links()
                            .into_iter()
                            .filter(|&(_, s)| s > new_period)
                            .collect();
                        panic!(
                            "slot {now}: period switch to {new_period} would orphan {bad:?}"
                        );
                    }
                    // A new period reopens the improvement race: slots that
                    // were locally minimal under the old frame may not be
                    // under the new one, so the ratchet continues.
                    for (link, budget) in self.nodes[i].reactivate_links(&self.registry) {
                        self.trace.retry_events.push(RetryEvent {
                            slot: now,
                            link,
                            kind: RetryEventKind::Reset,
                            budget_after: budget,
                        });
                    }
                    if root == self.nodes[i].id {
                        self.close_episode(root, Some(now));
                    }
                }
                CommitOutcome::Abandoned => {
                    let root = self.nodes[i].id;
                    self.close_episode(root, None);
                }
                _ => {}
            }
        }

        // Phase 2: proposal timeouts.
        for i in 0..self.nodes.len() {
            let mut own_timeout = None;
            self.nodes[i].sweep_proposals(now, &mut own_timeout);
            if own_timeout.is_some() {
                let root = self.nodes[i].id;
                self.close_episode(root, None);
            }
        }

        // Phase 3: superframe-start planning against the slot-boundary view.
        for i in 0..self.nodes.len() {
            if self.nodes[i].period.slot_index(now) != 1 {
                continue;
            }
            let ctx = ProtocolCtx {
                now,
                registry: &self.registry,
                timeout: self.timeout,
                duplicate_mode: self.cfg.duplicate_mode,
                part2: self.cfg.part2,
            };
            let outcome = self.nodes[i].plan_superframe(&ctx);
            let period = self.nodes[i].period.current_period as u64;
            for link in outcome.starved_links {
                self.trace.starvation_events += 1;
                let since = *self.starved_since.entry(link).or_insert(now);
                // Starvation is transiently normal under a tight initial
                // period while improvements still compact the frame; it is
                // fatal only once the whole schedule has stopped moving.
                if now.saturating_sub(since.max(self.last_registry_change)) >= 4 * period {
                    return Err(SimError::InsufficientPeriod(link));
                }
            }
            for (link, budget) in outcome.reactivated {
                self.trace.retry_events.push(RetryEvent {
                    slot: now,
                    link,
                    kind: RetryEventKind::Reset,
                    budget_after: budget,
                });
            }
            if let Some(proposed) = outcome.proposed {
                let root = self.nodes[i].id;
                self.trace.episodes.push(Episode {
                    root,
                    proposed_period: proposed,
                    period_at_start: self.nodes[i].period.current_period,
                    start_slot: now,
                    commit_slot: None,
                    closed: false,
                });
                self.episode_open.insert(root, self.trace.episodes.len() - 1);
            }
        }

        // Phase 4: gather this slot's transmissions.
        let indices: Vec<SlotIndex> =
            self.nodes.iter().map(|n| n.period.slot_index(now)).collect();
        let mut transmitters: BTreeSet<NodeId> = BTreeSet::new();
        for ((src, _), s) in self.registry.reserved_links() {
            if indices[src.index()] == s {
                transmitters.insert(src);
                row.transmissions += 1;
            }
        }
        let mut resv_msgs: Vec<Message> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let msgs = node.resv_to_send(indices[i]);
            if !msgs.is_empty() {
                transmitters.insert(node.id);
                resv_msgs.extend(msgs);
            }
        }
        let mut carriers: Vec<Message> = Vec::new();
        for i in 0..self.nodes.len() {
            let id = self.nodes[i].id;
            let idx = indices[i];
            let mut kept = Vec::new();
            for (dst, payload) in std::mem::take(&mut self.nodes[i].outbox) {
                if self.registry.slot_of((id, dst)) == Some(idx) {
                    carriers.push(Message { src: id, dst, payload });
                } else {
                    kept.push((dst, payload));
                }
            }
            self.nodes[i].outbox = kept;
        }

        // Phase 5: RESV delivery and grant resolution. A RESV lands only if
        // the target neighbor is not itself transmitting this slot; grants
        // are reliable and mutate the registry at end of slot.
        let mut granted: Vec<(Link, SlotIndex)> = Vec::new();
        let mut failed: Vec<(Link, SlotIndex)> = Vec::new();
        for msg in &resv_msgs {
            let Payload::Resv { link, target_slot } = msg.payload else { unreachable!() };
            self.trace.resv_total += 1;
            *self.trace.resv_per_link.entry(link).or_insert(0) += 1;
            Self::count_kind(&mut row, MessageKind::Resv, 1);
            self.log_message(now, msg);
            // The receiver denies when it is mid-transmission, when the slot
            // sits above a period it has promised away, or when the slot has
            // become infeasible since the sender planned the move (another
            // grant — possibly earlier in this very slot — took it).
            if transmitters.contains(&msg.dst)
                || target_slot > self.nodes[msg.dst.index()].slot_ceiling()
                || self.registry.rslot(link.0).contains(&target_slot)
                || self.registry.tslot(link.1).contains(&target_slot)
            {
                row.collisions += 1;
                failed.push((link, target_slot));
            } else {
                granted.push((link, target_slot));
                self.registry.reserve(link, target_slot);
                self.last_registry_change = now;
                self.starved_since.remove(&link);
            }
        }
        for &(link, slot) in &granted {
            let sender = link.0.index();
            let period = self.nodes[sender].period.current_period;
            let budget =
                self.registry.feasible_slots(link, period).iter().filter(|&&s| s < slot).count()
                    as u32;
            self.nodes[sender].on_grt_received(link.1, slot, budget);
            self.trace.grt_total += 1;
            Self::count_kind(&mut row, MessageKind::Grt, 1);
            if self.cfg.collect_message_log {
                let m = Message {
                    src: link.1,
                    dst: link.0,
                    payload: Payload::Grt { link, granted_slot: slot },
                };
                self.log_message(now, &m);
            }
            self.trace.retry_events.push(RetryEvent {
                slot: now,
                link,
                kind: RetryEventKind::Success,
                budget_after: budget,
            });
        }
        for &(link, _slot) in &failed {
            let sender = link.0.index();
            let st = &self.nodes[sender].links[&link.1];
            let was_improvement = st.current_slot.is_some() && !st.lateral_attempt;
            self.nodes[sender].on_grt_missing(link.1, now);
            if was_improvement {
                self.trace.retry_events.push(RetryEvent {
                    slot: now,
                    link,
                    kind: RetryEventKind::Failure,
                    budget_after: self.nodes[sender].links[&link.1].retries_remaining,
                });
            }
        }

        // Phase 6: control messages riding reserved data slots. The receiver
        // of a carried message never transmits in that slot (it is receiving
        // on a reserved link), so delivery is collision-free by construction;
        // the guard below re-queues the payload if that ever breaks.
        carriers.sort_by_key(|m| (m.src, m.dst));
        for msg in carriers {
            Self::count_kind(&mut row, msg.payload.kind(), 1);
            self.log_message(now, &msg);
            if transmitters.contains(&msg.dst) {
                self.nodes[msg.src.index()].outbox.push((msg.dst, msg.payload));
                continue;
            }
            let effects = self.dispatch(msg, now);
            for effect in effects {
                self.apply_effect(effect, now, &mut row);
            }
        }

        // End of slot: schedule validity over the registry-level superframe.
        let horizon = self
            .nodes
            .iter()
            .map(|n| n.period.current_period)
            .max()
            .unwrap_or(2)
            .max(self.registry.global_last_occupied());
        debug_assert!(
            self.registry.to_superframe(horizon).validate_no_mix_tx_rx().is_empty(),
            "mix-tx-rx violation in slot {now}"
        );

        row.period_by_node = self.nodes.iter().map(|n| n.period.current_period).collect();
        self.trace.rows.push(row);

        if self.trace.part1_slot.is_none()
            && self.nodes.iter().all(|n| {
                n.links.values().all(|l| l.current_slot.is_some())
                    && n.links_cannot_improve(&self.registry)
            })
        {
            self.trace.part1_slot = Some(now);
            self.trace.part1_resv = self.trace.resv_total;
            self.trace.part1_grt = self.trace.grt_total;
        }

        let quiescent = if self.cfg.part2 {
            self.nodes.iter().all(|n| n.quiescent(&self.registry))
        } else {
            self.trace.part1_slot.is_some()
                && self.nodes.iter().all(|n| n.outbox.is_empty())
        };
        if quiescent && !self.converged {
            self.converged = true;
            self.trace.convergence_slot = Some(now);
            let periods: BTreeSet<u32> =
                self.nodes.iter().map(|n| n.period.current_period).collect();
            if periods.len() != 1 && std::env::var("DBG_SPLIT").is_ok() {
                for n in &self.nodes {
                    eprintln!(
                        "node {:?} period={} anchor={} pending={:?} props={:?}",
                        n.id,
                        n.period.current_period,
                        n.period.anchor,
                        n.period.pending,
                        n.proposals.keys().collect::<Vec<_>>()
                    );
                }
            }
            assert_eq!(periods.len(), 1, "nodes converged on different periods");
            let p = *periods.iter().next().unwrap();
            let anchors: BTreeSet<u64> =
                self.nodes.iter().map(|n| n.period.anchor % p as u64).collect();
            assert_eq!(anchors.len(), 1, "nodes converged out of phase");
            self.trace.final_period = p;
            self.trace.final_superframe = Some(self.registry.to_superframe(p));
        }
        self.now += 1;
        Ok(self.converged)
    }

    fn dispatch(&mut self, msg: Message, now: u64) -> Vec<Effect> {
        let dst = msg.dst.index();
        match msg.payload {
            Payload::Prop { root, period, attempt } => {
                let ctx = ProtocolCtx {
                    now,
                    registry: &self.registry,
                    timeout: self.timeout,
                    duplicate_mode: self.cfg.duplicate_mode,
                    part2: self.cfg.part2,
                };
                let fx = self.nodes[dst].on_prop_received(&ctx, msg.src, root, period, attempt);
                if std::env::var("DBG_FLOOD").is_ok() {
                    let rec = self.nodes[dst].proposals.get(&(root, period));
                    eprintln!(
                        "slot {now}: PROP {:?}->{:?} ({root:?},{period},a{attempt}) rec={:?}",
                        msg.src,
                        msg.dst,
                        rec.map(|r| (r.status, r.awaited.len(), r.attempt))
                    );
                }
                fx
            }
            Payload::Aprv { root, period, attempt } => {
                if std::env::var("DBG_FLOOD").is_ok() {
                    eprintln!("slot {now}: APRV {:?}->{:?} ({root:?},{period},a{attempt})", msg.src, msg.dst);
                }
                self.nodes[dst].on_aprv_received(msg.src, root, period, attempt, &self.registry)
            }
            Payload::Update { root, period, timestamp, start_slot } => {
                if std::env::var("DBG_NODE").is_ok_and(|v| {
                    let n: usize = v.parse().unwrap();
                    msg.src.index() == n || dst == n
                }) {
                    eprintln!(
                        "slot {now}: UPDATE {:?}->{:?} root={root:?} P'={period} ts={timestamp} tau={start_slot} (dst pending={:?} cur={})",
                        msg.src, msg.dst, self.nodes[dst].period.pending.as_ref().map(|p| p.key()),
                        self.nodes[dst].period.current_period
                    );
                }
                self.nodes[dst]
                    .on_update_received(msg.src, root, period, timestamp, start_slot, false, now)
            }
            Payload::Exp { root, period, timestamp, start_slot } => self.nodes[dst]
                .on_update_received(msg.src, root, period, timestamp, start_slot, true, now),
            Payload::Resv { .. } | Payload::Grt { .. } | Payload::Ack { .. } | Payload::Join { .. } => {
                Vec::new()
            }
        }
    }

    fn apply_effect(&mut self, effect: Effect, now: u64, row: &mut SlotRecord) {
        match effect {
            Effect::MiniPhaseAck { src, dst, root, period, timestamp } => {
                Self::count_kind(row, MessageKind::Ack, 1);
                if self.cfg.collect_message_log {
                    let m = Message {
                        src,
                        dst,
                        payload: Payload::Ack { root, period, timestamp },
                    };
                    self.log_message(now, &m);
                }
                self.nodes[dst.index()].on_ack_received(src, root, period, timestamp);
            }
            Effect::Stage1Complete { root, period } => {
                self.nodes[root.index()].start_stage2(now, period);
            }
        }
    }

    /// Run until all nodes are quiescent or the slot budget runs out.
    pub fn run_to_convergence(&mut self) -> Result<(), SimError> {
        while !self.converged {
            if self.now > self.max_slots {
                if std::env::var("DBG_STUCK").is_ok() {
                    for n in &self.nodes {
                        if n.quiescent(&self.registry) {
                            continue;
                        }
                        let p = n.period.current_period;
                        let lat: Vec<_> = n
                            .links
                            .values()
                            .filter(|l| {
                                l.lateral_budget > 0
                                    && self.registry.feasible_slots(l.link, p).len() > 1
                            })
                            .map(|l| (l.link, l.lateral_budget))
                            .collect();
                        let recs: Vec<_> = n
                            .proposals
                            .values()
                            .map(|r| {
                                (r.root, r.period, r.attempt, r.status, r.awaited.len(), r.expiry)
                            })
                            .collect();
                        eprintln!(
                            "node {:?}: period={} lateral_open={:?} cannot_improve={} outbox={} pending={} wants_prop={} recs={:?}",
                            n.id,
                            p,
                            lat,
                            n.links_cannot_improve(&self.registry),
                            n.outbox.len(),
                            n.period.pending.is_some(),
                            n.wants_to_propose(&self.registry),
                            recs,
                        );
                    }
                }
                return Err(SimError::MaxSlotsExceeded(self.max_slots));
            }
            self.step()?;
        }
        Ok(())
    }

    /// Attach a new node to a converged network. The lowest-id sponsor hands
    /// over the schedule: every incoming link is piggybacked onto one of the
    /// neighbor's existing transmit slots; outgoing links run the normal
    /// reservation process. If some outgoing link has no feasible slot the
    /// sponsor floods a one-slot superframe expansion. Improvement
    /// reactivates network-wide.
    pub fn join_node(&mut self, attach: &[NodeId]) -> Result<NodeId, SimError> {
        if attach.is_empty() || !self.converged {
            return Err(SimError::InvalidJoin);
        }
        let new_id = NodeId(self.nodes.len() as u32);
        let attach: BTreeSet<NodeId> = attach.iter().copied().collect();
        let sponsor = *attach.iter().next().unwrap();
        let sponsor_period = self.nodes[sponsor.index()].period.clone();

        let mut new_node = NodeState::new(
            new_id,
            attach.clone(),
            sponsor_period.current_period,
            true,
            node_rng(self.cfg.seed, new_id),
        );
        new_node.period.current_period = sponsor_period.current_period;
        new_node.period.anchor = sponsor_period.anchor;
        self.adjacency.push(attach.clone());
        for &w in &attach {
            self.adjacency[w.index()].insert(new_id);
            self.nodes[w.index()].neighbors.insert(new_id);
            self.nodes[w.index()].is_local_max = false;
            // Schedule transfer: w multi-transmits to the newcomer in one of
            // its already-reserved slots; the incoming link is live at once.
            let tslots = self.registry.tslot(w);
            let pick = if tslots.is_empty() {
                None
            } else {
                use rand::Rng;
                let k = new_node.rng.gen_range(0..tslots.len());
                tslots.iter().copied().nth(k)
            };
            self.nodes[w.index()].links.insert(
                new_id,
                crate::protocol::LinkReservationState {
                    link: (w, new_id),
                    phase: crate::protocol::ResvPhase::Start,
                    current_slot: pick,
                    retries_remaining: 0,
                    backoff_until: 0,
                    lateral_budget: crate::protocol::LATERAL_BUDGET,
                    lateral_attempt: false,
                    stuck_streak: 0,
                    best_slot: pick.unwrap_or(u32::MAX),
                    planned_target: None,
                },
            );
            if let Some(s) = pick {
                self.registry.reserve((w, new_id), s);
                self.last_registry_change = self.now;
            }
        }
        self.nodes.push(new_node);

        // Outgoing feasibility check; an empty set triggers expansion.
        let period = sponsor_period.current_period;
        let needs_expansion = attach
            .iter()
            .any(|&w| self.registry.feasible_slots((new_id, w), period).is_empty());
        if needs_expansion {
            if self.cfg.collect_message_log {
                let m = Message {
                    src: new_id,
                    dst: sponsor,
                    payload: Payload::Join { new_period: period + 1, tau0: self.now },
                };
                self.log_message(self.now, &m);
            }
            self.nodes[sponsor.index()].start_expansion(self.now, period + 1);
        }
        for i in 0..self.nodes.len() {
            let node = &mut self.nodes[i];
            node.reactivate_links(&self.registry);
        }
        // Local maxima may have shifted; recompute from adjacency.
        for i in 0..self.nodes.len() {
            let id = self.nodes[i].id;
            self.nodes[i].is_local_max = self.adjacency[i].iter().all(|&w| w < id);
        }
        self.converged = false;
        self.trace.convergence_slot = None;
        self.trace.final_superframe = None;
        Ok(new_id)
    }

    pub fn metrics(&self) -> Option<Metrics> {
        let conv = self.trace.convergence_slot?;
        let sf = self.trace.final_superframe.as_ref()?;
        let p_f = self.trace.final_period;
        let links = self.trace.resv_per_link.len().max(1);
        Some(Metrics {
            initial_period: self.trace.initial_period,
            final_period: p_f,
            convergence_slots: conv,
            resv_count: self.trace.resv_total,
            grt_count: self.trace.grt_total,
            avg_links_per_slot: sf.total_activations() as f64 / p_f as f64,
            resv_per_link_mean: self.trace.resv_total as f64 / links as f64,
            part1_convergence_slots: self.trace.part1_slot.unwrap_or(conv),
            part1_resv_per_link_mean: self.trace.part1_resv as f64 / links as f64,
            part1_grt_count: self.trace.part1_grt,
        })
    }
}
