//! Per-node protocol state machines.
//!
//! Each mesh node is an event-driven automaton with three cooperating parts:
//! slot reservation (RESV/GRT with probabilistic improvement retries), period
//! proposal (PROP/APRV flooding rooted at local-maximum-id nodes), and period
//! confirmation (UPDATE/ACK with a common start slot). Nodes interact only
//! through [`Message`] values; the engine owns delivery and collision
//! semantics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::schedule::{Registry, SlotIndex};
use crate::topology::{Link, NodeId};

/// Root retry attempts allowed per distinct proposed-period value.
pub const MAX_PROPOSAL_ATTEMPTS: u32 = 5;

/// Times a root may re-open a fully exhausted escalation ladder.
pub const MAX_ROOT_RESTARTS: u32 = 2;
/// UPDATE re-sends before a pending period switch is abandoned.
pub const MAX_UPDATE_RESENDS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum MessageKind {
    Resv,
    Grt,
    Prop,
    Aprv,
    Update,
    Ack,
    Join,
    Exp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Payload {
    Resv { link: Link, target_slot: SlotIndex },
    Grt { link: Link, granted_slot: SlotIndex },
    Prop { root: NodeId, period: u32, attempt: u32 },
    Aprv { root: NodeId, period: u32, attempt: u32 },
    Update { root: NodeId, period: u32, timestamp: u64, start_slot: u64 },
    Ack { root: NodeId, period: u32, timestamp: u64 },
    Join { new_period: u32, tau0: u64 },
    Exp { root: NodeId, period: u32, timestamp: u64, start_slot: u64 },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Resv { .. } => MessageKind::Resv,
            Payload::Grt { .. } => MessageKind::Grt,
            Payload::Prop { .. } => MessageKind::Prop,
            Payload::Aprv { .. } => MessageKind::Aprv,
            Payload::Update { .. } => MessageKind::Update,
            Payload::Ack { .. } => MessageKind::Ack,
            Payload::Join { .. } => MessageKind::Join,
            Payload::Exp { .. } => MessageKind::Exp,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("payload serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: Payload,
}

/// Slot reservation process for one outgoing link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResvPhase {
    Start,
    Terminate,
}

#[derive(Debug, Clone)]
pub struct LinkReservationState {
    pub link: Link,
    pub phase: ResvPhase,
    pub current_slot: Option<SlotIndex>,
    /// Collision-failure budget: sized so every earlier feasible slot could
    /// have been tried once; zero sends the link to Terminate.
    pub retries_remaining: u32,
    /// Terminate is a randomized backoff, not a grave: the link re-enters
    /// the race with a fresh budget once this slot passes and an earlier
    /// feasible slot still exists, so colliding link pairs desynchronize
    /// instead of stranding improvable slots.
    pub backoff_until: u64,
    /// Plateau-move budget: once no strictly earlier slot is feasible, the
    /// link may relocate sideways (any other feasible slot within the current
    /// period) this many times. Sideways moves shuffle neighbouring Tslot and
    /// Rslot sets, which is what opens earlier slots for links that a purely
    /// monotone search leaves stranded in the frame's tail.
    pub lateral_budget: u32,
    /// The RESV in flight is a plateau move, not an improvement; its failure
    /// must not burn the improvement retry budget.
    pub lateral_attempt: bool,
    /// Consecutive superframes without an improvement candidate; plateau
    /// moves wait until this exceeds [`LATERAL_PATIENCE`].
    pub stuck_streak: u32,
    /// Earliest slot this link has ever held under the current period; the
    /// plateau budget refreshes only on grants below it, so a link cannot
    /// pump its own budget by oscillating between two slots.
    pub best_slot: SlotIndex,
    /// RESV scheduled for this superframe; the message is transmitted in the
    /// target slot itself.
    pub planned_target: Option<SlotIndex>,
}

/// Plateau moves granted per link between strict improvements or period
/// commits; keeps post-fixpoint wandering bounded.
pub const LATERAL_BUDGET: u32 = 6;

/// Superframes a stuck link sits still before its first plateau move.
pub const LATERAL_PATIENCE: u32 = 3;

impl LinkReservationState {
    fn new(link: Link) -> Self {
        LinkReservationState {
            link,
            phase: ResvPhase::Start,
            current_slot: None,
            retries_remaining: 0,
            backoff_until: 0,
            lateral_budget: LATERAL_BUDGET,
            lateral_attempt: false,
            stuck_streak: 0,
            best_slot: SlotIndex::MAX,
            planned_target: None,
        }
    }

    pub fn terminated(&self) -> bool {
        self.phase == ResvPhase::Terminate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropStatus {
    Waiting,
    Approved,
    Discarded,
}

/// Per-(root, period) bookkeeping for one PROP flood.
#[derive(Debug, Clone)]
pub struct ProposalRecord {
    pub root: NodeId,
    pub period: u32,
    pub parents: BTreeSet<NodeId>,
    pub children: BTreeSet<NodeId>,
    pub awaited: BTreeSet<NodeId>,
    pub deadline: u64,
    /// Retry counter of the originating root for this period value. A PROP
    /// carrying a higher attempt supersedes the record: every retry is a
    /// fresh flood that re-validates every node's occupancy.
    pub attempt: u32,
    /// Slot after which the record is dropped entirely, so a later retry of
    /// the same (root, period) is evaluated fresh.
    pub expiry: u64,
    pub status: PropStatus,
}

/// In-flight period switch from a received (or self-rooted) UPDATE/EXP flood.
#[derive(Debug, Clone)]
pub struct PendingSwitch {
    pub root: NodeId,
    pub new_period: u32,
    pub timestamp: u64,
    pub start_slot: u64,
    pub parent: Option<NodeId>,
    pub children: BTreeSet<NodeId>,
    pub acked: BTreeSet<NodeId>,
    pub resend_count: u32,
    pub is_expansion: bool,
}

impl PendingSwitch {
    pub fn key(&self) -> (NodeId, u32, u64) {
        (self.root, self.new_period, self.timestamp)
    }
}

#[derive(Debug, Clone)]
pub struct PeriodState {
    pub current_period: u32,
    /// Absolute slot whose in-superframe index is 1.
    pub anchor: u64,
    pub initial_period: u32,
    pub pending: Option<PendingSwitch>,
    /// (timestamp, root) of the last committed flood; ties between same-period
    /// UPDATE floods are broken against this.
    pub committed_stamp: Option<(u64, NodeId)>,
}

impl PeriodState {
    pub fn slot_index(&self, now: u64) -> SlotIndex {
        debug_assert!(now >= self.anchor);
        ((now - self.anchor) % self.current_period as u64) as SlotIndex + 1
    }

    pub fn superframe_start(&self, now: u64) -> u64 {
        now - (now - self.anchor) % self.current_period as u64
    }
}

/// Root-side retry control for period proposals. The paper leaves timeout
/// handling open; we recompute the base from the schedule, escalate the
/// proposed value by one per consecutive timeout, and cap attempts per value.
#[derive(Debug, Clone, Default)]
pub struct RootRetry {
    pub consecutive_failures: u32,
    pub next_allowed_slot: u64,
    pub last_base: SlotIndex,
    pub attempts_per_value: BTreeMap<u32, u32>,
    /// Full escalation rounds re-opened after exhaustion. A rejected value
    /// may become approvable once the blocking node's plateau moves drift
    /// its tail slots downward, so exhaustion is retried a bounded number
    /// of times after a cooldown instead of being final.
    pub restarts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuplicatePropMode {
    /// Duplicate PROPs update parent/child bookkeeping and already-approved
    /// nodes answer late parents, so floods complete on cyclic topologies.
    Responsive,
    /// Literal behavior: duplicates are dropped without reply.
    Strict,
}

/// Immediate effects a handler hands back to the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    /// Reliable end-of-slot acknowledgment from `src` back to the sender.
    MiniPhaseAck { src: NodeId, dst: NodeId, root: NodeId, period: u32, timestamp: u64 },
    /// Root collected every APRV; stage 2 starts this slot.
    Stage1Complete { root: NodeId, period: u32 },
}

/// Outcome of the commit boundary check at the start of a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    None,
    Committed { root: NodeId, new_period: u32, timestamp: u64 },
    Recalculated,
    Abandoned,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub neighbors: BTreeSet<NodeId>,
    pub links: BTreeMap<NodeId, LinkReservationState>,
    pub proposals: BTreeMap<(NodeId, u32), ProposalRecord>,
    pub period: PeriodState,
    pub outbox: Vec<(NodeId, Payload)>,
    pub root_retry: RootRetry,
    /// Monotone flood sequence number for this node's own proposals; never
    /// reset, so every re-flood supersedes all records it left behind.
    pub proposal_seq: u32,
    pub is_local_max: bool,
    /// Plateau moves stay disabled until the first period commit: during the
    /// initial compaction they only add churn, while after a commit they are
    /// what shakes the schedule out of strictly-stuck local optima.
    pub laterals_armed: bool,
    pub rng: ChaCha8Rng,
}

pub struct ProtocolCtx<'a> {
    pub now: u64,
    pub registry: &'a Registry,
    pub timeout: u64,
    pub duplicate_mode: DuplicatePropMode,
    /// Whether period-shrink proposals may be issued this run.
    pub part2: bool,
}

/// What the node wants transmitted or flagged for the current superframe.
#[derive(Debug, Default)]
pub struct PlanOutcome {
    /// Links whose feasible set was empty at planning time (first
    /// reservation could not pick a slot); the engine escalates persistent
    /// starvation to an insufficient-period error.
    pub starved_links: Vec<Link>,
    /// A PROP was issued this superframe with this proposed period.
    pub proposed: Option<u32>,
    /// Links that left Terminate with a fresh retry budget.
    pub reactivated: Vec<(Link, u32)>,
}

impl NodeState {
    pub fn new(
        id: NodeId,
        neighbors: BTreeSet<NodeId>,
        initial_period: u32,
        is_local_max: bool,
        rng: ChaCha8Rng,
    ) -> Self {
        let links = neighbors.iter().map(|&w| (w, LinkReservationState::new((id, w)))).collect();
        NodeState {
            id,
            neighbors,
            links,
            proposals: BTreeMap::new(),
            period: PeriodState {
                current_period: initial_period,
                anchor: 1,
                initial_period,
                pending: None,
                committed_stamp: None,
            },
            outbox: Vec::new(),
            root_retry: RootRetry::default(),
            proposal_seq: 0,
            is_local_max,
            laterals_armed: false,
            rng,
        }
    }

    pub fn all_links_terminated(&self) -> bool {
        self.links.values().all(|l| l.terminated())
    }

    /// Definition of local convergence: every link holds a slot and none of
    /// them could move to an earlier feasible slot right now.
    pub fn links_cannot_improve(&self, registry: &Registry) -> bool {
        let period = self.period.current_period;
        self.links.values().all(|l| match l.current_slot {
            None => false,
            Some(current) => {
                registry.feasible_slots(l.link, period).iter().all(|&s| s >= current)
            }
        })
    }

    pub fn all_links_reserved(&self) -> bool {
        self.links.values().all(|l| l.current_slot.is_some())
    }

    fn closed_neighborhood_last_occupied(&self, registry: &Registry) -> SlotIndex {
        registry.last_occupied_slot(self.id, &self.neighbors, self.period.current_period)
    }

    // ------------------------------------------------------------------
    // Part 1: slot reservation planning
    // ------------------------------------------------------------------

    /// Highest slot this node may still move a link into: the current period,
    /// clamped by any shorter period it has already approved or is waiting to
    /// commit. Approving a proposal promises the slots above it stay idle.
    pub fn slot_ceiling(&self) -> SlotIndex {
        let mut ceiling = self.period.current_period;
        for rec in self.proposals.values() {
            if rec.status != PropStatus::Discarded {
                ceiling = ceiling.min(rec.period);
            }
        }
        if let Some(p) = &self.period.pending {
            ceiling = ceiling.min(p.new_period);
        }
        ceiling
    }

    /// Superframe-start planning: decide, per outgoing link, whether to send
    /// a RESV this superframe and for which slot. First reservations always
    /// try (a random feasible slot); improvements fire with probability
    /// `rho = i/P` and target a random untried earlier feasible slot.
    pub fn plan_superframe(&mut self, ctx: &ProtocolCtx) -> PlanOutcome {
        let mut outcome = PlanOutcome::default();
        let period = self.period.current_period;
        let dsts: Vec<NodeId> = self.links.keys().copied().collect();
        for dst in dsts {
            let link = (self.id, dst);
            let feasible = ctx.registry.feasible_slots(link, period);
            let state = self.links.get_mut(&dst).unwrap();
            match state.current_slot {
                None => {
                    if feasible.is_empty() {
                        outcome.starved_links.push(link);
                        continue;
                    }
                    // Same batching preference as improvement below.
                    let ceiling = self.slot_ceiling();
                    let state = self.links.get_mut(&dst).unwrap();
                    let own_tx = ctx.registry.tslot(self.id);
                    let peer_rx = ctx.registry.rslot(link.1);
                    let below: Vec<SlotIndex> =
                        feasible.iter().copied().filter(|&s| s <= ceiling).collect();
                    let both: Vec<SlotIndex> = below
                        .iter()
                        .copied()
                        .filter(|s| own_tx.contains(s) && peer_rx.contains(s))
                        .collect();
                    let either: Vec<SlotIndex> = below
                        .iter()
                        .copied()
                        .filter(|s| own_tx.contains(s) || peer_rx.contains(s))
                        .collect();
                    let all: Vec<SlotIndex> =
                        if below.is_empty() { feasible.iter().copied().collect() } else { below };
                    let pool = if !both.is_empty() {
                        &both
                    } else if !either.is_empty() {
                        &either
                    } else {
                        &all
                    };
                    let pick = self.rng.gen_range(0..pool.len());
                    state.planned_target = Some(pool[pick]);
                }
                Some(current) => {
                    let candidates: Vec<SlotIndex> =
                        feasible.iter().copied().filter(|&s| s < current).collect();
                    if candidates.is_empty() {
                        // Strictly stuck. Spend plateau budget relocating to
                        // some other feasible slot; the move is lateral for
                        // this link but may free an earlier slot for others.
                        // A few quiet superframes are required first, so the
                        // compaction race settles before wandering starts.
                        state.planned_target = None;
                        state.lateral_attempt = false;
                        state.stuck_streak += 1;
                        let ceiling = self.slot_ceiling();
                        let state = self.links.get_mut(&dst).unwrap();
                        let lateral: Vec<SlotIndex> = feasible
                            .iter()
                            .copied()
                            .filter(|&s| s != current && s <= ceiling)
                            .collect();
                        if self.laterals_armed
                            && state.stuck_streak > LATERAL_PATIENCE
                            && state.lateral_budget > 0
                            && !lateral.is_empty()
                        {
                            state.lateral_budget -= 1;
                            if self.rng.gen_bool(0.5) {
                                let pick = self.rng.gen_range(0..lateral.len());
                                state.planned_target = Some(lateral[pick]);
                                state.lateral_attempt = true;
                            }
                        }
                        continue;
                    }
                    if state.terminated() || state.retries_remaining == 0 {
                        // Either backing off after exhausting the budget, or
                        // granted with no earlier feasible slot and new ones
                        // appeared since: both re-enter with a fresh budget.
                        if state.terminated() && ctx.now < state.backoff_until {
                            continue;
                        }
                        state.phase = ResvPhase::Start;
                        state.retries_remaining = candidates.len() as u32;
                        outcome.reactivated.push((link, state.retries_remaining));
                    }
                    state.stuck_streak = 0;
                    let rho = current as f64 / period as f64;
                    if self.rng.gen_bool(rho.min(1.0)) {
                        // Batching preference: a slot where this node already
                        // transmits (or the peer already receives) keeps slot
                        // sets small and leaves room for other links to move.
                        let own_tx = ctx.registry.tslot(self.id);
                        let peer_rx = ctx.registry.rslot(link.1);
                        let both: Vec<SlotIndex> = candidates
                            .iter()
                            .copied()
                            .filter(|s| own_tx.contains(s) && peer_rx.contains(s))
                            .collect();
                        let either: Vec<SlotIndex> = candidates
                            .iter()
                            .copied()
                            .filter(|s| own_tx.contains(s) || peer_rx.contains(s))
                            .collect();
                        let pool = if !both.is_empty() {
                            &both
                        } else if !either.is_empty() {
                            &either
                        } else {
                            &candidates
                        };
                        let pick = self.rng.gen_range(0..pool.len());
                        state.planned_target = Some(pool[pick]);
                    }
                }
            }
        }
        outcome.proposed = if ctx.part2 { self.maybe_propose(ctx) } else { None };
        outcome
    }

    /// RESV messages to transmit in slot `index` of the current superframe.
    pub fn resv_to_send(&self, index: SlotIndex) -> Vec<Message> {
        self.links
            .values()
            .filter(|l| l.planned_target == Some(index))
            .map(|l| Message {
                src: self.id,
                dst: l.link.1,
                payload: Payload::Resv { link: l.link, target_slot: index },
            })
            .collect()
    }

    /// Sender-side success: the GRT arrived. The retry budget resets to the
    /// number of feasible slots strictly earlier than the new slot.
    pub fn on_grt_received(&mut self, dst: NodeId, granted: SlotIndex, budget: u32) {
        let state = self.links.get_mut(&dst).expect("link exists");
        if granted < state.best_slot {
            state.lateral_budget = LATERAL_BUDGET;
            state.best_slot = granted;
        }
        state.stuck_streak = 0;
        state.current_slot = Some(granted);
        state.retries_remaining = budget;
        state.phase = ResvPhase::Start;
        state.lateral_attempt = false;
        state.planned_target = None;
    }

    /// Sender-side failure: no GRT for the attempted slot. First reservations
    /// simply retry next superframe; improvements burn one unit of retry
    /// budget and give up on the link once it is exhausted.
    pub fn on_grt_missing(&mut self, dst: NodeId, now: u64) {
        let period = self.period.current_period as u64;
        let state = self.links.get_mut(&dst).expect("link exists");
        state.planned_target = None;
        if state.current_slot.is_none() {
            return;
        }
        if state.lateral_attempt {
            state.lateral_attempt = false;
            return;
        }
        state.retries_remaining = state.retries_remaining.saturating_sub(1);
        if state.retries_remaining == 0 {
            state.phase = ResvPhase::Terminate;
            // Randomized so two links that keep colliding with each other
            // come back desynchronized.
            state.backoff_until = now + (2 + self.rng.gen_range(0..4u64)) * period;
        }
    }

    // ------------------------------------------------------------------
    // Part 2 stage 1: proposal
    // ------------------------------------------------------------------

    /// Highest-id nodes whose links are all terminated propose a shorter
    /// period when the closed neighborhood's last occupied slot is below the
    /// current period. Consecutive timeouts escalate the proposed value by
    /// one: the root cannot tell which remote slot blocked a rejected value,
    /// but some occupied slot at or above it did.
    fn maybe_propose(&mut self, ctx: &ProtocolCtx) -> Option<u32> {
        let candidate = self.proposal_candidate(ctx.registry, ctx.now, ctx.timeout)?;
        if ctx.now < self.root_retry.next_allowed_slot {
            return None;
        }
        *self.root_retry.attempts_per_value.entry(candidate).or_insert(0) += 1;
        self.proposal_seq += 1;
        let attempt = self.proposal_seq;
        let key = (self.id, candidate);
        self.proposals.insert(
            key,
            ProposalRecord {
                root: self.id,
                period: candidate,
                parents: BTreeSet::new(),
                children: self.neighbors.clone(),
                awaited: self.neighbors.clone(),
                attempt,
                deadline: ctx.now + ctx.timeout,
                expiry: ctx.now + 2 * ctx.timeout,
                status: PropStatus::Waiting,
            },
        );
        for &w in &self.neighbors {
            self.outbox.push((w, Payload::Prop { root: self.id, period: candidate, attempt }));
        }
        Some(candidate)
    }

    /// The period this node would propose right now, or None. Shared between
    /// planning and the engine's convergence detector.
    pub fn proposal_candidate(&mut self, registry: &Registry, now: u64, timeout: u64) -> Option<u32> {
        if !self.is_local_max
            || self.links.is_empty()
            || !self.links_cannot_improve(registry)
            || self.period.pending.is_some()
        {
            return None;
        }
        if self.proposals.values().any(|r| r.root == self.id && r.status == PropStatus::Waiting) {
            return None;
        }
        let base = self.closed_neighborhood_last_occupied(registry);
        if base == 0 {
            return None;
        }
        if base != self.root_retry.last_base {
            // Schedule changed since the last attempt; restart escalation.
            self.root_retry.last_base = base;
            self.root_retry.consecutive_failures = 0;
            self.root_retry.attempts_per_value.clear();
        }
        // Each value gets two tries before escalating: a rejection may have
        // been transient (a neighbor's link still improving past the value)
        // rather than a genuinely occupied higher slot.
        let candidate = base + self.root_retry.consecutive_failures / 2;
        let exhausted = candidate >= self.period.current_period
            || self.root_retry.attempts_per_value.get(&candidate).copied().unwrap_or(0)
                >= MAX_PROPOSAL_ATTEMPTS;
        if exhausted {
            if base < self.period.current_period
                && self.root_retry.restarts < MAX_ROOT_RESTARTS
            {
                self.root_retry.restarts += 1;
                self.root_retry.consecutive_failures = 0;
                self.root_retry.attempts_per_value.clear();
                self.root_retry.next_allowed_slot = now + 2 * timeout;
            }
            return None;
        }
        Some(candidate)
    }

    /// Non-mutating variant for convergence detection.
    pub fn wants_to_propose(&self, registry: &Registry) -> bool {
        if !self.is_local_max
            || self.links.is_empty()
            || !self.links_cannot_improve(registry)
            || self.period.pending.is_some()
        {
            return false;
        }
        if self.proposals.values().any(|r| r.root == self.id && r.status == PropStatus::Waiting) {
            return false;
        }
        let base = self.closed_neighborhood_last_occupied(registry);
        if base == 0 {
            return false;
        }
        let failures =
            if base != self.root_retry.last_base { 0 } else { self.root_retry.consecutive_failures };
        let candidate = base + failures / 2;
        if candidate >= self.period.current_period {
            // Escalated past the period: done unless a restart round remains.
            return base < self.period.current_period
                && self.root_retry.restarts < MAX_ROOT_RESTARTS;
        }
        let attempts = if base != self.root_retry.last_base {
            0
        } else {
            self.root_retry.attempts_per_value.get(&candidate).copied().unwrap_or(0)
        };
        attempts < MAX_PROPOSAL_ATTEMPTS || self.root_retry.restarts < MAX_ROOT_RESTARTS
    }

    pub fn on_prop_received(
        &mut self,
        ctx: &ProtocolCtx,
        from: NodeId,
        root: NodeId,
        period: u32,
        attempt: u32,
    ) -> Vec<Effect> {
        let key = (root, period);
        if let Some(rec) = self.proposals.get_mut(&key) {
            if attempt < rec.attempt {
                return Vec::new();
            }
            if attempt > rec.attempt && rec.root != self.id {
                // A retry flood supersedes the stale record; fall through to
                // the fresh-PROP path so occupancy is validated anew.
                self.proposals.remove(&key);
            } else {
                if ctx.duplicate_mode == DuplicatePropMode::Strict {
                    return Vec::new();
                }
                if rec.root == self.id {
                    // Own proposal echoed back: the root trivially approves
                    // its own period so the echoing neighbor can complete,
                    // but keeps awaiting that neighbor's real APRV.
                    rec.parents.insert(from);
                    self.outbox.push((from, Payload::Aprv { root, period, attempt }));
                    return Vec::new();
                }
                rec.parents.insert(from);
                rec.children.remove(&from);
                rec.awaited.remove(&from);
                // Any queued forward to the sender still goes out: the peer
                // needs it to stop awaiting this node in turn. Cancelling it
                // leaves the cross edge half-resolved, and a ring of such
                // edges is a deadlocked approval cycle.
                match rec.status {
                    PropStatus::Approved => {
                        // Re-affirming an old approval extends the promise
                        // that slots above `period` stay idle, so the
                        // admission check runs again and the record's
                        // lifetime restarts: the ceiling must outlive
                        // whichever retry finally commits.
                        rec.expiry = ctx.now + 2 * ctx.timeout;
                        if self.all_links_reserved()
                            && self.closed_neighborhood_last_occupied(ctx.registry) <= period
                        {
                            self.outbox.push((from, Payload::Aprv { root, period, attempt }));
                        } else {
                            self.laterals_armed |= self.links_cannot_improve(ctx.registry);
                            self.proposals.get_mut(&key).unwrap().status =
                                PropStatus::Discarded;
                        }
                    }
                    PropStatus::Waiting if rec.awaited.is_empty() => {
                        return self.approve_record(key, ctx.registry);
                    }
                    _ => {}
                }
                return Vec::new();
            }
        }
        // Fresh PROP: validate the proposed period against local occupancy.
        // Approval additionally requires every outgoing link to hold a slot;
        // otherwise a late first reservation could land above the new period
        // after the flood was approved. Rejections are silent and leave no
        // record, so a later retry of the same value is evaluated against
        // the (possibly more compact) schedule of that moment.
        let local_max_occupied = self.closed_neighborhood_last_occupied(ctx.registry);
        let valid = self.all_links_reserved() && local_max_occupied <= period;
        if !valid {
            if local_max_occupied > period && self.links_cannot_improve(ctx.registry) {
                // This node's own tail occupancy blocks a network-wide
                // shrink attempt and no strict improvement is left; start
                // plateau moves so the blocking slots get a chance to drift
                // downward before the root retries. While improvements are
                // still running they will clear the tail by themselves.
                self.laterals_armed = true;
            }
            return Vec::new();
        }
        let children: BTreeSet<NodeId> = self.neighbors.iter().copied().filter(|&w| w != from).collect();
        if children.is_empty() {
            self.proposals.insert(
                key,
                ProposalRecord {
                    root,
                    period,
                    parents: BTreeSet::from([from]),
                    children,
                    awaited: BTreeSet::new(),
                    attempt,
                    deadline: ctx.now,
                    expiry: ctx.now + 2 * ctx.timeout,
                    status: PropStatus::Approved,
                },
            );
            self.outbox.push((from, Payload::Aprv { root, period, attempt }));
            return Vec::new();
        }
        for &w in &children {
            self.outbox.push((w, Payload::Prop { root, period, attempt }));
        }
        self.proposals.insert(
            key,
            ProposalRecord {
                root,
                period,
                parents: BTreeSet::from([from]),
                children: children.clone(),
                awaited: children,
                attempt,
                deadline: ctx.now + ctx.timeout,
                expiry: ctx.now + 2 * ctx.timeout,
                status: PropStatus::Waiting,
            },
        );
        Vec::new()
    }

    fn approve_record(&mut self, key: (NodeId, u32), registry: &Registry) -> Vec<Effect> {
        // Occupancy may have grown since the PROP was validated (a link can
        // have moved into a high slot while this record waited on children),
        // so the admission check is repeated at the moment of approval.
        let period = key.1;
        if !self.all_links_reserved()
            || self.closed_neighborhood_last_occupied(registry) > period
        {
            self.laterals_armed |= self.links_cannot_improve(registry);
            self.proposals.get_mut(&key).expect("record exists").status =
                PropStatus::Discarded;
            return Vec::new();
        }
        let rec = self.proposals.get_mut(&key).expect("record exists");
        rec.status = PropStatus::Approved;
        let period = rec.period;
        // Approval promises the slots above `period` stay idle; cancel any
        // planned move that would break that promise.
        for state in self.links.values_mut() {
            if state.planned_target.is_some_and(|t| t > period) {
                state.planned_target = None;
                state.lateral_attempt = false;
            }
        }
        let rec = self.proposals.get_mut(&key).expect("record exists");
        if rec.root == self.id {
            return vec![Effect::Stage1Complete { root: rec.root, period: rec.period }];
        }
        let parents = rec.parents.clone();
        let (root, period, attempt) = (rec.root, rec.period, rec.attempt);
        for p in parents {
            self.outbox.push((p, Payload::Aprv { root, period, attempt }));
        }
        Vec::new()
    }

    pub fn on_aprv_received(
        &mut self,
        from: NodeId,
        root: NodeId,
        period: u32,
        attempt: u32,
        registry: &Registry,
    ) -> Vec<Effect> {
        let key = (root, period);
        let Some(rec) = self.proposals.get_mut(&key) else {
            return Vec::new();
        };
        if rec.status != PropStatus::Waiting || rec.attempt != attempt {
            return Vec::new();
        }
        rec.awaited.remove(&from);
        if rec.awaited.is_empty() {
            return self.approve_record(key, registry);
        }
        Vec::new()
    }

    /// Time out waiting records and drop dead ones. Discarded records vanish
    /// immediately so a retried flood with the same (root, period) key is
    /// re-evaluated; approved ones stick around until expiry to answer late
    /// duplicate PROPs.
    pub fn sweep_proposals(&mut self, now: u64, own_period: &mut Option<u32>) {
        let mut timed_out_own = None;
        for (key, rec) in self.proposals.iter_mut() {
            if rec.status == PropStatus::Waiting && now >= rec.deadline {
                rec.status = PropStatus::Discarded;
                if rec.root == self.id {
                    timed_out_own = Some(key.1);
                }
            }
        }
        self.proposals.retain(|_, rec| rec.status != PropStatus::Discarded && now < rec.expiry);
        if let Some(period) = timed_out_own {
            self.root_retry.consecutive_failures += 1;
            self.root_retry.next_allowed_slot = now + self.timeout_backoff();
            *own_period = Some(period);
        }
    }

    /// Pause between proposal attempts; long enough for the previous flood's
    /// deepest records to have timed out.
    fn timeout_backoff(&self) -> u64 {
        self.period.current_period as u64
    }

    // ------------------------------------------------------------------
    // Part 2 stage 2: confirmation
    // ------------------------------------------------------------------

    /// Root side: every APRV collected, send UPDATE to all neighbors with a
    /// start slot at the opening of the superframe after next.
    pub fn start_stage2(&mut self, now: u64, new_period: u32) {
        // A competing flood adopted during stage 1 owns the pending slot;
        // overwriting it here would desynchronize this node from the commit
        // it already acknowledged. The approved proposal simply lapses.
        if self.period.pending.is_some() {
            return;
        }
        let tau = self.period.superframe_start(now) + 2 * self.period.current_period as u64;
        let pending = PendingSwitch {
            root: self.id,
            new_period,
            timestamp: now,
            start_slot: tau,
            parent: None,
            children: self.neighbors.clone(),
            acked: BTreeSet::new(),
            resend_count: 0,
            is_expansion: false,
        };
        for &w in &self.neighbors {
            self.outbox.push((
                w,
                Payload::Update { root: self.id, period: new_period, timestamp: now, start_slot: tau },
            ));
        }
        self.period.pending = Some(pending);
    }

    /// Root side for superframe expansion after a JOIN request; propagated
    /// like an UPDATE but without period validation at receivers.
    pub fn start_expansion(&mut self, now: u64, new_period: u32) {
        let tau = self.period.superframe_start(now) + 2 * self.period.current_period as u64;
        let pending = PendingSwitch {
            root: self.id,
            new_period,
            timestamp: now,
            start_slot: tau,
            parent: None,
            children: self.neighbors.clone(),
            acked: BTreeSet::new(),
            resend_count: 0,
            is_expansion: true,
        };
        for &w in &self.neighbors {
            self.outbox.push((
                w,
                Payload::Exp { root: self.id, period: new_period, timestamp: now, start_slot: tau },
            ));
        }
        self.period.pending = Some(pending);
    }

    fn adopt_update(
        &mut self,
        from: NodeId,
        root: NodeId,
        period: u32,
        timestamp: u64,
        parent_tau: u64,
        is_expansion: bool,
        now: u64,
    ) -> Vec<Effect> {
        // Requirement 1: the switch happens in the superframe after next.
        // Requirement 2: congruent with the parent's start slot mod P'.
        let earliest = self.period.superframe_start(now) + 2 * self.period.current_period as u64;
        let tau = if parent_tau >= earliest {
            parent_tau
        } else {
            let gap = earliest - parent_tau;
            parent_tau + gap.div_ceil(period as u64) * period as u64
        };
        let children: BTreeSet<NodeId> =
            self.neighbors.iter().copied().filter(|&w| w != from).collect();
        for &w in &children {
            let payload = if is_expansion {
                Payload::Exp { root, period, timestamp, start_slot: tau }
            } else {
                Payload::Update { root, period, timestamp, start_slot: tau }
            };
            self.outbox.push((w, payload));
        }
        self.period.pending = Some(PendingSwitch {
            root,
            new_period: period,
            timestamp,
            start_slot: tau,
            parent: Some(from),
            children,
            acked: BTreeSet::new(),
            resend_count: 0,
            is_expansion,
        });
        for state in self.links.values_mut() {
            if state.planned_target.is_some_and(|t| t > period) {
                state.planned_target = None;
                state.lateral_attempt = false;
            }
        }
        vec![Effect::MiniPhaseAck { src: self.id, dst: from, root, period, timestamp }]
    }

    /// Priority order between competing floods: smaller period, then older
    /// timestamp, then higher root id.
    fn flood_beats(a: (u32, u64, NodeId), b: (u32, u64, NodeId)) -> bool {
        (a.0, a.1, std::cmp::Reverse(a.2)) < (b.0, b.1, std::cmp::Reverse(b.2))
    }

    pub fn on_update_received(
        &mut self,
        from: NodeId,
        root: NodeId,
        period: u32,
        timestamp: u64,
        parent_tau: u64,
        is_expansion: bool,
        now: u64,
    ) -> Vec<Effect> {
        if let Some(pending) = &self.period.pending {
            if pending.key() == (root, period, timestamp) {
                // Another parent carries the same flood; acknowledge it.
                return vec![Effect::MiniPhaseAck { src: self.id, dst: from, root, period, timestamp }];
            }
            let incoming = (period, timestamp, root);
            let current = (pending.new_period, pending.timestamp, pending.root);
            if Self::flood_beats(incoming, current) {
                return self.adopt_update(from, root, period, timestamp, parent_tau, is_expansion, now);
            }
            return Vec::new();
        }
        if self.period.committed_stamp == Some((timestamp, root))
            && self.period.current_period == period
        {
            // Already committed this very flood; a parent is re-sending.
            return vec![Effect::MiniPhaseAck { src: self.id, dst: from, root, period, timestamp }];
        }
        if is_expansion {
            return self.adopt_update(from, root, period, timestamp, parent_tau, true, now);
        }
        let current_period = self.period.current_period;
        if period < current_period {
            return self.adopt_update(from, root, period, timestamp, parent_tau, false, now);
        }
        if period == current_period {
            // Same length, different phase: adopt the older flood, break
            // timestamp ties toward the higher root id.
            let adopt = match self.period.committed_stamp {
                Some((t0, r0)) => timestamp < t0 || (timestamp == t0 && root > r0),
                None => false,
            };
            if adopt {
                return self.adopt_update(from, root, period, timestamp, parent_tau, false, now);
            }
        }
        Vec::new()
    }

    pub fn on_ack_received(&mut self, from: NodeId, root: NodeId, period: u32, timestamp: u64) {
        if let Some(pending) = &mut self.period.pending {
            if pending.key() == (root, period, timestamp) {
                pending.acked.insert(from);
            }
        }
    }

    /// Start-of-slot commit check. At the pending start slot the node either
    /// switches period (all children acknowledged) or recalculates the start
    /// slot, preserving its congruence class, and re-sends UPDATEs.
    pub fn process_commit_boundary(&mut self, now: u64) -> CommitOutcome {
        let Some(pending) = &self.period.pending else {
            return CommitOutcome::None;
        };
        if now != pending.start_slot {
            return CommitOutcome::None;
        }
        let pending = self.period.pending.take().unwrap();
        if pending.children.iter().all(|w| pending.acked.contains(w)) {
            self.period.current_period = pending.new_period;
            self.period.anchor = now;
            self.period.committed_stamp = Some((pending.timestamp, pending.root));
            self.root_retry = RootRetry::default();
            // Any in-flight reservation plan indexed against the old frame is
            // void; unreserved links re-plan at the next superframe start.
            for link in self.links.values_mut() {
                link.planned_target = None;
            }
            return CommitOutcome::Committed {
                root: pending.root,
                new_period: pending.new_period,
                timestamp: pending.timestamp,
            };
        }
        let mut pending = pending;
        pending.resend_count += 1;
        if pending.resend_count > MAX_UPDATE_RESENDS {
            return CommitOutcome::Abandoned;
        }
        let earliest = self.period.superframe_start(now) + 2 * self.period.current_period as u64;
        let step = pending.new_period as u64;
        let gap = earliest.saturating_sub(pending.start_slot);
        pending.start_slot += gap.div_ceil(step).max(1) * step;
        let unacked: Vec<NodeId> =
            pending.children.iter().copied().filter(|w| !pending.acked.contains(w)).collect();
        for w in unacked {
            let payload = if pending.is_expansion {
                Payload::Exp {
                    root: pending.root,
                    period: pending.new_period,
                    timestamp: pending.timestamp,
                    start_slot: pending.start_slot,
                }
            } else {
                Payload::Update {
                    root: pending.root,
                    period: pending.new_period,
                    timestamp: pending.timestamp,
                    start_slot: pending.start_slot,
                }
            };
            self.outbox.push((w, payload));
        }
        self.period.pending = Some(pending);
        CommitOutcome::Recalculated
    }

    /// True when this node can take no further protocol action by itself.
    pub fn quiescent(&self, registry: &Registry) -> bool {
        let period = self.period.current_period;
        let plateau_done = !self.laterals_armed
            || self.links.values().all(|l| {
                l.lateral_budget == 0 || registry.feasible_slots(l.link, period).len() <= 1
            });
        plateau_done
            && self.links_cannot_improve(registry)
            && self.outbox.is_empty()
            && self.period.pending.is_none()
            && !self.proposals.values().any(|r| r.status == PropStatus::Waiting)
            && !self.wants_to_propose(registry)
    }

    /// Reactivate slot improvement after a topology join; budgets are
    /// re-derived from the current schedule.
    pub fn reactivate_links(&mut self, registry: &Registry) -> Vec<(Link, u32)> {
        self.laterals_armed = true;
        let period = self.period.current_period;
        let mut refreshed = Vec::new();
        for state in self.links.values_mut() {
            if let Some(current) = state.current_slot {
                let feasible = registry.feasible_slots(state.link, period);
                state.retries_remaining = feasible.iter().filter(|&&s| s < current).count() as u32;
                refreshed.push((state.link, state.retries_remaining));
            }
            state.phase = ResvPhase::Start;
            state.backoff_until = 0;
            state.lateral_budget = LATERAL_BUDGET;
            state.lateral_attempt = false;
            state.stuck_streak = 0;
            state.best_slot = state.current_slot.unwrap_or(SlotIndex::MAX);
            state.planned_target = None;
        }
        self.root_retry = RootRetry::default();
        self.proposals.retain(|_, rec| rec.status != PropStatus::Discarded);
        refreshed
    }
}
