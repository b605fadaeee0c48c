//! Reference schedulers and an exact small-instance oracle.
//!
//! All three schedulers emit [`Superframe`]s over the same directed-link
//! model as the distributed protocol, so results are directly comparable:
//!
//! * [`algo2_superframe`]: centralized iterated max-cut; each slot greedily
//!   splits the nodes into transmitters and receivers to cover as many
//!   still-unscheduled directed edges as possible.
//! * [`jazzymac_superframe`]: token passing over an acyclic orientation
//!   seeded by a greedy coloring; a node holding every token of its edges
//!   transmits on all of them and hands the tokens over (sink reversal).
//! * [`roma_superframe`]: each slot takes a pseudorandom half of the nodes
//!   as transmitters; runs until every directed edge was covered once.
//! * [`oracle_min_period`]: exact minimum MTR period by exhaustive search
//!   over per-node transmit-slot bitmasks (instances up to 10 nodes).

use std::collections::{BTreeMap, BTreeSet};

use crate::schedule::Superframe;
use crate::topology::{Link, NodeId, Topology};

/// BFS order over node ids starting from the lowest id; ties and neighbor
/// iteration follow ascending id.
fn bfs_order(topo: &Topology) -> Vec<NodeId> {
    let mut order = Vec::with_capacity(topo.node_count());
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    let mut queue: std::collections::VecDeque<NodeId> = std::collections::VecDeque::new();
    for start in topo.node_ids() {
        if seen.contains(&start) {
            continue;
        }
        seen.insert(start);
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in topo.neighbors(v) {
                if seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
    }
    order
}

/// Iterated greedy max-cut. One slot per iteration: nodes are placed, in BFS
/// order, on the transmitting or receiving side, whichever covers more
/// still-unscheduled directed edges against already-placed neighbors; ties
/// break toward the side of the node's larger unscheduled direction (more
/// unscheduled incoming than outgoing puts it with the receivers).
pub fn algo2_superframe(topo: &Topology) -> Superframe {
    let mut unscheduled: BTreeSet<Link> = topo.edges().collect();
    let order = bfs_order(topo);
    let mut edge_sets: Vec<BTreeSet<Link>> = Vec::new();
    while !unscheduled.is_empty() {
        let mut side: BTreeMap<NodeId, bool> = BTreeMap::new(); // true = transmitter
        for &v in &order {
            let mut gain_tx = 0usize;
            let mut gain_rx = 0usize;
            for &w in topo.neighbors(v) {
                match side.get(&w) {
                    Some(false) if unscheduled.contains(&(v, w)) => gain_tx += 1,
                    Some(true) if unscheduled.contains(&(w, v)) => gain_rx += 1,
                    _ => {}
                }
            }
            let placed_tx = if gain_tx != gain_rx {
                gain_tx > gain_rx
            } else {
                let out = topo.neighbors(v).iter().filter(|&&w| unscheduled.contains(&(v, w))).count();
                let inc = topo.neighbors(v).iter().filter(|&&w| unscheduled.contains(&(w, v))).count();
                inc <= out
            };
            side.insert(v, placed_tx);
        }
        let mut eps: BTreeSet<Link> = BTreeSet::new();
        for &(u, w) in &unscheduled {
            if side[&u] && !side[&w] {
                eps.insert((u, w));
            }
        }
        if eps.is_empty() {
            // Degenerate split; force the node with the largest unscheduled
            // out-degree to transmit against all its neighbors.
            let v = order
                .iter()
                .copied()
                .max_by_key(|&v| {
                    topo.neighbors(v).iter().filter(|&&w| unscheduled.contains(&(v, w))).count()
                })
                .expect("nonempty topology");
            for &w in topo.neighbors(v) {
                if unscheduled.contains(&(v, w)) {
                    eps.insert((v, w));
                }
            }
            assert!(!eps.is_empty(), "unscheduled edges but no coverable cut");
        }
        for &l in &eps {
            unscheduled.remove(&l);
        }
        edge_sets.push(eps);
    }
    Superframe { edge_sets }
}

fn greedy_coloring(topo: &Topology) -> BTreeMap<NodeId, u32> {
    let mut order: Vec<NodeId> = topo.node_ids().collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(topo.degree(v)), v));
    let mut colors: BTreeMap<NodeId, u32> = BTreeMap::new();
    for v in order {
        let used: BTreeSet<u32> =
            topo.neighbors(v).iter().filter_map(|w| colors.get(w).copied()).collect();
        let c = (0..).find(|c| !used.contains(c)).unwrap();
        colors.insert(v, c);
    }
    colors
}

/// Token-passing schedule. Every undirected edge carries one token, seeded
/// at the endpoint with the smaller greedy color (an acyclic orientation).
/// Per slot, every node holding all tokens of its incident edges transmits
/// on all of them, then passes the tokens over; two such nodes are never
/// adjacent, so slots are collision-free. Each edge set records the first
/// activation of each directed edge, so the frame covers every directed
/// edge exactly once.
pub fn jazzymac_superframe(topo: &Topology) -> Superframe {
    let colors = greedy_coloring(topo);
    // holder[(u, v)] with u < v: which endpoint holds the token.
    let mut holder: BTreeMap<(NodeId, NodeId), NodeId> = BTreeMap::new();
    for (u, v) in topo.edges() {
        if u < v {
            let h = if colors[&u] < colors[&v] { u } else { v };
            holder.insert((u, v), h);
        }
    }
    let mut remaining: BTreeSet<Link> = topo.edges().collect();
    let mut edge_sets: Vec<BTreeSet<Link>> = Vec::new();
    let budget = 4 * topo.node_count().max(1);
    while !remaining.is_empty() {
        assert!(edge_sets.len() < budget, "token dynamics failed to cover all edges");
        let sinks: Vec<NodeId> = topo
            .node_ids()
            .filter(|&v| {
                topo.degree(v) > 0
                    && topo.neighbors(v).iter().all(|&w| {
                        let key = if v < w { (v, w) } else { (w, v) };
                        holder[&key] == v
                    })
            })
            .collect();
        assert!(!sinks.is_empty(), "sink reversal stalled");
        let mut eps: BTreeSet<Link> = BTreeSet::new();
        for &v in &sinks {
            for &w in topo.neighbors(v) {
                if remaining.remove(&(v, w)) {
                    eps.insert((v, w));
                }
                let key = if v < w { (v, w) } else { (w, v) };
                holder.insert(key, w);
            }
        }
        edge_sets.push(eps);
    }
    Superframe { edge_sets }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Random-split schedule: per slot the ceil(n/2) nodes with the highest
/// slot-keyed pseudorandom priority transmit, everyone else receives. Runs
/// until every directed edge has been activated at least once; the period
/// counts all slots taken, productive or not.
pub fn roma_superframe(topo: &Topology, seed: u64) -> Superframe {
    let n = topo.node_count();
    let take = n.div_ceil(2);
    let mut remaining: BTreeSet<Link> = topo.edges().collect();
    let mut edge_sets: Vec<BTreeSet<Link>> = Vec::new();
    let budget = 64 * n.max(1) * n.max(1);
    let mut slot = 0u64;
    while !remaining.is_empty() {
        slot += 1;
        assert!((slot as usize) < budget, "random split failed to cover all edges");
        let mut ranked: Vec<NodeId> = topo.node_ids().collect();
        ranked.sort_by_key(|&v| {
            (std::cmp::Reverse(splitmix64(seed ^ slot.wrapping_mul(0xa24b_aed4_963e_e407) ^ v.0 as u64)), v)
        });
        let tx: BTreeSet<NodeId> = ranked.into_iter().take(take).collect();
        let mut eps: BTreeSet<Link> = BTreeSet::new();
        for &(u, v) in &remaining {
            if tx.contains(&u) && !tx.contains(&v) {
                eps.insert((u, v));
            }
        }
        for &l in &eps {
            remaining.remove(&l);
        }
        edge_sets.push(eps);
    }
    Superframe { edge_sets }
}

/// Exact minimum period for instances of at most 10 nodes.
///
/// A period-`k` MTR schedule is equivalent to giving every node a `k`-bit
/// transmit mask (bit `i` set: the node transmits in slot `i`; idle and
/// receive are interchangeable) such that adjacent masks are incomparable
/// under bitwise inclusion — each side needs a slot where it transmits and
/// the other does not. The search assigns masks in BFS order with that
/// pruning, canonicalizing the first node's mask to a prefix of ones.
pub fn oracle_min_period(topo: &Topology) -> u32 {
    assert!(topo.node_count() <= 10, "oracle is exponential; instances are capped at 10 nodes");
    if topo.edge_count() == 0 {
        return 0;
    }
    let order = bfs_order(topo);
    for k in 1..=10u32 {
        let mut masks: BTreeMap<NodeId, u32> = BTreeMap::new();
        if assign(topo, &order, 0, k, &mut masks) {
            return k;
        }
    }
    unreachable!("every 10-node instance is schedulable within 10 slots");
}

fn incomparable(a: u32, b: u32) -> bool {
    a & !b != 0 && b & !a != 0
}

fn assign(
    topo: &Topology,
    order: &[NodeId],
    pos: usize,
    k: u32,
    masks: &mut BTreeMap<NodeId, u32>,
) -> bool {
    if pos == order.len() {
        return true;
    }
    let v = order[pos];
    if topo.degree(v) == 0 {
        masks.insert(v, 0);
        let ok = assign(topo, order, pos + 1, k, masks);
        if !ok {
            masks.remove(&v);
        }
        return ok;
    }
    // Slot permutations are symmetric; pin the first node to prefixes of 1s.
    let candidates: Vec<u32> = if pos == 0 {
        (1..k).map(|p| (1u32 << p) - 1).collect()
    } else {
        (1..(1u32 << k) - 1).collect()
    };
    for m in candidates {
        if topo
            .neighbors(v)
            .iter()
            .filter_map(|w| masks.get(w))
            .all(|&mw| incomparable(m, mw))
        {
            masks.insert(v, m);
            if assign(topo, order, pos + 1, k, masks) {
                return true;
            }
            masks.remove(&v);
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{generate_complete, generate_grid, generate_line};

    fn check_valid(sf: &Superframe, topo: &Topology) {
        assert!(sf.validate_no_mix_tx_rx().is_empty());
        assert!(sf.validate_coverage(topo).is_empty());
    }

    #[test]
    fn algo2_line_is_two_slots() {
        let topo = generate_line(16).unwrap();
        let sf = algo2_superframe(&topo);
        check_valid(&sf, &topo);
        assert_eq!(sf.period(), 2);
        assert_eq!(sf.total_activations(), 30);
    }

    #[test]
    fn algo2_grid_is_two_slots() {
        let topo = generate_grid(4, 4).unwrap();
        let sf = algo2_superframe(&topo);
        check_valid(&sf, &topo);
        assert_eq!(sf.period(), 2);
    }

    #[test]
    fn algo2_complete_four_is_four_slots() {
        let topo = generate_complete(4).unwrap();
        let sf = algo2_superframe(&topo);
        check_valid(&sf, &topo);
        assert_eq!(sf.period(), 4);
    }

    #[test]
    fn jazzymac_bipartite_is_two_slots() {
        for topo in [generate_line(16).unwrap(), generate_grid(4, 4).unwrap()] {
            let sf = jazzymac_superframe(&topo);
            check_valid(&sf, &topo);
            assert_eq!(sf.period(), 2);
        }
    }

    #[test]
    fn jazzymac_first_activations_cover_each_edge_once() {
        let topo = generate_grid(3, 5).unwrap();
        let sf = jazzymac_superframe(&topo);
        check_valid(&sf, &topo);
        assert_eq!(sf.total_activations(), topo.edge_count());
    }

    #[test]
    fn jazzymac_complete_serializes_nodes() {
        let topo = generate_complete(10).unwrap();
        let sf = jazzymac_superframe(&topo);
        check_valid(&sf, &topo);
        assert_eq!(sf.period(), 10);
    }

    #[test]
    fn roma_covers_and_is_seed_deterministic() {
        let topo = generate_grid(4, 4).unwrap();
        let a = roma_superframe(&topo, 7);
        let b = roma_superframe(&topo, 7);
        let c = roma_superframe(&topo, 8);
        check_valid(&a, &topo);
        assert_eq!(a, b);
        assert!(a.period() >= 2);
        check_valid(&c, &topo);
    }

    #[test]
    fn oracle_small_instances() {
        assert_eq!(oracle_min_period(&generate_complete(2).unwrap()), 2);
        assert_eq!(oracle_min_period(&generate_line(3).unwrap()), 2);
        assert_eq!(oracle_min_period(&generate_grid(2, 3).unwrap()), 2);
        assert_eq!(oracle_min_period(&generate_complete(4).unwrap()), 4);
        assert_eq!(oracle_min_period(&generate_complete(6).unwrap()), 4);
    }

    #[test]
    fn oracle_complete_ten_needs_five_slots() {
        assert_eq!(oracle_min_period(&generate_complete(10).unwrap()), 5);
    }
}
