//! Mesh graph representation, topology generators, and structural metrics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node identifier, `0..|V|-1` within one topology. The total order on
/// ids is the order used for every highest-id comparison in the protocol.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A directed link `(src, dst)`.
pub type Link = (NodeId, NodeId);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshNode {
    pub id: NodeId,
    /// Position in meters; synthesized for line/grid, absent only for
    /// hand-built topologies.
    pub position: Option<(f64, f64)>,
    /// Radio count; generators set this to the out-degree so that every link
    /// has a dedicated antenna.
    pub radios: u32,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("failed to generate a connected topology within {0} attempts")]
    GenerationFailed(u32),
    #[error("diameter undefined: topology is disconnected")]
    Disconnected,
    #[error("invalid topology: {0}")]
    Invalid(String),
}

/// Directed mesh graph. Edges always come in symmetric pairs and the graph is
/// connected; construction enforces both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<MeshNode>,
    edges: BTreeSet<Link>,
    pub range: Option<f64>,
    neighbor_sets: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopologyStats {
    pub max_degree: u32,
    pub diameter: u32,
    pub edge_count: usize,
    pub node_count: usize,
}

/// Retry budget for rejection sampling in the random generators.
const CONNECTIVITY_RETRY_BUDGET: u32 = 1000;

impl Topology {
    /// Build from an undirected adjacency list; inserts both directed edges
    /// per adjacency and checks the structural invariants.
    pub fn from_undirected(
        n: u32,
        undirected: &[(u32, u32)],
        positions: Option<Vec<(f64, f64)>>,
        range: Option<f64>,
    ) -> Result<Self, TopologyError> {
        let mut edges = BTreeSet::new();
        let mut neighbor_sets: BTreeMap<NodeId, BTreeSet<NodeId>> =
            (0..n).map(|i| (NodeId(i), BTreeSet::new())).collect();
        for &(u, v) in undirected {
            if u == v {
                return Err(TopologyError::Invalid(format!("self loop at node {u}")));
            }
            if u >= n || v >= n {
                return Err(TopologyError::Invalid(format!("edge ({u},{v}) out of range")));
            }
            edges.insert((NodeId(u), NodeId(v)));
            edges.insert((NodeId(v), NodeId(u)));
            neighbor_sets.get_mut(&NodeId(u)).unwrap().insert(NodeId(v));
            neighbor_sets.get_mut(&NodeId(v)).unwrap().insert(NodeId(u));
        }
        let nodes = (0..n)
            .map(|i| MeshNode {
                id: NodeId(i),
                position: positions.as_ref().map(|p| p[i as usize]),
                radios: neighbor_sets[&NodeId(i)].len() as u32,
            })
            .collect();
        let topo = Topology { nodes, edges, range, neighbor_sets };
        if topo.nodes.len() > 1 && !topo.is_connected() {
            return Err(TopologyError::Invalid("graph is disconnected".into()));
        }
        Ok(topo)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = Link> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.edges.contains(&(u, v))
    }

    pub fn neighbors(&self, u: NodeId) -> &BTreeSet<NodeId> {
        &self.neighbor_sets[&u]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn degree(&self, u: NodeId) -> usize {
        self.neighbor_sets[&u].len()
    }

    /// True iff `u` has the highest id in its closed neighborhood.
    pub fn is_local_max(&self, u: NodeId) -> bool {
        self.neighbors(u).iter().all(|&w| w < u)
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let start = self.nodes[0].id;
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    fn bfs_ecc(&self, src: NodeId) -> Result<u32, TopologyError> {
        let mut dist: BTreeMap<NodeId, u32> = BTreeMap::from([(src, 0)]);
        let mut queue = VecDeque::from([src]);
        let mut ecc = 0;
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for &v in self.neighbors(u) {
                if !dist.contains_key(&v) {
                    dist.insert(v, du + 1);
                    ecc = ecc.max(du + 1);
                    queue.push_back(v);
                }
            }
        }
        if dist.len() != self.nodes.len() {
            return Err(TopologyError::Disconnected);
        }
        Ok(ecc)
    }

    /// Exact max degree and diameter (all-pairs BFS).
    pub fn stats(&self) -> Result<TopologyStats, TopologyError> {
        let max_degree = self.nodes.iter().map(|n| self.degree(n.id) as u32).max().unwrap_or(0);
        let mut diameter = 0;
        for node in &self.nodes {
            diameter = diameter.max(self.bfs_ecc(node.id)?);
        }
        Ok(TopologyStats {
            max_degree,
            diameter,
            edge_count: self.edge_count(),
            node_count: self.node_count(),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.nodes.iter().map(|n| serde_json::json!({
                "id": n.id.0,
                "x": n.position.map(|p| p.0),
                "y": n.position.map(|p| p.1),
            })).collect::<Vec<_>>(),
            "edges": self.edges.iter().map(|(u, v)| [u.0, v.0]).collect::<Vec<_>>(),
            "range": self.range,
        })
    }

    /// Load from the JSON document emitted by [`Topology::to_json`]; validates
    /// symmetry, connectivity and absence of self-loops.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, TopologyError> {
        let nodes = value["nodes"]
            .as_array()
            .ok_or_else(|| TopologyError::Invalid("missing nodes".into()))?;
        let n = nodes.len() as u32;
        let positions: Option<Vec<(f64, f64)>> = nodes
            .iter()
            .map(|nd| match (nd["x"].as_f64(), nd["y"].as_f64()) {
                (Some(x), Some(y)) => Some((x, y)),
                _ => None,
            })
            .collect();
        let edges = value["edges"]
            .as_array()
            .ok_or_else(|| TopologyError::Invalid("missing edges".into()))?;
        let mut undirected = Vec::new();
        let mut directed = BTreeSet::new();
        for e in edges {
            let u = e[0].as_u64().ok_or_else(|| TopologyError::Invalid("bad edge".into()))? as u32;
            let v = e[1].as_u64().ok_or_else(|| TopologyError::Invalid("bad edge".into()))? as u32;
            directed.insert((u, v));
            if u < v {
                undirected.push((u, v));
            }
        }
        for &(u, v) in &directed {
            if !directed.contains(&(v, u)) {
                return Err(TopologyError::Invalid(format!("edge ({u},{v}) lacks its reverse")));
            }
        }
        Topology::from_undirected(n, &undirected, positions, value["range"].as_f64())
    }
}

/// Path graph on `n` nodes; node `i` adjacent to `i+1`, unit spacing.
pub fn generate_line(n: u32) -> Result<Topology, TopologyError> {
    if n < 2 {
        return Err(TopologyError::InvalidArgument(format!("line needs n >= 2, got {n}")));
    }
    let undirected: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
    let positions: Vec<_> = (0..n).map(|i| (i as f64, 0.0)).collect();
    Topology::from_undirected(n, &undirected, Some(positions), Some(1.0))
}

/// `rows x cols` lattice with 4-neighborhood adjacency.
pub fn generate_grid(rows: u32, cols: u32) -> Result<Topology, TopologyError> {
    if rows < 2 || cols < 2 {
        return Err(TopologyError::InvalidArgument(format!(
            "grid needs both dimensions >= 2, got {rows}x{cols}"
        )));
    }
    let id = |r: u32, c: u32| r * cols + c;
    let mut undirected = Vec::new();
    let mut positions = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            positions.push((c as f64, r as f64));
            if c + 1 < cols {
                undirected.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                undirected.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    Topology::from_undirected(rows * cols, &undirected, Some(positions), Some(1.0))
}

/// Uniform-random placements on an `area_side` square, links by Euclidean
/// distance <= `range`; redraws until connected.
pub fn generate_geometric(
    n: u32,
    area_side: f64,
    range: f64,
    seed: u64,
) -> Result<Topology, TopologyError> {
    if n < 2 {
        return Err(TopologyError::InvalidArgument(format!("geometric needs n >= 2, got {n}")));
    }
    if range <= 0.0 {
        return Err(TopologyError::InvalidArgument(format!("range must be positive, got {range}")));
    }
    let mut rng = seeded_rng(seed, 1);
    for _ in 0..CONNECTIVITY_RETRY_BUDGET {
        let positions: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.0..=area_side), rng.gen_range(0.0..=area_side)))
            .collect();
        let mut undirected = Vec::new();
        for i in 0..n as usize {
            for j in i + 1..n as usize {
                let (dx, dy) = (positions[i].0 - positions[j].0, positions[i].1 - positions[j].1);
                if (dx * dx + dy * dy).sqrt() <= range {
                    undirected.push((i as u32, j as u32));
                }
            }
        }
        if let Ok(t) = Topology::from_undirected(n, &undirected, Some(positions), Some(range)) {
            return Ok(t);
        }
    }
    Err(TopologyError::GenerationFailed(CONNECTIVITY_RETRY_BUDGET))
}

// Tag mixed into the RNG seed so distinct generators never share a stream.
fn seeded_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag))
}

/// Connected `d`-regular graph via the pairing model with double-edge swaps
/// to repair self-loops and duplicates.
pub fn generate_fixed_degree(n: u32, degree: u32, seed: u64) -> Result<Topology, TopologyError> {
    if degree >= n {
        return Err(TopologyError::InvalidArgument(format!(
            "degree {degree} infeasible for {n} nodes"
        )));
    }
    if degree == 0 || (n * degree) % 2 != 0 {
        return Err(TopologyError::InvalidArgument(format!(
            "n*d must be even and d positive (n={n}, d={degree})"
        )));
    }
    let mut rng = seeded_rng(seed, 2);
    'attempt: for _ in 0..CONNECTIVITY_RETRY_BUDGET {
        // Stub pairing: each node contributes `degree` stubs.
        let mut stubs: Vec<u32> = (0..n).flat_map(|i| std::iter::repeat(i).take(degree as usize)).collect();
        stubs.shuffle(&mut rng);
        let mut pairs: Vec<(u32, u32)> = stubs.chunks(2).map(|c| (c[0], c[1])).collect();
        // Repair self-loops and parallel edges with random double-edge swaps.
        let mut repairs = 0;
        loop {
            let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
            let mut bad = Vec::new();
            for (idx, &(u, v)) in pairs.iter().enumerate() {
                let key = (u.min(v), u.max(v));
                if u == v || !seen.insert(key) {
                    bad.push(idx);
                }
            }
            if bad.is_empty() {
                break;
            }
            repairs += 1;
            if repairs > 20 * pairs.len() {
                continue 'attempt;
            }
            for idx in bad {
                let other = rng.gen_range(0..pairs.len());
                if other == idx {
                    continue;
                }
                let (a, b) = pairs[idx];
                let (c, d) = pairs[other];
                pairs[idx] = (a, d);
                pairs[other] = (c, b);
            }
        }
        if let Ok(t) = Topology::from_undirected(n, &pairs, None, None) {
            return Ok(t);
        }
    }
    Err(TopologyError::GenerationFailed(CONNECTIVITY_RETRY_BUDGET))
}

/// Complete graph on `n` nodes.
pub fn generate_complete(n: u32) -> Result<Topology, TopologyError> {
    if n < 2 {
        return Err(TopologyError::InvalidArgument(format!("complete needs n >= 2, got {n}")));
    }
    let mut undirected = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            undirected.push((i, j));
        }
    }
    Topology::from_undirected(n, &undirected, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_smallest() {
        let t = generate_line(2).unwrap();
        let edges: Vec<_> = t.edges().collect();
        assert_eq!(edges, vec![(NodeId(0), NodeId(1)), (NodeId(1), NodeId(0))]);
        let s = t.stats().unwrap();
        assert_eq!((s.max_degree, s.diameter), (1, 1));
    }

    #[test]
    fn line_sixteen() {
        let t = generate_line(16).unwrap();
        assert_eq!(t.edge_count(), 30);
        let s = t.stats().unwrap();
        assert_eq!(s.diameter, 15);
        assert_eq!(s.max_degree, 2);
    }

    #[test]
    fn line_degree_sequence() {
        let t = generate_line(4).unwrap();
        let degs: Vec<_> = t.node_ids().map(|u| t.degree(u)).collect();
        assert_eq!(degs, vec![1, 2, 2, 1]);
    }

    #[test]
    fn line_too_small() {
        assert!(matches!(generate_line(1), Err(TopologyError::InvalidArgument(_))));
    }

    #[test]
    fn grid_square() {
        let t = generate_grid(2, 2).unwrap();
        assert_eq!(t.edge_count(), 8);
        assert_eq!(t.stats().unwrap().diameter, 2);
    }

    #[test]
    fn grid_four_by_four() {
        let t = generate_grid(4, 4).unwrap();
        assert_eq!(t.node_count(), 16);
        // 2 * (2*rows*cols - rows - cols) directed edges.
        assert_eq!(t.edge_count(), 48);
        assert_eq!(t.stats().unwrap().diameter, 6);
    }

    #[test]
    fn grid_two_by_three_max_degree() {
        let t = generate_grid(2, 3).unwrap();
        assert_eq!(t.stats().unwrap().max_degree, 3);
    }

    #[test]
    fn grid_dimension_too_small() {
        assert!(matches!(generate_grid(1, 5), Err(TopologyError::InvalidArgument(_))));
    }

    #[test]
    fn geometric_two_nodes_wide_range() {
        let t = generate_geometric(2, 10.0, 10.0 * 2f64.sqrt(), 7).unwrap();
        assert_eq!(t.edge_count(), 2);
    }

    #[test]
    fn geometric_full_range_nearly_complete() {
        let t = generate_geometric(50, 100.0, 100.0 * 2f64.sqrt(), 3).unwrap();
        assert_eq!(t.edge_count(), 50 * 49);
    }

    #[test]
    fn geometric_deterministic() {
        let a = generate_geometric(20, 100.0, 40.0, 42).unwrap();
        let b = generate_geometric(20, 100.0, 40.0, 42).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn fixed_degree_complete_four() {
        let t = generate_fixed_degree(4, 3, 1).unwrap();
        assert_eq!(t.edge_count(), 12);
    }

    #[test]
    fn fixed_degree_fifty_five() {
        let t = generate_fixed_degree(50, 5, 9).unwrap();
        // 5 outgoing directed links per node.
        assert_eq!(t.edge_count(), 250);
        for u in t.node_ids() {
            assert_eq!(t.degree(u), 5);
        }
    }

    #[test]
    fn fixed_degree_infeasible() {
        assert!(matches!(generate_fixed_degree(4, 4, 1), Err(TopologyError::InvalidArgument(_))));
    }

    #[test]
    fn stats_complete_ten() {
        let t = generate_complete(10).unwrap();
        let s = t.stats().unwrap();
        assert_eq!((s.diameter, s.max_degree), (1, 9));
    }

    #[test]
    fn json_round_trip() {
        let t = generate_grid(3, 3).unwrap();
        let j = t.to_json();
        let u = Topology::from_json(&j).unwrap();
        assert_eq!(u.to_json(), j);
    }

    #[test]
    fn json_rejects_asymmetric() {
        let j = serde_json::json!({
            "nodes": [{"id": 0}, {"id": 1}],
            "edges": [[0, 1]],
            "range": null,
        });
        assert!(Topology::from_json(&j).is_err());
    }

    proptest! {
        #[test]
        fn generators_symmetric_and_connected(n in 2u32..20, seed in 0u64..50) {
            let t = generate_geometric(n, 50.0, 40.0, seed).unwrap();
            for (u, v) in t.edges() {
                prop_assert!(t.has_edge(v, u));
            }
            prop_assert!(t.is_connected());
        }

        #[test]
        fn geometric_edge_iff_in_range(n in 2u32..15, seed in 0u64..30) {
            let t = generate_geometric(n, 50.0, 30.0, seed).unwrap();
            for u in t.node_ids() {
                for v in t.node_ids() {
                    if u == v { continue; }
                    let pu = t.nodes[u.index()].position.unwrap();
                    let pv = t.nodes[v.index()].position.unwrap();
                    let d = ((pu.0 - pv.0).powi(2) + (pu.1 - pv.1).powi(2)).sqrt();
                    prop_assert_eq!(t.has_edge(u, v), d <= 30.0);
                }
            }
        }

        #[test]
        fn fixed_degree_regular(seed in 0u64..20, d in 3u32..8) {
            let t = generate_fixed_degree(20, d, seed).unwrap();
            for u in t.node_ids() {
                prop_assert_eq!(t.degree(u), d as usize);
            }
            prop_assert!(t.is_connected());
        }
    }
}
