//! Temporal dependency interaction graph: incremental construction, k-depth
//! sub-graph extraction, BFS serialization, and structure attention masks.
//!
//! Every interaction `(u, v, t)` creates two node instances `u_t` and `v_t`
//! joined by an interaction edge. Each instance carries two dependency edges
//! pointing at the instances of its node's previous interaction: its own
//! previous instance first, then that interaction's partner instance. A
//! node's first appearance points both slots at a reserved null sentinel.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Scalar, NEG_INF};
use crate::error::{Result, TclError};
use crate::ingest::{Interaction, InteractionLog, NodeId};

/// Index into [`Tdig::instances`]. Instances are created in pairs, so the
/// partner of instance `i` is `i ^ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId(pub u32);

/// A node at the moment of one specific interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeInstance {
    pub node: NodeId,
    pub time: f64,
    /// `(own previous instance, that interaction's partner)`, or `None` on
    /// first appearance.
    pub deps: Option<(InstanceId, InstanceId)>,
    /// Time since the node's previous interaction; 0 on first appearance.
    pub delta: f64,
}

/// Append-only temporal dependency interaction graph.
#[derive(Debug, Default, Clone)]
pub struct Tdig {
    instances: Vec<NodeInstance>,
    last: HashMap<NodeId, (InstanceId, InstanceId)>,
    last_time: Option<f64>,
}

impl Tdig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a graph by appending every event of a sorted log.
    pub fn from_log(log: &InteractionLog) -> Result<Self> {
        let mut g = Self::new();
        for ev in &log.events {
            g.append_interaction(ev)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, id: InstanceId) -> &NodeInstance {
        &self.instances[id.0 as usize]
    }

    /// The instance created together with `id` by the same interaction.
    pub fn partner_of(&self, id: InstanceId) -> InstanceId {
        InstanceId(id.0 ^ 1)
    }

    /// The node's most recent instance and that interaction's partner
    /// instance, if the node has appeared.
    pub fn last_instance(&self, node: NodeId) -> Option<(InstanceId, InstanceId)> {
        self.last.get(&node).copied()
    }

    /// Append one interaction, creating the two node instances.
    /// Timestamps must be non-decreasing.
    pub fn append_interaction(
        &mut self,
        ev: &Interaction,
    ) -> Result<(InstanceId, InstanceId)> {
        if let Some(last) = self.last_time {
            if ev.timestamp < last {
                return Err(TclError::OutOfOrder {
                    t: ev.timestamp,
                    last,
                });
            }
        }
        self.last_time = Some(ev.timestamp);
        let iu = InstanceId(self.instances.len() as u32);
        let iv = InstanceId(iu.0 + 1);
        for node in [ev.source, ev.target] {
            let (deps, delta) = match self.last.get(&node).copied() {
                Some((own, _)) => {
                    let own_partner = self.partner_of(own);
                    (
                        Some((own, own_partner)),
                        ev.timestamp - self.instances[own.0 as usize].time,
                    )
                }
                None => (None, 0.0),
            };
            self.instances.push(NodeInstance {
                node,
                time: ev.timestamp,
                deps,
                delta,
            });
        }
        self.last.insert(ev.source, (iu, iv));
        self.last.insert(ev.target, (iv, iu));
        Ok((iu, iv))
    }
}

/// Sub-graph depth and serialization limits.
#[derive(Debug, Clone, Copy)]
pub struct DepthConfig {
    pub k: usize,
    /// Cap on serialized sequence length; the full binary closure needs
    /// `2^(k+1) - 1`.
    pub max_seq_len: usize,
}

impl DepthConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_seq_len: (1usize << (k + 1)) - 1,
        }
    }
}

/// One entry of an extracted sub-graph: a real instance or a null-sentinel
/// dependency slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubNode {
    Instance(InstanceId),
    Null,
}

/// The dependency closure of a root instance within `k` hops, in BFS
/// discovery order (root first, own-previous slot before partner slot).
#[derive(Debug, Clone)]
pub struct SubGraph {
    pub root: InstanceId,
    pub nodes: Vec<SubNode>,
    /// Hop distance from the root, aligned with `nodes`.
    pub depths: Vec<u32>,
    /// Dependency edges `(child position, parent position)` between entries
    /// of `nodes`.
    pub edges: Vec<(u32, u32)>,
}

impl SubGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Extract the max `k`-depth dependency sub-graph rooted at `root`.
///
/// A real instance reached by several paths is kept once, at its minimum
/// depth. Null sentinel slots are leaf entries, one per missing parent of
/// an expanded node. Dependency edges between any two retained instances
/// are kept, including edges from nodes at the depth-`k` frontier.
pub fn extract_subgraph(tdig: &Tdig, root: InstanceId, k: usize) -> SubGraph {
    let mut nodes = vec![SubNode::Instance(root)];
    let mut depths = vec![0u32];
    let mut pos_of: HashMap<InstanceId, u32> = HashMap::from([(root, 0)]);
    let mut edges = Vec::new();
    let mut cursor = 0usize;
    while cursor < nodes.len() {
        let depth = depths[cursor];
        let inst = match nodes[cursor] {
            SubNode::Instance(id) => id,
            SubNode::Null => {
                cursor += 1;
                continue;
            }
        };
        if depth as usize >= k {
            cursor += 1;
            continue;
        }
        match tdig.instance(inst).deps {
            Some((dep_own, dep_partner)) => {
                for parent in [dep_own, dep_partner] {
                    if !pos_of.contains_key(&parent) {
                        pos_of.insert(parent, nodes.len() as u32);
                        nodes.push(SubNode::Instance(parent));
                        depths.push(depth + 1);
                    }
                }
            }
            None => {
                for _ in 0..2 {
                    nodes.push(SubNode::Null);
                    depths.push(depth + 1);
                }
            }
        }
        cursor += 1;
    }
    // Edges: all dependency links between retained entries. Instance-to-
    // instance links are induced over the full node set; null slots hang off
    // the expansion that created them (slots appear in BFS order, two per
    // expanded history-less node).
    let null_positions: Vec<u32> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n, SubNode::Null))
        .map(|(pos, _)| pos as u32)
        .collect();
    let mut null_iter = null_positions.into_iter();
    for (pos, node) in nodes.iter().enumerate() {
        let inst = match node {
            SubNode::Instance(id) => *id,
            SubNode::Null => continue,
        };
        match tdig.instance(inst).deps {
            Some((dep_own, dep_partner)) => {
                for parent in [dep_own, dep_partner] {
                    if let Some(&ppos) = pos_of.get(&parent) {
                        edges.push((pos as u32, ppos));
                    }
                }
            }
            None if (depths[pos] as usize) < k => {
                for _ in 0..2 {
                    if let Some(npos) = null_iter.next() {
                        edges.push((pos as u32, npos));
                    }
                }
            }
            None => {}
        }
    }
    SubGraph {
        root,
        nodes,
        depths,
        edges,
    }
}

/// A serialized sub-graph: aligned id/depth/interval lists plus the m×m
/// structure attention mask (0 where the key lies in the query's rooted
/// dependency sub-graph, a large negative surrogate for −∞ elsewhere).
#[derive(Debug, Clone)]
pub struct NodeSequence {
    /// `None` marks the null sentinel.
    pub ids: Vec<Option<NodeId>>,
    pub depths: Vec<u32>,
    pub deltas: Vec<f64>,
    /// Row-major m×m, entries 0 or [`NEG_INF`].
    pub mask: Arc<Vec<Scalar>>,
}

impl NodeSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The sequence standing in for a node with no history: a single null
    /// sentinel at depth 0.
    pub fn null_singleton() -> Self {
        Self {
            ids: vec![None],
            depths: vec![0],
            deltas: vec![0.0],
            mask: Arc::new(vec![0.0]),
        }
    }
}

/// Structure attention mask over `sub.nodes` in their stored order:
/// `mask[i*m + j] == 0` iff entry `j` is reachable from entry `i` along
/// dependency edges (including `i == j`).
pub fn attention_mask(sub: &SubGraph) -> Vec<Scalar> {
    let m = sub.nodes.len();
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); m];
    for &(child, parent) in &sub.edges {
        adj[child as usize].push(parent);
    }
    let mut mask = vec![NEG_INF; m * m];
    let mut stack = Vec::new();
    let mut seen = vec![false; m];
    for i in 0..m {
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(i as u32);
        seen[i] = true;
        while let Some(x) = stack.pop() {
            mask[i * m + x as usize] = 0.0;
            for &p in &adj[x as usize] {
                if !seen[p as usize] {
                    seen[p as usize] = true;
                    stack.push(p);
                }
            }
        }
    }
    mask
}

/// Serialize a sub-graph root-first in BFS order. If the sequence exceeds
/// `max_seq_len` it is truncated from the deep end (BFS order is depth-
/// sorted, so dropping the tail drops deepest-then-latest entries); the
/// mask is computed over the full node set first so reachability through
/// dropped entries is preserved.
pub fn serialize_bfs(tdig: &Tdig, sub: &SubGraph, cfg: &DepthConfig) -> NodeSequence {
    let full_m = sub.nodes.len();
    let m = full_m.min(cfg.max_seq_len);
    let mut ids = Vec::with_capacity(m);
    let mut deltas = Vec::with_capacity(m);
    for node in sub.nodes.iter().take(m) {
        match node {
            SubNode::Instance(id) => {
                let inst = tdig.instance(*id);
                ids.push(Some(inst.node));
                deltas.push(inst.delta);
            }
            SubNode::Null => {
                ids.push(None);
                deltas.push(0.0);
            }
        }
    }
    let full_mask = attention_mask(sub);
    let mask = if m == full_m {
        full_mask
    } else {
        let mut out = Vec::with_capacity(m * m);
        for i in 0..m {
            out.extend_from_slice(&full_mask[i * full_m..i * full_m + m]);
        }
        out
    };
    NodeSequence {
        ids,
        depths: sub.depths.iter().take(m).copied().collect(),
        deltas,
        mask: Arc::new(mask),
    }
}

/// The two serialized dependency sub-graphs standing behind a node's next
/// interaction: one per dependency slot of the node's latest instance, or a
/// pair of null singletons if the node has no history.
pub fn dependency_sequences(
    tdig: &Tdig,
    node: NodeId,
    cfg: &DepthConfig,
) -> (NodeSequence, NodeSequence) {
    match tdig.last_instance(node) {
        Some((own, partner)) => {
            let a = extract_subgraph(tdig, own, cfg.k);
            let b = extract_subgraph(tdig, partner, cfg.k);
            (
                serialize_bfs(tdig, &a, cfg),
                serialize_bfs(tdig, &b, cfg),
            )
        }
        None => (NodeSequence::null_singleton(), NodeSequence::null_singleton()),
    }
}
