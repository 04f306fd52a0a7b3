//! Typed abstraction tree over a corpus.
//!
//! Leaves hold raw chunks; mid-level nodes hold entity–relation abstractions
//! of leaf groups; high-level nodes hold topic abstractions of mid groups;
//! one root covers everything. Queries descend the tree by beam search over
//! embedding similarity.

mod build;
mod persist;
mod traverse;

pub use build::{build_tree, cache_key, chunk_text, BuildConfig, CachedDoc};
pub use persist::{load_tree, save_tree, TREE_FORMAT_VERSION};
pub use traverse::retrieve;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::EmbeddingVector;

/// Node identifier, unique within one tree.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Node type; rank strictly decreases along any root-to-leaf walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLevel {
    Leaf,
    Mid,
    High,
    Root,
}

impl NodeLevel {
    pub fn rank(&self) -> u8 {
        match self {
            NodeLevel::Leaf => 0,
            NodeLevel::Mid => 1,
            NodeLevel::High => 2,
            NodeLevel::Root => 3,
        }
    }
}

/// Provenance of a leaf chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSource {
    pub doc_id: String,
    pub chunk_index: usize,
}

/// One tree node: abstraction text (non-leaf) or chunk text (leaf), its
/// embedding, and child links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamNode {
    pub id: NodeId,
    pub level: NodeLevel,
    pub text: String,
    pub embedding: EmbeddingVector,
    pub children: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LeafSource>,
}

impl TamNode {
    pub fn is_leaf(&self) -> bool {
        self.level == NodeLevel::Leaf
    }
}

/// The whole hierarchy plus its shape statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TamTree {
    nodes: BTreeMap<NodeId, TamNode>,
    root: NodeId,
    leaf_count: usize,
    avg_branching: f64,
    depth: usize,
}

impl TamTree {
    /// Assemble and validate a tree from its nodes and designated root.
    pub fn from_nodes(nodes: Vec<TamNode>, root: NodeId) -> Result<Self> {
        let map: BTreeMap<NodeId, TamNode> = nodes.into_iter().map(|n| (n.id, n)).collect();
        let mut tree = TamTree {
            nodes: map,
            root,
            leaf_count: 0,
            avg_branching: 0.0,
            depth: 0,
        };
        tree.recompute_stats();
        tree.validate()?;
        Ok(tree)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Option<&TamNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TamNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of leaf nodes; the adaptive-routing signal.
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Mean child count over non-leaf nodes.
    pub fn avg_branching(&self) -> f64 {
        self.avg_branching
    }

    /// Largest child count over non-leaf nodes.
    pub fn max_branching(&self) -> usize {
        self.nodes
            .values()
            .filter(|n| !n.is_leaf())
            .map(|n| n.children.len())
            .max()
            .unwrap_or(0)
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Embedding dimension shared by every node.
    pub fn embedding_dim(&self) -> usize {
        self.nodes
            .get(&self.root)
            .map(|n| n.embedding.dim())
            .unwrap_or(0)
    }

    /// Node count per level, for build stats.
    pub fn level_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for node in self.nodes.values() {
            let label = match node.level {
                NodeLevel::Leaf => "leaf",
                NodeLevel::Mid => "mid",
                NodeLevel::High => "high",
                NodeLevel::Root => "root",
            };
            *counts.entry(label.to_string()).or_insert(0) += 1;
        }
        counts
    }

    fn recompute_stats(&mut self) {
        self.leaf_count = self.nodes.values().filter(|n| n.is_leaf()).count();
        let non_leaf: Vec<&TamNode> = self.nodes.values().filter(|n| !n.is_leaf()).collect();
        self.avg_branching = if non_leaf.is_empty() {
            0.0
        } else {
            non_leaf.iter().map(|n| n.children.len()).sum::<usize>() as f64 / non_leaf.len() as f64
        };
        self.depth = self.depth_from(self.root, 0);
    }

    fn depth_from(&self, id: NodeId, acc: usize) -> usize {
        match self.nodes.get(&id) {
            Some(node) if !node.children.is_empty() => node
                .children
                .iter()
                .map(|c| self.depth_from(*c, acc + 1))
                .max()
                .unwrap_or(acc),
            _ => acc,
        }
    }

    /// Structural invariants: one reachable root covering every node, leaves
    /// childless, non-leaves non-empty with abstraction text, levels strictly
    /// decreasing along edges, and a consistent embedding dimension.
    pub fn validate(&self) -> Result<()> {
        let root = self
            .nodes
            .get(&self.root)
            .ok_or_else(|| Error::CorruptFile(format!("root node {} missing", self.root)))?;
        let dim = root.embedding.dim();

        let mut reachable = std::collections::BTreeSet::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if !reachable.insert(id) {
                return Err(Error::CorruptFile(format!("node {id} reached twice")));
            }
            let node = self
                .nodes
                .get(&id)
                .ok_or_else(|| Error::CorruptFile(format!("dangling child id {id}")))?;
            if node.embedding.dim() != dim {
                return Err(Error::CorruptFile(format!(
                    "node {id} embedding dim {} != {dim}",
                    node.embedding.dim()
                )));
            }
            match node.level {
                NodeLevel::Leaf => {
                    if !node.children.is_empty() {
                        return Err(Error::CorruptFile(format!("leaf {id} has children")));
                    }
                    if node.source.is_none() {
                        return Err(Error::CorruptFile(format!("leaf {id} lacks a source")));
                    }
                }
                _ => {
                    if node.children.is_empty() {
                        return Err(Error::CorruptFile(format!("non-leaf {id} has no children")));
                    }
                    if node.text.trim().is_empty() {
                        return Err(Error::CorruptFile(format!(
                            "non-leaf {id} has empty abstraction text"
                        )));
                    }
                }
            }
            for child in &node.children {
                let child_node = self
                    .nodes
                    .get(child)
                    .ok_or_else(|| Error::CorruptFile(format!("dangling child id {child}")))?;
                if child_node.level.rank() >= node.level.rank() {
                    return Err(Error::CorruptFile(format!(
                        "child {child} does not descend in level under {id}"
                    )));
                }
                stack.push(*child);
            }
        }
        if reachable.len() != self.nodes.len() {
            return Err(Error::CorruptFile(format!(
                "{} of {} nodes reachable from root",
                reachable.len(),
                self.nodes.len()
            )));
        }
        Ok(())
    }
}

/// Beam traversal parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraversalConfig {
    /// Beam width `k`.
    pub beam_width: usize,
    /// Similarity threshold; children scoring below it are not retained.
    pub similarity_threshold: f64,
    /// Evidence budget `K`: leaves returned after final reranking.
    pub evidence_budget: usize,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig {
            beam_width: 2,
            similarity_threshold: 0.1,
            evidence_budget: 8,
        }
    }
}

impl TraversalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::invalid("beam width must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::invalid("similarity threshold must be in [0, 1]"));
        }
        if self.evidence_budget < 1 {
            return Err(Error::invalid("evidence budget must be >= 1"));
        }
        Ok(())
    }
}
