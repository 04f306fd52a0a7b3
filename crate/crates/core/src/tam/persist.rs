//! Versioned on-disk index format.
//!
//! JSON container with a format version, the root id, and all nodes sorted by
//! id. Embeddings are 32-bit reals and round-trip exactly; node order and
//! struct field order are fixed, so identical trees serialize to identical
//! bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NodeId, TamNode, TamTree};
use crate::error::{Error, Result};

/// Current index format version.
pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TreeFile {
    format_version: u32,
    root: NodeId,
    nodes: Vec<TamNode>,
}

/// Write the tree to `path`.
pub fn save_tree(tree: &TamTree, path: &Path) -> Result<()> {
    let mut nodes: Vec<TamNode> = tree.nodes().cloned().collect();
    nodes.sort_by_key(|n| n.id);
    let file = TreeFile {
        format_version: TREE_FORMAT_VERSION,
        root: tree.root(),
        nodes,
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Read and validate a tree from `path`.
pub fn load_tree(path: &Path) -> Result<TamTree> {
    let raw = std::fs::read_to_string(path)?;
    let file: TreeFile = serde_json::from_str(&raw)
        .map_err(|e| Error::CorruptFile(format!("index file: {e}")))?;
    if file.format_version > TREE_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: file.format_version,
            supported: TREE_FORMAT_VERSION,
        });
    }
    TamTree::from_nodes(file.nodes, file.root)
}
