//! Top-down beam retrieval over the tree.
//!
//! The beam starts at the root. At each level every child of every non-leaf
//! beam node is scored by cosine between the query embedding and the child's
//! abstraction embedding; up to `k` children at or above the similarity
//! threshold are retained, falling back to the single best child when none
//! qualify. Leaves encountered along the way accumulate as candidates; when
//! the beam is all-leaf, candidates are deduplicated, rescored against the
//! query, and the top-K become the evidence set. Ties break by ascending
//! node id throughout, so identical inputs give identical outputs.

use super::{NodeId, TamTree, TraversalConfig};
use crate::error::{Error, Result};
use crate::gateway::ModelBackend;
use crate::state::{EvidenceItem, EvidenceSet, PathStep, TraversalPath};

/// Run one traversal. Returns the evidence (top-K candidate leaves by cosine)
/// and the path of beam decisions, including the child-scoring count.
pub fn retrieve(
    tree: &TamTree,
    query: &str,
    config: &TraversalConfig,
    backend: &dyn ModelBackend,
) -> Result<(EvidenceSet, TraversalPath)> {
    config.validate()?;
    if query.trim().is_empty() {
        return Err(Error::invalid("query must be non-empty"));
    }
    let query_embedding = backend.embed(query)?;
    if query_embedding.dim() != tree.embedding_dim() {
        return Err(Error::invalid(format!(
            "query embedding dim {} does not match tree dim {}",
            query_embedding.dim(),
            tree.embedding_dim()
        )));
    }

    let mut path = TraversalPath::default();
    let mut candidates: Vec<NodeId> = Vec::new();
    let mut beam: Vec<NodeId> = vec![tree.root()];

    loop {
        let has_non_leaf = beam.iter().any(|id| !tree.node(*id).expect("beam node exists").is_leaf());
        if !has_non_leaf {
            break;
        }
        // Leaves already in the beam are candidates.
        for id in &beam {
            if tree.node(*id).expect("beam node exists").is_leaf() {
                candidates.push(*id);
            }
        }
        // Score every child of every non-leaf beam node.
        let mut scored: Vec<(NodeId, f64)> = Vec::new();
        for id in &beam {
            let node = tree.node(*id).expect("beam node exists");
            if node.is_leaf() {
                continue;
            }
            for child_id in &node.children {
                let child = tree.node(*child_id).expect("child exists");
                let score = query_embedding.cosine(&child.embedding);
                path.comparisons += 1;
                scored.push((*child_id, score));
            }
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut retained: Vec<(NodeId, f64)> = scored
            .iter()
            .filter(|(_, s)| *s >= config.similarity_threshold)
            .take(config.beam_width)
            .cloned()
            .collect();
        if retained.is_empty() {
            // Threshold excluded everything: keep the single best child.
            retained = scored.into_iter().take(1).collect();
        }
        beam = retained.iter().map(|(id, _)| *id).collect();
        for (id, score) in retained {
            path.steps.push(PathStep {
                node: id,
                level: tree.node(id).expect("retained node exists").level,
                score,
            });
        }
    }
    candidates.extend(beam);

    // Deduplicate, rescore against the query, keep the top-K.
    let mut seen = std::collections::BTreeSet::new();
    candidates.retain(|id| seen.insert(*id));
    path.reached_leaves = candidates.clone();

    let mut ranked: Vec<(NodeId, f64)> = candidates
        .iter()
        .map(|id| {
            let leaf = tree.node(*id).expect("candidate exists");
            (*id, query_embedding.cosine(&leaf.embedding))
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(config.evidence_budget);

    let items: Vec<EvidenceItem> = ranked
        .into_iter()
        .map(|(id, score)| {
            let leaf = tree.node(id).expect("candidate exists");
            let source = leaf.source.as_ref().expect("leaf has source");
            EvidenceItem::new(&source.doc_id, source.chunk_index, leaf.text.clone(), score)
        })
        .collect();
    let evidence = EvidenceSet::from_items(items)?;
    Ok((evidence, path))
}
