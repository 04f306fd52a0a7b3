//! Tree construction with document-level global-memory reuse.
//!
//! Per document: compute a content-addressed cache key and try a global-tier
//! read as the `tam_builder` role. On a hit the cached chunks and embeddings
//! are reused; on a miss the document is chunked, embedded, and written back.
//! Leaves are then clustered greedily into mid-level groups, mids into
//! high-level groups, and a root is created over the high nodes — or the
//! single node of a level is promoted to root when no sibling exists.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LeafSource, NodeId, NodeLevel, TamNode, TamTree};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::gateway::{AbstractionLevel, EmbeddingVector, ModelBackend, ModelRole};
use crate::smp::{MemoryLevel, MemoryPool};

/// Chunking and clustering parameters for tree construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Chunk window size in characters.
    pub chunk_size: usize,
    /// Overlap between consecutive windows, in characters.
    pub overlap: usize,
    /// Maximum children per mid- or high-level group.
    pub group_cap: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            chunk_size: 800,
            overlap: 200,
            group_cap: 8,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::invalid("chunk size must be positive"));
        }
        if self.overlap >= self.chunk_size {
            return Err(Error::invalid("overlap must be smaller than chunk size"));
        }
        if self.group_cap < 1 {
            return Err(Error::invalid("group cap must be >= 1"));
        }
        Ok(())
    }
}

/// Cached per-document build artifact stored in the global tier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedDoc {
    pub chunks: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
}

/// Content-addressed cache key over whitespace-normalized document text, so
/// re-ingestion order and incidental formatting do not defeat reuse.
pub fn cache_key(text: &str) -> String {
    let normalized: Vec<&str> = text.split_whitespace().collect();
    let mut hasher = Sha256::new();
    hasher.update(normalized.join(" ").as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
    format!("doc:{hex}")
}

/// Fixed-size character windows with overlap. Whole text when it fits in one
/// window; never returns an empty list for non-blank text.
pub fn chunk_text(text: &str, config: &BuildConfig) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    let stride = config.chunk_size - config.overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + config.chunk_size).min(chars.len());
        let piece: String = chars[start..end].iter().collect();
        if !piece.trim().is_empty() {
            chunks.push(piece);
        }
        if end == chars.len() {
            break;
        }
        start += stride;
    }
    chunks
}

/// Build the typed tree over `documents`, reusing chunk/embedding work cached
/// in the pool's global tier.
pub fn build_tree(
    documents: &[Document],
    config: &BuildConfig,
    backend: &dyn ModelBackend,
    pool: &mut MemoryPool,
) -> Result<TamTree> {
    config.validate()?;
    if documents.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    let mut seen_ids = std::collections::BTreeSet::new();
    for doc in documents {
        if doc.text.trim().is_empty() {
            return Err(Error::invalid(format!("document {} has empty text", doc.doc_id)));
        }
        if !seen_ids.insert(&doc.doc_id) {
            return Err(Error::invalid(format!("duplicate doc_id {}", doc.doc_id)));
        }
    }

    let mut nodes: Vec<TamNode> = Vec::new();
    let mut next_id = 0u32;

    // Leaves, with document-level cache reuse.
    let mut leaf_ids: Vec<NodeId> = Vec::new();
    for doc in documents {
        let key = cache_key(&doc.text);
        let cached = pool
            .read(ModelRole::TamBuilder, MemoryLevel::Global, &key)
            .and_then(|v| serde_json::from_value::<CachedDoc>(v).ok());
        let cached = match cached {
            Some(c) => c,
            None => {
                let chunks = chunk_text(&doc.text, config);
                if chunks.is_empty() {
                    return Err(Error::invalid(format!("document {} has empty text", doc.doc_id)));
                }
                let mut embeddings = Vec::with_capacity(chunks.len());
                for chunk in &chunks {
                    embeddings.push(backend.embed(chunk)?.components().to_vec());
                }
                let fresh = CachedDoc { chunks, embeddings };
                pool.write(
                    ModelRole::TamBuilder,
                    MemoryLevel::Global,
                    &key,
                    serde_json::to_value(&fresh)?,
                );
                fresh
            }
        };
        for (chunk_index, (chunk, embedding)) in
            cached.chunks.iter().zip(cached.embeddings.iter()).enumerate()
        {
            let id = NodeId(next_id);
            next_id += 1;
            nodes.push(TamNode {
                id,
                level: NodeLevel::Leaf,
                text: chunk.clone(),
                embedding: EmbeddingVector::normalized(embedding.clone())?,
                children: vec![],
                source: Some(LeafSource {
                    doc_id: doc.doc_id.clone(),
                    chunk_index,
                }),
            });
            leaf_ids.push(id);
        }
    }

    // Single-chunk corpus: the leaf itself is the root.
    if leaf_ids.len() == 1 {
        return TamTree::from_nodes(nodes, leaf_ids[0]);
    }

    // Mid level: semantic abstractions over leaf clusters.
    let mid_ids = summarize_level(
        &mut nodes,
        &mut next_id,
        &leaf_ids,
        NodeLevel::Mid,
        AbstractionLevel::Mid,
        config.group_cap,
        backend,
    )?;
    if mid_ids.len() == 1 {
        return TamTree::from_nodes(nodes, mid_ids[0]);
    }

    // High level: topic abstractions over mid clusters.
    let high_ids = summarize_level(
        &mut nodes,
        &mut next_id,
        &mid_ids,
        NodeLevel::High,
        AbstractionLevel::High,
        config.group_cap,
        backend,
    )?;
    if high_ids.len() == 1 {
        return TamTree::from_nodes(nodes, high_ids[0]);
    }

    // Multiple high nodes: summarize them all into the root.
    let high_texts: Vec<String> = high_ids
        .iter()
        .map(|id| nodes.iter().find(|n| n.id == *id).expect("high node exists").text.clone())
        .collect();
    let root_text = backend
        .summarize(&high_texts, AbstractionLevel::Root)
        .map_err(|e| Error::Build(format!("summarize failed for root node: {e}")))?;
    let root_embedding = backend.embed(&root_text)?;
    let root_id = NodeId(next_id);
    nodes.push(TamNode {
        id: root_id,
        level: NodeLevel::Root,
        text: root_text,
        embedding: root_embedding,
        children: high_ids,
        source: None,
    });
    TamTree::from_nodes(nodes, root_id)
}

/// Cluster `child_ids` greedily and create one summarized parent per group.
fn summarize_level(
    nodes: &mut Vec<TamNode>,
    next_id: &mut u32,
    child_ids: &[NodeId],
    level: NodeLevel,
    abstraction: AbstractionLevel,
    group_cap: usize,
    backend: &dyn ModelBackend,
) -> Result<Vec<NodeId>> {
    let groups = greedy_cluster(nodes, child_ids, group_cap);
    let mut parent_ids = Vec::with_capacity(groups.len());
    for group in groups {
        let texts: Vec<String> = group
            .iter()
            .map(|id| nodes.iter().find(|n| n.id == *id).expect("group member exists").text.clone())
            .collect();
        let prospective = NodeId(*next_id);
        let summary = backend.summarize(&texts, abstraction).map_err(|e| {
            Error::Build(format!(
                "summarize failed for {} node {prospective}: {e}",
                abstraction.tag()
            ))
        })?;
        let embedding = backend.embed(&summary)?;
        *next_id += 1;
        nodes.push(TamNode {
            id: prospective,
            level,
            text: summary,
            embedding,
            children: group,
            source: None,
        });
        parent_ids.push(prospective);
    }
    Ok(parent_ids)
}

/// Greedy agglomerative clustering: seed each group with the
/// highest-unassigned-norm node (ties by ascending id), absorb its nearest
/// unassigned neighbors by cosine (ties by ascending id) until the cap.
/// Every group therefore holds `min(cap, remaining)` members, so the group
/// count is `ceil(n / cap)`.
fn greedy_cluster(nodes: &[TamNode], ids: &[NodeId], cap: usize) -> Vec<Vec<NodeId>> {
    fn embedding_of(nodes: &[TamNode], id: NodeId) -> &EmbeddingVector {
        &nodes.iter().find(|n| n.id == id).expect("cluster member exists").embedding
    }
    let mut unassigned: Vec<NodeId> = ids.to_vec();
    unassigned.sort();
    let mut groups = Vec::new();
    while !unassigned.is_empty() {
        let seed = *unassigned
            .iter()
            .max_by(|a, b| {
                let na = embedding_of(nodes, **a).norm();
                let nb = embedding_of(nodes, **b).norm();
                na.partial_cmp(&nb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(a)) // ties: smaller id wins under max_by
            })
            .expect("unassigned not empty");
        unassigned.retain(|id| *id != seed);
        let seed_embedding = embedding_of(nodes, seed).clone();

        let mut scored: Vec<(NodeId, f64)> = unassigned
            .iter()
            .map(|id| (*id, seed_embedding.cosine(embedding_of(nodes, *id))))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut group = vec![seed];
        for (id, _) in scored.into_iter().take(cap.saturating_sub(1)) {
            group.push(id);
        }
        unassigned.retain(|id| !group.contains(id));
        group.sort();
        groups.push(group);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubBackend;
    use crate::smp::PoolConfig;

    fn docs(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| {
                Document::new(
                    format!("doc{i}"),
                    format!("Topic {i} article. Entity{i} relates to Subject{i} in region {i}."),
                )
            })
            .collect()
    }

    fn build(docs: &[Document], config: &BuildConfig, pool: &mut MemoryPool) -> TamTree {
        let backend = StubBackend::with_seed(42);
        build_tree(docs, config, &backend, pool).unwrap()
    }

    #[test]
    fn chunking_windows_and_overlap() {
        let config = BuildConfig {
            chunk_size: 10,
            overlap: 4,
            group_cap: 8,
        };
        let text = "abcdefghijklmnopqrst"; // 20 chars
        let chunks = chunk_text(text, &config);
        assert_eq!(chunks[0], "abcdefghij");
        assert_eq!(chunks[1], "ghijklmnop");
        // Every chunk except possibly the last has full window size.
        assert!(chunks[..chunks.len() - 1].iter().all(|c| c.chars().count() == 10));
        // Reconstruction: consecutive chunks agree on the overlap region.
        assert!(chunks[1].starts_with(&chunks[0][6..]));
    }

    #[test]
    fn single_chunk_corpus_yields_single_node_tree() {
        let mut pool = MemoryPool::new(PoolConfig::default());
        let tree = build(&docs(1), &BuildConfig::default(), &mut pool);
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.leaf_count(), 1);
        let root = tree.node(tree.root()).unwrap();
        assert!(root.is_leaf());
        assert_eq!(root.source.as_ref().unwrap().chunk_index, 0);
    }

    #[test]
    fn empty_corpus_is_invalid() {
        let mut pool = MemoryPool::new(PoolConfig::default());
        let backend = StubBackend::with_seed(42);
        assert!(matches!(
            build_tree(&[], &BuildConfig::default(), &backend, &mut pool),
            Err(Error::InvalidInput(_))
        ));
        assert!(build_tree(
            &[Document::new("d", "   ")],
            &BuildConfig::default(),
            &backend,
            &mut pool
        )
        .is_err());
    }

    // Greedy clustering oracle: groups fill to the cap, so the mid-level
    // count is ceil(leaves / cap).
    #[test]
    fn twelve_docs_cap_four_gives_three_mid_nodes() {
        let mut pool = MemoryPool::new(PoolConfig::default());
        let config = BuildConfig {
            group_cap: 4,
            ..BuildConfig::default()
        };
        let tree = build(&docs(12), &config, &mut pool);
        assert_eq!(tree.leaf_count(), 12);
        let counts = tree.level_counts();
        assert_eq!(counts.get("mid"), Some(&3usize));
        // ceil(12 / 4) == 3 independently recomputed.
        assert_eq!(12usize.div_ceil(4), 3);
    }

    #[test]
    fn second_ingest_of_same_doc_hits_global_cache() {
        let mut pool = MemoryPool::new(PoolConfig::default());
        let corpus = docs(3);
        let tree_a = build(&corpus, &BuildConfig::default(), &mut pool);
        let stats_after_first = pool.stats().global;
        assert_eq!(stats_after_first.hits, 0);
        assert_eq!(stats_after_first.lookups, 3);

        let tree_b = build(&corpus, &BuildConfig::default(), &mut pool);
        let stats_after_second = pool.stats().global;
        assert_eq!(stats_after_second.hits, 3);
        assert_eq!(stats_after_second.lookups, 6);
        // Reuse must not change the result.
        assert_eq!(tree_a.leaf_count(), tree_b.leaf_count());
        assert_eq!(tree_a.len(), tree_b.len());
    }

    #[test]
    fn cache_key_is_content_addressed() {
        assert_eq!(cache_key("hello   world"), cache_key("hello world"));
        assert_ne!(cache_key("hello world"), cache_key("hello worlds"));
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let mut pool = MemoryPool::new(PoolConfig::default());
        let backend = StubBackend::with_seed(42);
        let corpus = vec![Document::new("same", "alpha text"), Document::new("same", "beta text")];
        assert!(build_tree(&corpus, &BuildConfig::default(), &backend, &mut pool).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let config = BuildConfig {
            group_cap: 3,
            ..BuildConfig::default()
        };
        let mut pool_a = MemoryPool::new(PoolConfig::default());
        let mut pool_b = MemoryPool::new(PoolConfig::default());
        let tree_a = build(&docs(9), &config, &mut pool_a);
        let tree_b = build(&docs(9), &config, &mut pool_b);
        let nodes_a: Vec<_> = tree_a.nodes().collect();
        let nodes_b: Vec<_> = tree_b.nodes().collect();
        assert_eq!(nodes_a, nodes_b);
    }
}
