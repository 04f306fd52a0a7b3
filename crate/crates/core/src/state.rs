//! Shared per-query retrieval state and trace records.
//!
//! A query's whole lifecycle is captured by one [`RetrievalState`]: the plan,
//! the tree traversal path, the accumulated evidence, the latest verification
//! signal, and any reusable artifacts. The loop mutates it single-threaded;
//! finished queries are summarized into a [`QueryReport`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::ModelRole;
use crate::tam::{NodeId, NodeLevel};

// ---------------------------------------------------------------------------
// Evidence
// ---------------------------------------------------------------------------

/// Stable content-addressed identifier of one evidence chunk.
///
/// Derived from `(source doc id, chunk index)` so the same chunk deduplicates
/// across iterations and across cache reuse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceKey(String);

impl EvidenceKey {
    /// Hash `(doc_id, chunk_index)` into a short stable key.
    pub fn derive(doc_id: &str, chunk_index: usize) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(doc_id.as_bytes());
        hasher.update(b"#");
        hasher.update(chunk_index.to_string().as_bytes());
        let digest = hasher.finalize();
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        EvidenceKey(hex)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for EvidenceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// One retrieved chunk with its provenance and current score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub key: EvidenceKey,
    pub text: String,
    pub doc_id: String,
    /// Relevance score in `[0, 1]`; clamped on construction.
    pub score: f64,
}

impl EvidenceItem {
    pub fn new(doc_id: impl Into<String>, chunk_index: usize, text: impl Into<String>, score: f64) -> Self {
        let doc_id = doc_id.into();
        EvidenceItem {
            key: EvidenceKey::derive(&doc_id, chunk_index),
            text: text.into(),
            doc_id,
            score: score.clamp(0.0, 1.0),
        }
    }

    /// Same item with a replacement score (re-scoring by a later stage).
    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score.clamp(0.0, 1.0);
        self
    }
}

/// Key-unique collection of evidence items.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    items: Vec<EvidenceItem>,
}

impl EvidenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from items, rejecting duplicate keys. Order is preserved.
    pub fn from_items(items: Vec<EvidenceItem>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for item in &items {
            if !seen.insert(item.key.clone()) {
                return Err(Error::invalid(format!("duplicate evidence key {}", item.key)));
            }
        }
        Ok(EvidenceSet { items })
    }

    /// Union of two sets by evidence key.
    ///
    /// On a key collision the entry with the higher score wins; ties keep the
    /// `accumulated` entry. The result is ordered by descending score, then by
    /// insertion order (accumulated items before new ones).
    pub fn merge(accumulated: &EvidenceSet, new: &EvidenceSet) -> EvidenceSet {
        let mut items = accumulated.items.clone();
        for candidate in &new.items {
            match items.iter_mut().find(|i| i.key == candidate.key) {
                Some(existing) => {
                    if candidate.score > existing.score {
                        *existing = candidate.clone();
                    }
                }
                None => items.push(candidate.clone()),
            }
        }
        // Stable sort keeps insertion order among equal scores.
        items.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        EvidenceSet { items }
    }

    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = &EvidenceItem> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains_key(&self, key: &EvidenceKey) -> bool {
        self.items.iter().any(|i| &i.key == key)
    }

    /// Concatenated text of all items, used for entity-coverage checks.
    pub fn joined_text(&self) -> String {
        self.items.iter().map(|i| i.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

// ---------------------------------------------------------------------------
// Plan, path, verification
// ---------------------------------------------------------------------------

/// Coarse query category emitted by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    #[default]
    Factual,
    MultiHop,
    Summarization,
    Reasoning,
}

/// Decomposition of the user query into retrieval goals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub intent: String,
    pub sub_queries: Vec<String>,
    pub entities: Vec<String>,
    pub query_type: QueryType,
}

/// One beam decision during tree traversal: the node was retained with this
/// relevance score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: NodeId,
    pub level: NodeLevel,
    pub score: f64,
}

/// Record of a top-down traversal: every retained node plus the leaves the
/// beam reached, with the scoring-comparison count for cost accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraversalPath {
    pub steps: Vec<PathStep>,
    pub reached_leaves: Vec<NodeId>,
    /// Number of child scorings performed during the traversal.
    pub comparisons: usize,
}

/// Verifier verdict over the current evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Three-criterion verification outcome with its aggregate score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSignal {
    pub relevance: f64,
    pub sufficiency: f64,
    pub consistency: f64,
    /// Arithmetic mean of the three criteria.
    pub aggregate: f64,
    pub verdict: Verdict,
    pub reason: String,
}

impl VerificationSignal {
    /// Clamps each criterion into `[0, 1]` and computes the aggregate mean.
    pub fn new(relevance: f64, sufficiency: f64, consistency: f64, verdict: Verdict, reason: impl Into<String>) -> Self {
        let relevance = relevance.clamp(0.0, 1.0);
        let sufficiency = sufficiency.clamp(0.0, 1.0);
        let consistency = consistency.clamp(0.0, 1.0);
        VerificationSignal {
            relevance,
            sufficiency,
            consistency,
            aggregate: (relevance + sufficiency + consistency) / 3.0,
            verdict,
            reason: reason.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Retrieval state
// ---------------------------------------------------------------------------

/// Keys of reusable artifacts (cache entries, stored paths) touched while
/// serving the query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSet(BTreeSet<String>);

impl ArtifactSet {
    pub fn insert(&mut self, key: impl Into<String>) {
        self.0.insert(key.into());
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }
}

/// The per-query state tuple: plan, traversal path, evidence, verification
/// signal, and reusable artifacts, plus the loop iteration counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalState {
    /// The original user query; never rewritten.
    pub query: String,
    /// The query driving the current iteration (may be a rewrite).
    pub current_query: String,
    pub plan: Option<QueryPlan>,
    pub path: TraversalPath,
    pub evidence: EvidenceSet,
    pub verification: Option<VerificationSignal>,
    pub artifacts: ArtifactSet,
    /// Completed loop iterations; 0 before the first.
    pub iteration: u32,
}

impl RetrievalState {
    /// Fresh state for a query: empty plan/path/evidence, iteration 0, no
    /// verification.
    pub fn new(query: &str) -> Result<Self> {
        if query.trim().is_empty() {
            return Err(Error::invalid("query must be non-empty"));
        }
        Ok(RetrievalState {
            query: query.to_string(),
            current_query: query.to_string(),
            plan: None,
            path: TraversalPath::default(),
            evidence: EvidenceSet::new(),
            verification: None,
            artifacts: ArtifactSet::default(),
            iteration: 0,
        })
    }

    /// Advance to the next iteration, enforcing the configured maximum.
    pub fn begin_iteration(&mut self, t_max: u32) -> Result<u32> {
        if self.iteration >= t_max {
            return Err(Error::Precondition(format!(
                "iteration {} would exceed maximum {t_max}",
                self.iteration + 1
            )));
        }
        self.iteration += 1;
        Ok(self.iteration)
    }
}

// ---------------------------------------------------------------------------
// Trace records
// ---------------------------------------------------------------------------

/// One agent call: the rendered prompt, the raw reply, what was parsed out of
/// it, and token counts. Wall time is kept in memory for operators but is not
/// serialized, so report files stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub role: ModelRole,
    /// Which pipeline step issued the call (`plan`, `retrieve`, `verify`,
    /// `rewrite`, `rescore`, `answer`).
    pub step: String,
    /// Loop iteration the call belongs to; 0 for calls outside the loop.
    pub iteration: u32,
    pub prompt: String,
    pub reply: String,
    /// Structured fields recovered from the reply; present iff parsing
    /// succeeded.
    pub parsed: Option<serde_json::Value>,
    /// Describes the fallback applied when parsing failed.
    pub fallback: Option<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// How the query was routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingDecision {
    /// Leaf count under threshold: evidence went straight to the reasoner.
    Bypass,
    /// The full multi-agent loop ran.
    FullLoop,
}

/// Final per-query record: answer, traces, routing, token accounting, memory
/// counters, and the recovery flag (present only when a gold answer was
/// supplied).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryReport {
    pub query: String,
    pub answer: String,
    pub routing: RoutingDecision,
    /// Loop iterations executed (0 on the bypass path).
    pub iterations: u32,
    /// Tokens billed to the large model: reasoner-role calls only.
    pub large_model_tokens: u64,
    /// Tokens over all small-model agent calls.
    pub small_model_tokens: u64,
    pub mg_lookups: u64,
    pub mg_hits: u64,
    /// True iff a second iteration ran and the final answer matched gold
    /// under exact match. Absent when no gold answer was supplied.
    pub recovery: Option<bool>,
    /// True when evidence had to be cut to fit the prompt budget.
    pub evidence_truncated: bool,
    pub verifications: Vec<VerificationSignal>,
    pub evidence: Vec<EvidenceItem>,
    pub transcripts: Vec<AgentTranscript>,
}

impl QueryReport {
    /// Serialize as a single line for line-delimited report files.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(doc: &str, idx: usize, score: f64) -> EvidenceItem {
        EvidenceItem::new(doc, idx, format!("text {doc} {idx}"), score)
    }

    #[test]
    fn new_state_starts_empty() {
        let s = RetrievalState::new("who wrote X").unwrap();
        assert_eq!(s.iteration, 0);
        assert!(s.evidence.is_empty());
        assert!(s.plan.is_none());
        assert!(s.verification.is_none());
        assert!(s.artifacts.is_empty());
    }

    #[test]
    fn new_state_rejects_empty_query() {
        assert!(matches!(RetrievalState::new(""), Err(Error::InvalidInput(_))));
        assert!(matches!(RetrievalState::new("   "), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn begin_iteration_enforces_bound() {
        let mut s = RetrievalState::new("q").unwrap();
        assert_eq!(s.begin_iteration(2).unwrap(), 1);
        assert_eq!(s.begin_iteration(2).unwrap(), 2);
        assert!(matches!(s.begin_iteration(2), Err(Error::Precondition(_))));
    }

    #[test]
    fn merge_identity_on_empty() {
        let a = EvidenceSet::new();
        let b = EvidenceSet::from_items(vec![item("d1", 0, 0.9)]).unwrap();
        let merged = EvidenceSet::merge(&a, &b);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.items()[0].score, 0.9);
    }

    // Enumerates both argument orders: the higher score must win regardless.
    #[test]
    fn merge_collision_keeps_higher_score() {
        let low = EvidenceSet::from_items(vec![item("d1", 0, 0.4)]).unwrap();
        let high = EvidenceSet::from_items(vec![item("d1", 0, 0.8)]).unwrap();
        for (a, b) in [(&low, &high), (&high, &low)] {
            let merged = EvidenceSet::merge(a, b);
            assert_eq!(merged.len(), 1);
            assert_eq!(merged.items()[0].score, 0.8);
        }
    }

    #[test]
    fn merge_collision_tie_keeps_accumulated_entry() {
        let a = EvidenceSet::from_items(vec![EvidenceItem::new("d1", 0, "from accumulated", 0.5)]).unwrap();
        let b = EvidenceSet::from_items(vec![EvidenceItem::new("d1", 0, "from new", 0.5)]).unwrap();
        let merged = EvidenceSet::merge(&a, &b);
        assert_eq!(merged.items()[0].text, "from accumulated");
    }

    // Brute-force sort oracle: expected order is an independent full sort by
    // (descending score, insertion position).
    #[test]
    fn merge_orders_by_score_then_insertion() {
        let a = EvidenceSet::from_items(vec![item("k1", 0, 0.5), item("k2", 0, 0.3)]).unwrap();
        let b = EvidenceSet::from_items(vec![item("k3", 0, 0.7)]).unwrap();

        let mut oracle: Vec<(usize, EvidenceItem)> =
            a.items().iter().chain(b.items()).cloned().enumerate().map(|(i, it)| (i, it)).collect();
        oracle.sort_by(|(ia, x), (ib, y)| {
            y.score.partial_cmp(&x.score).unwrap().then(ia.cmp(ib))
        });
        let expected: Vec<String> = oracle.iter().map(|(_, it)| it.doc_id.clone()).collect();

        let merged = EvidenceSet::merge(&a, &b);
        let got: Vec<String> = merged.items().iter().map(|it| it.doc_id.clone()).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec!["k3", "k1", "k2"]);
    }

    #[test]
    fn evidence_keys_are_stable_and_distinct() {
        let a = EvidenceKey::derive("doc-a", 0);
        let b = EvidenceKey::derive("doc-a", 0);
        let c = EvidenceKey::derive("doc-a", 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn from_items_rejects_duplicate_keys() {
        let items = vec![item("d1", 0, 0.4), item("d1", 0, 0.6)];
        assert!(EvidenceSet::from_items(items).is_err());
    }

    #[test]
    fn scores_clamped_to_unit_interval() {
        assert_eq!(item("d", 0, 1.7).score, 1.0);
        assert_eq!(item("d", 0, -0.2).score, 0.0);
    }

    #[test]
    fn verification_aggregate_matches_example() {
        let v = VerificationSignal::new(1.0, 0.0, 0.0, Verdict::Fail, "off-topic");
        assert!((v.aggregate - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn transcript_serialization_skips_wall_time() {
        let t = AgentTranscript {
            role: ModelRole::Planner,
            step: "plan".into(),
            iteration: 1,
            prompt: "p".into(),
            reply: "r".into(),
            parsed: None,
            fallback: None,
            prompt_tokens: 1,
            completion_tokens: 1,
            wall_time_ms: 123.0,
        };
        let json = serde_json::to_string(&t).unwrap();
        assert!(!json.contains("wall_time"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_set(prefix: &'static str) -> impl Strategy<Value = EvidenceSet> {
            proptest::collection::vec((0usize..12, 0.0f64..=1.0), 0..8).prop_map(move |pairs| {
                let mut set = EvidenceSet::new();
                for (idx, score) in pairs {
                    let single =
                        EvidenceSet::from_items(vec![item(&format!("{prefix}{idx}"), 0, score)]).unwrap();
                    set = EvidenceSet::merge(&set, &single);
                }
                set
            })
        }

        proptest! {
            #[test]
            fn merge_is_idempotent(a in arb_set("d")) {
                let merged = EvidenceSet::merge(&a, &a);
                prop_assert_eq!(merged.items(), a.items());
            }

            // Commutative up to tie-breaks when key sets are disjoint and
            // scores are distinct.
            #[test]
            fn merge_commutative_for_disjoint_sets(a in arb_set("left"), b in arb_set("right")) {
                let ab = EvidenceSet::merge(&a, &b);
                let ba = EvidenceSet::merge(&b, &a);
                let mut keys_ab: Vec<_> = ab.items().iter().map(|i| i.key.clone()).collect();
                let mut keys_ba: Vec<_> = ba.items().iter().map(|i| i.key.clone()).collect();
                keys_ab.sort();
                keys_ba.sort();
                prop_assert_eq!(keys_ab, keys_ba);
                // Order agrees wherever scores are strictly decreasing.
                let strict = ab.items().windows(2).all(|w| w[0].score > w[1].score);
                if strict {
                    prop_assert_eq!(ab.items(), ba.items());
                }
            }

            #[test]
            fn aggregate_is_mean_of_criteria(r in 0.0f64..=1.0, s in 0.0f64..=1.0, c in 0.0f64..=1.0) {
                let v = VerificationSignal::new(r, s, c, Verdict::Pass, "");
                prop_assert!((v.aggregate - (r + s + c) / 3.0).abs() < 1e-9);
            }

            #[test]
            fn merge_never_produces_duplicate_keys(a in arb_set("x"), b in arb_set("y")) {
                let merged = EvidenceSet::merge(&a, &b);
                let mut keys: Vec<_> = merged.items().iter().map(|i| i.key.clone()).collect();
                keys.sort();
                keys.dedup();
                prop_assert_eq!(keys.len(), merged.len());
            }
        }
    }
}
