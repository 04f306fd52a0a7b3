//! Three-tier shared memory with role/tier permission enforcement.
//!
//! Tiers: global (cross-query reuse), task (shared within one query), and
//! agent-private (one store per owning role). Every operation is an access
//! request `(agent, level, op)` evaluated against a fixed role-level policy:
//! base table first, then inherited read permission (write permission on a
//! tier implies read), then the dynamic gate, which ships as a deny-all stub
//! behind a config flag. Denial is a value, not an error; denied operations
//! leave every tier's contents untouched.
//!
//! Capacity is bounded per tier with FIFO eviction: inserting into a full
//! tier evicts the entry with the oldest surviving insertion. `update`
//! replaces a value while preserving its insertion age; `write` counts as a
//! fresh insertion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::ModelRole;

/// Reserved key prefix marking gold-answer material. Global-tier writes with
/// such keys are always denied so evaluation labels can never leak into the
/// cross-query cache.
pub const GOLD_KEY_PREFIX: &str = "gold:";

/// The three memory tiers; agent-private stores are addressed by owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryLevel {
    Global,
    Task,
    AgentPrivate(ModelRole),
}

impl std::fmt::Display for MemoryLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MemoryLevel::Global => write!(f, "global"),
            MemoryLevel::Task => write!(f, "task"),
            MemoryLevel::AgentPrivate(owner) => write!(f, "agent[{owner}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryOp {
    Read,
    Write,
    Update,
}

impl std::fmt::Display for MemoryOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MemoryOp::Read => "read",
            MemoryOp::Write => "write",
            MemoryOp::Update => "update",
        };
        f.write_str(s)
    }
}

/// One memory operation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub agent: ModelRole,
    pub level: MemoryLevel,
    pub op: MemoryOp,
    pub key: String,
    pub value: Option<serde_json::Value>,
}

impl AccessRequest {
    pub fn read(agent: ModelRole, level: MemoryLevel, key: impl Into<String>) -> Self {
        AccessRequest {
            agent,
            level,
            op: MemoryOp::Read,
            key: key.into(),
            value: None,
        }
    }

    pub fn write(
        agent: ModelRole,
        level: MemoryLevel,
        key: impl Into<String>,
        value: serde_json::Value,
    ) -> Self {
        AccessRequest {
            agent,
            level,
            op: MemoryOp::Write,
            key: key.into(),
            value: Some(value),
        }
    }

    pub fn update(
        agent: ModelRole,
        level: MemoryLevel,
        key: impl Into<String>,
        value: serde_json::Value,
    ) -> Self {
        AccessRequest {
            agent,
            level,
            op: MemoryOp::Update,
            key: key.into(),
            value: Some(value),
        }
    }

    /// Reads carry no value; writes and updates must carry one.
    pub fn validate(&self) -> Result<()> {
        match (self.op, self.value.is_some()) {
            (MemoryOp::Read, true) => Err(Error::invalid("read request must not carry a value")),
            (MemoryOp::Write | MemoryOp::Update, false) => {
                Err(Error::invalid("write/update request must carry a value"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-tier access counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierStats {
    pub lookups: u64,
    pub hits: u64,
    pub writes: u64,
    pub denials: u64,
    pub evictions: u64,
}

impl TierStats {
    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / (self.lookups.max(1)) as f64
    }
}

/// Counters for all three tiers (agent-private aggregated over owners).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub global: TierStats,
    pub task: TierStats,
    pub agent_private: TierStats,
}

/// Tier capacities and the dynamic-gate flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    pub global_capacity: usize,
    pub task_capacity: usize,
    pub agent_capacity: usize,
    /// When true the dynamic gate is consulted for otherwise-undefined
    /// requests. The shipped gate denies everything.
    pub dynamic_gate: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            global_capacity: 100_000,
            task_capacity: 1_000,
            agent_capacity: 256,
            dynamic_gate: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    value: serde_json::Value,
    /// Insertion age; preserved by `update`, reset by `write`.
    inserted_seq: u64,
    access_count: u64,
    accessed_by: std::collections::BTreeSet<ModelRole>,
}

#[derive(Debug, Clone, Default)]
struct Tier {
    entries: BTreeMap<String, Entry>,
}

impl Tier {
    fn evict_oldest(&mut self) -> Option<String> {
        let oldest = self
            .entries
            .iter()
            .min_by_key(|(_, e)| e.inserted_seq)
            .map(|(k, _)| k.clone())?;
        self.entries.remove(&oldest);
        Some(oldest)
    }
}

/// Outcome of [`MemoryPool::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpOutcome {
    Read(Option<serde_json::Value>),
    Write(bool),
}

/// The three-tier pool.
pub struct MemoryPool {
    config: PoolConfig,
    global: Tier,
    task: Tier,
    agents: BTreeMap<ModelRole, Tier>,
    stats: MemoryStats,
    next_seq: u64,
}

impl MemoryPool {
    pub fn new(config: PoolConfig) -> Self {
        MemoryPool {
            config,
            global: Tier::default(),
            task: Tier::default(),
            agents: BTreeMap::new(),
            stats: MemoryStats::default(),
            next_seq: 0,
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    // -- policy -------------------------------------------------------------

    /// Fixed role-level base table. `None` means undefined, which falls
    /// through to inherited read permission and then the dynamic gate.
    fn base_permission(agent: ModelRole, level: MemoryLevel, op: MemoryOp) -> Option<bool> {
        use MemoryLevel::*;
        use MemoryOp::*;
        use ModelRole::*;
        match level {
            // Agent-private stores belong to exactly one role.
            AgentPrivate(owner) => Some(owner == agent),
            Global => match (agent, op) {
                (Planner | Navigator | Retriever, Read) => Some(true),
                (Reasoner, Write | Update) => Some(true),
                (TamBuilder, _) => Some(true),
                _ => None,
            },
            Task => match (agent, op) {
                (Planner | Navigator | Retriever | Verifier, _) => Some(true),
                (Reasoner, Read) => Some(true),
                _ => None,
            },
        }
    }

    /// A role holding write permission on a tier implicitly holds read.
    fn inherited_read_permission(agent: ModelRole, level: MemoryLevel) -> Option<bool> {
        match Self::base_permission(agent, level, MemoryOp::Write) {
            Some(true) => Some(true),
            _ => None,
        }
    }

    /// Optional dynamic gate; the shipped implementation denies everything.
    fn dynamic_gate(&self, _agent: ModelRole, _level: MemoryLevel, _op: MemoryOp) -> bool {
        false
    }

    /// Evaluate a request against the policy chain. Global-tier writes whose
    /// key is tagged as gold-answer material are always denied.
    pub fn permit(&self, request: &AccessRequest) -> bool {
        if request.level == MemoryLevel::Global
            && matches!(request.op, MemoryOp::Write | MemoryOp::Update)
            && request.key.starts_with(GOLD_KEY_PREFIX)
        {
            return false;
        }
        let mut permission = Self::base_permission(request.agent, request.level, request.op);
        if permission.is_none() && request.op == MemoryOp::Read {
            permission = Self::inherited_read_permission(request.agent, request.level);
        }
        if permission.is_none() && self.config.dynamic_gate {
            permission = Some(self.dynamic_gate(request.agent, request.level, request.op));
        }
        permission.unwrap_or(false)
    }

    // -- operations ----------------------------------------------------------

    /// Permission-checked read. Denials and misses both return `None`; the
    /// tier's counters tell them apart.
    pub fn read(&mut self, agent: ModelRole, level: MemoryLevel, key: &str) -> Option<serde_json::Value> {
        let request = AccessRequest::read(agent, level, key);
        if !self.permit(&request) {
            self.stats_mut(level).denials += 1;
            return None;
        }
        self.stats_mut(level).lookups += 1;
        let tier = self.tier_mut(level);
        match tier.entries.get_mut(key) {
            Some(entry) => {
                entry.access_count += 1;
                entry.accessed_by.insert(agent);
                let value = entry.value.clone();
                self.stats_mut(level).hits += 1;
                Some(value)
            }
            None => None,
        }
    }

    /// Permission-checked write (fresh insertion age) or update (preserved
    /// age). Returns whether the value was stored.
    pub fn write_op(
        &mut self,
        agent: ModelRole,
        level: MemoryLevel,
        op: MemoryOp,
        key: &str,
        value: serde_json::Value,
    ) -> bool {
        debug_assert!(matches!(op, MemoryOp::Write | MemoryOp::Update));
        let request = AccessRequest {
            agent,
            level,
            op,
            key: key.to_string(),
            value: Some(value.clone()),
        };
        if !self.permit(&request) {
            self.stats_mut(level).denials += 1;
            return false;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let capacity = self.capacity(level);
        let tier = self.tier_mut(level);
        match tier.entries.get_mut(key) {
            Some(entry) => {
                entry.value = value;
                if op == MemoryOp::Write {
                    entry.inserted_seq = seq;
                }
            }
            None => {
                if tier.entries.len() >= capacity && tier.evict_oldest().is_some() {
                    self.stats_mut(level).evictions += 1;
                }
                let tier = self.tier_mut(level);
                tier.entries.insert(
                    key.to_string(),
                    Entry {
                        value,
                        inserted_seq: seq,
                        access_count: 0,
                        accessed_by: Default::default(),
                    },
                );
            }
        }
        self.stats_mut(level).writes += 1;
        true
    }

    pub fn write(&mut self, agent: ModelRole, level: MemoryLevel, key: &str, value: serde_json::Value) -> bool {
        self.write_op(agent, level, MemoryOp::Write, key, value)
    }

    pub fn update(&mut self, agent: ModelRole, level: MemoryLevel, key: &str, value: serde_json::Value) -> bool {
        self.write_op(agent, level, MemoryOp::Update, key, value)
    }

    /// Run any request through the permission chain and the matching
    /// operation.
    pub fn apply(&mut self, request: &AccessRequest) -> OpOutcome {
        match request.op {
            MemoryOp::Read => OpOutcome::Read(self.read(request.agent, request.level, &request.key)),
            MemoryOp::Write | MemoryOp::Update => {
                let value = request.value.clone().unwrap_or(serde_json::Value::Null);
                OpOutcome::Write(self.write_op(
                    request.agent,
                    request.level,
                    request.op,
                    &request.key,
                    value,
                ))
            }
        }
    }

    /// Empty the task tier and every agent-private tier; the global tier and
    /// all counters are untouched.
    pub fn clear_query_scope(&mut self) {
        self.task.entries.clear();
        for tier in self.agents.values_mut() {
            tier.entries.clear();
        }
    }

    pub fn stats(&self) -> MemoryStats {
        self.stats
    }

    pub fn tier_len(&self, level: MemoryLevel) -> usize {
        self.tier_ref(level).map(|t| t.entries.len()).unwrap_or(0)
    }

    /// Total entries across every agent-private store.
    pub fn agent_private_len(&self) -> usize {
        self.agents.values().map(|t| t.entries.len()).sum()
    }

    /// Deterministic dump of a tier's contents for byte-identity checks.
    pub fn dump_tier(&self, level: MemoryLevel) -> serde_json::Value {
        let entries: BTreeMap<String, serde_json::Value> = self
            .tier_ref(level)
            .map(|t| {
                t.entries
                    .iter()
                    .map(|(k, e)| (k.clone(), e.value.clone()))
                    .collect()
            })
            .unwrap_or_default();
        serde_json::to_value(entries).expect("tier dump is serializable")
    }

    /// Keys of a tier ordered oldest insertion first, for eviction-order
    /// inspection.
    pub fn insertion_order(&self, level: MemoryLevel) -> Vec<String> {
        let mut keyed: Vec<(u64, String)> = self
            .tier_ref(level)
            .map(|t| {
                t.entries
                    .iter()
                    .map(|(k, e)| (e.inserted_seq, k.clone()))
                    .collect()
            })
            .unwrap_or_default();
        keyed.sort();
        keyed.into_iter().map(|(_, k)| k).collect()
    }

    fn capacity(&self, level: MemoryLevel) -> usize {
        match level {
            MemoryLevel::Global => self.config.global_capacity,
            MemoryLevel::Task => self.config.task_capacity,
            MemoryLevel::AgentPrivate(_) => self.config.agent_capacity,
        }
    }

    fn tier_mut(&mut self, level: MemoryLevel) -> &mut Tier {
        match level {
            MemoryLevel::Global => &mut self.global,
            MemoryLevel::Task => &mut self.task,
            MemoryLevel::AgentPrivate(owner) => self.agents.entry(owner).or_default(),
        }
    }

    fn tier_ref(&self, level: MemoryLevel) -> Option<&Tier> {
        match level {
            MemoryLevel::Global => Some(&self.global),
            MemoryLevel::Task => Some(&self.task),
            MemoryLevel::AgentPrivate(owner) => self.agents.get(&owner),
        }
    }

    fn stats_mut(&mut self, level: MemoryLevel) -> &mut TierStats {
        match level {
            MemoryLevel::Global => &mut self.stats.global,
            MemoryLevel::Task => &mut self.stats.task,
            MemoryLevel::AgentPrivate(_) => &mut self.stats.agent_private,
        }
    }

    // -- snapshot -------------------------------------------------------------

    /// Persist the global tier (insertion order preserved) for cross-run
    /// reuse experiments.
    pub fn save_global_snapshot(&self, path: &std::path::Path) -> Result<()> {
        let mut ordered: Vec<(&String, &Entry)> = self.global.entries.iter().collect();
        ordered.sort_by_key(|(_, e)| e.inserted_seq);
        let file = SnapshotFile {
            format_version: SNAPSHOT_VERSION,
            entries: ordered
                .into_iter()
                .map(|(k, e)| (k.clone(), e.value.clone()))
                .collect(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load a snapshot into the global tier, replacing its contents.
    pub fn load_global_snapshot(&mut self, path: &std::path::Path) -> Result<usize> {
        let raw = std::fs::read_to_string(path)?;
        let file: SnapshotFile = serde_json::from_str(&raw)
            .map_err(|e| Error::CorruptFile(format!("global snapshot: {e}")))?;
        if file.format_version > SNAPSHOT_VERSION {
            return Err(Error::VersionMismatch {
                found: file.format_version,
                supported: SNAPSHOT_VERSION,
            });
        }
        self.global.entries.clear();
        let count = file.entries.len();
        for (key, value) in file.entries {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.global.entries.insert(
                key,
                Entry {
                    value,
                    inserted_seq: seq,
                    access_count: 0,
                    accessed_by: Default::default(),
                },
            );
        }
        Ok(count)
    }
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    entries: Vec<(String, serde_json::Value)>,
}
