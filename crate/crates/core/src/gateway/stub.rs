//! Deterministic rule-driven backend for offline runs and tests.
//!
//! The embedder is a seeded character n-gram feature hasher, the summarizer
//! concatenates leading sentences under a length cap, and each chat role is
//! answered by a fixed rule over the rendered prompt. Every reply is a pure
//! function of (input, seed), so full pipeline runs are byte-reproducible.

use super::{
    AbstractionLevel, ChatReply, ChatRequest, EmbeddingVector, ModelBackend, ModelRole,
    whitespace_tokens,
};
use crate::error::{Error, Result};

/// Configuration of the stub backend.
#[derive(Debug, Clone)]
pub struct StubConfig {
    /// Seed mixed into the feature hash.
    pub seed: u64,
    /// Embedding dimension.
    pub embedding_dim: usize,
    /// Maximum length (chars) of a summary.
    pub summary_cap: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            seed: 42,
            embedding_dim: 256,
            summary_cap: 480,
        }
    }
}

/// Offline backend: hash embedder plus per-role reply rules.
#[derive(Debug, Clone)]
pub struct StubBackend {
    config: StubConfig,
}

impl StubBackend {
    pub fn new(config: StubConfig) -> Self {
        StubBackend { config }
    }

    pub fn with_seed(seed: u64) -> Self {
        StubBackend::new(StubConfig {
            seed,
            ..StubConfig::default()
        })
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    // -- embedding ---------------------------------------------------------

    /// Character n-gram (n = 1..=3) feature hashing with non-negative bucket
    /// weights, so textual overlap always yields cosine > 0.
    fn embed_features(&self, text: &str) -> Vec<f32> {
        let dim = self.config.embedding_dim;
        let mut buckets = vec![0.0f32; dim];
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        for n in 1..=3usize {
            if chars.len() < n {
                continue;
            }
            for window in chars.windows(n) {
                let mut hash = FNV_OFFSET ^ self.config.seed;
                for ch in window {
                    let mut buf = [0u8; 4];
                    for byte in ch.encode_utf8(&mut buf).as_bytes() {
                        hash ^= *byte as u64;
                        hash = hash.wrapping_mul(FNV_PRIME);
                    }
                }
                buckets[(hash % dim as u64) as usize] += 1.0;
            }
        }
        buckets
    }

    // -- chat rules --------------------------------------------------------

    fn reply_text(&self, request: &ChatRequest) -> Result<String> {
        if request.user.contains("Rewrite the search query") {
            return Ok(self.rewrite_rule(&request.user));
        }
        match request.role {
            ModelRole::Planner => Ok(self.planner_rule(&request.user)),
            ModelRole::Retriever => Ok(self.retriever_rule(&request.user)),
            ModelRole::Verifier => Ok(self.verifier_rule(&request.user)),
            ModelRole::Reasoner => Ok(self.reasoner_rule(&request.user)),
            ModelRole::Navigator => Ok(self.navigator_rule(&request.user)),
            other => Err(Error::invalid(format!("no stub chat rule for role {other}"))),
        }
    }

    fn planner_rule(&self, prompt: &str) -> String {
        let query = line_after(prompt, "Query:").unwrap_or_default();
        let entities = capitalized_entities(&query);
        let query_type = if entities.len() >= 2 { "multi_hop" } else { "factual" };
        format!(
            "INTENT: {query}\nSUB_QUERIES: {query}\nENTITIES: {}\nTYPE: {query_type}",
            entities.join(", ")
        )
    }

    fn retriever_rule(&self, prompt: &str) -> String {
        let query = line_after(prompt, "Query:").unwrap_or_default();
        let candidates = candidate_blocks(prompt);
        let k = prompt
            .rfind("max ")
            .and_then(|i| {
                let digits: String =
                    prompt[i + 4..].chars().take_while(|c| c.is_ascii_digit()).collect();
                digits.parse::<usize>().ok()
            })
            .unwrap_or(candidates.len().max(1));

        let query_vec = self.embed_features(&query);
        let query_emb = EmbeddingVector::normalized(query_vec).ok();
        let mut scored: Vec<(usize, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let score = match (&query_emb, EmbeddingVector::normalized(self.embed_features(text)).ok()) {
                    (Some(q), Some(c)) => q.cosine(&c).max(0.0),
                    _ => 0.0,
                };
                (i + 1, score)
            })
            .collect();

        let mut lines: Vec<String> = scored
            .iter()
            .map(|(i, s)| format!("CANDIDATE_{i}: {s:.3}"))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let selected: Vec<String> =
            scored.iter().take(k).map(|(i, _)| i.to_string()).collect();
        lines.push(format!("SELECTED: {}", selected.join(", ")));
        lines.join("\n")
    }

    fn verifier_rule(&self, prompt: &str) -> String {
        let query = line_after(prompt, "Query:").unwrap_or_default();
        let evidence = block_after(prompt, "Retrieved Evidence:").unwrap_or_default();
        let evidence_lower = evidence.to_lowercase();
        let entities = capitalized_entities(&query);
        let missing: Vec<&String> = entities
            .iter()
            .filter(|e| !evidence_lower.contains(&e.to_lowercase()))
            .collect();
        if missing.is_empty() {
            "RELEVANCE: 1.0\nSUFFICIENCY: 1.0\nCONSISTENCY: 1.0\nVERDICT: PASS\nREASON: all entities covered"
                .to_string()
        } else {
            let list = missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
            format!(
                "RELEVANCE: 0.0\nSUFFICIENCY: 0.0\nCONSISTENCY: 0.0\nVERDICT: FAIL\nREASON: missing: {list}"
            )
        }
    }

    fn reasoner_rule(&self, prompt: &str) -> String {
        let evidence = block_after(prompt, "Evidence:").unwrap_or_default();
        // Evidence is rendered highest-scored first; the first marked answer
        // span wins.
        for line in evidence.lines() {
            if let Some(span) = answer_span(line) {
                return span;
            }
        }
        "insufficient evidence".to_string()
    }

    fn navigator_rule(&self, prompt: &str) -> String {
        let query = line_after(prompt, "Query:").unwrap_or_default();
        let query_words: Vec<String> = content_words(&query);
        let paths = path_blocks(prompt);
        let mut lines = Vec::new();
        for (i, desc) in paths.iter().enumerate() {
            let lower = desc.to_lowercase();
            let hit = query_words.iter().any(|w| lower.contains(w));
            lines.push(format!("PATH_SCORE_{}: {:.1}", i + 1, if hit { 1.0 } else { 0.0 }));
        }
        lines.push("RATIONALE: token overlap".to_string());
        lines.join("\n")
    }

    fn rewrite_rule(&self, prompt: &str) -> String {
        let previous = line_after(prompt, "Previous query:").unwrap_or_default();
        let feedback = line_after(prompt, "Verifier feedback:").unwrap_or_default();
        let missing = feedback
            .to_lowercase()
            .find("missing:")
            .map(|i| feedback[i + "missing:".len()..].to_string())
            .unwrap_or_default();
        let additions: Vec<String> = missing
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if additions.is_empty() {
            format!("REWRITTEN: {previous} details")
        } else {
            format!("REWRITTEN: {previous} {}", additions.join(" "))
        }
    }
}

impl ModelBackend for StubBackend {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut features = self.embed_features(text);
        if features.iter().all(|x| *x == 0.0) {
            // Pathological input (no n-grams); pin a single bucket.
            features[0] = 1.0;
        }
        EmbeddingVector::normalized(features)
    }

    fn summarize(&self, children: &[String], level: AbstractionLevel) -> Result<String> {
        if children.is_empty() {
            return Err(Error::invalid("cannot summarize an empty child list"));
        }
        let mut parts = vec![format!("[{}]", level.tag())];
        for child in children {
            let sentence = first_sentence(child);
            if !sentence.is_empty() {
                parts.push(sentence);
            }
        }
        let joined = parts.join(" ");
        let capped: String = joined.chars().take(self.config.summary_cap).collect();
        Ok(capped)
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatReply> {
        let text = self.reply_text(request)?;
        let prompt_tokens = whitespace_tokens(request.system.as_deref().unwrap_or(""))
            + whitespace_tokens(&request.user);
        let completion_tokens = whitespace_tokens(&text);
        Ok(ChatReply {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

// ---------------------------------------------------------------------------
// Prompt scraping helpers shared by the rules
// ---------------------------------------------------------------------------

/// Rest of the first line starting with `marker`, trimmed.
fn line_after(text: &str, marker: &str) -> Option<String> {
    text.lines().find_map(|line| {
        line.trim_start()
            .strip_prefix(marker)
            .map(|rest| rest.trim().to_string())
    })
}

/// Text between the line equal to `marker` and the next blank line that is
/// followed by a non-indented section, trimmed. Falls back to everything
/// after the marker.
fn block_after(text: &str, marker: &str) -> Option<String> {
    let start = text.find(marker)? + marker.len();
    let rest = &text[start..];
    let end = rest.find("\n\n").unwrap_or(rest.len());
    Some(rest[..end].trim().to_string())
}

/// Candidate texts in `CANDIDATE_<n>:` blocks, in numbering order.
fn candidate_blocks(prompt: &str) -> Vec<String> {
    numbered_blocks(prompt, "CANDIDATE_")
}

/// Path descriptions in `PATH_<n>:` blocks, in numbering order.
fn path_blocks(prompt: &str) -> Vec<String> {
    numbered_blocks(prompt, "PATH_")
}

fn numbered_blocks(prompt: &str, prefix: &str) -> Vec<String> {
    let mut blocks: Vec<(usize, String)> = Vec::new();
    let mut current: Option<(usize, Vec<String>)> = None;
    for line in prompt.lines() {
        let trimmed = line.trim_start();
        let header = trimmed.strip_prefix(prefix).and_then(|rest| {
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            let after = &rest[digits.len()..];
            if !digits.is_empty() && after.starts_with(':') {
                Some((digits.parse::<usize>().ok()?, after[1..].trim().to_string()))
            } else {
                None
            }
        });
        if let Some((n, inline)) = header {
            if let Some((idx, lines)) = current.take() {
                blocks.push((idx, lines.join("\n").trim().to_string()));
            }
            let mut lines = Vec::new();
            if !inline.is_empty() {
                lines.push(inline);
            }
            current = Some((n, lines));
        } else if let Some((_, lines)) = current.as_mut() {
            if trimmed.is_empty() && !lines.is_empty() {
                let (idx, lines) = current.take().unwrap();
                blocks.push((idx, lines.join("\n").trim().to_string()));
            } else if !trimmed.is_empty() {
                lines.push(trimmed.to_string());
            }
        }
    }
    if let Some((idx, lines)) = current.take() {
        blocks.push((idx, lines.join("\n").trim().to_string()));
    }
    blocks.sort_by_key(|(idx, _)| *idx);
    blocks.into_iter().map(|(_, text)| text).collect()
}

/// `A: <span>` marker in a line, where `A:` sits at the start or after
/// whitespace or a bracket.
fn answer_span(line: &str) -> Option<String> {
    let bytes = line.as_bytes();
    let mut search_from = 0;
    while let Some(rel) = line[search_from..].find("A:") {
        let i = search_from + rel;
        let boundary = i == 0
            || bytes[i - 1].is_ascii_whitespace()
            || bytes[i - 1] == b']'
            || bytes[i - 1] == b')';
        if boundary {
            let span = line[i + 2..].trim();
            if !span.is_empty() {
                return Some(span.to_string());
            }
        }
        search_from = i + 2;
    }
    None
}

fn first_sentence(text: &str) -> String {
    let trimmed = text.trim();
    for (i, ch) in trimmed.char_indices() {
        if ch == '.' || ch == '!' || ch == '?' {
            return trimmed[..i + ch.len_utf8()].to_string();
        }
    }
    trimmed.to_string()
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "did", "do", "does", "how", "in", "is", "it", "of", "on", "or",
    "the", "to", "was", "were", "what", "when", "where", "which", "who", "whom", "whose", "why",
];

/// Maximal runs of capitalized tokens, joined into entity phrases.
///
/// This is the shared entity rule of the stub planner and stub verifier.
pub fn capitalized_entities(text: &str) -> Vec<String> {
    let mut entities = Vec::new();
    let mut run: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let token: String = raw
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_string();
        let qualifies = token.chars().next().map(|c| c.is_uppercase()).unwrap_or(false)
            && token.chars().count() >= 2
            && !STOP_WORDS.contains(&token.to_lowercase().as_str());
        if qualifies {
            run.push(token);
        } else if !run.is_empty() {
            entities.push(run.join(" "));
            run.clear();
        }
    }
    if !run.is_empty() {
        entities.push(run.join(" "));
    }
    let mut seen = std::collections::BTreeSet::new();
    entities.retain(|e| seen.insert(e.clone()));
    entities
}

/// Lowercased non-stopword tokens of length >= 3.
fn content_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| t.chars().count() >= 3 && !STOP_WORDS.contains(&t.as_str()))
        .collect()
}
