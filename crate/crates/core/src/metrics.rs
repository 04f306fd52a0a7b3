//! Answer-quality metrics, confidence intervals, token bins, and aggregate
//! pipeline statistics.
//!
//! Normalization contract: lowercase, delete ASCII punctuation (hyphenated
//! compounds collapse into one token: "Asia-Pacific" -> "asiapacific"),
//! remove the articles a/an/the, collapse whitespace, split. Exact match
//! compares normalized token sequences; token F1 uses multiset overlap;
//! lenient accuracy is substring containment between the normalized joined
//! strings, in either direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Normalization and answer metrics
// ---------------------------------------------------------------------------

/// Normalize an answer string into comparison tokens.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn normalized_joined(text: &str) -> String {
    normalize_answer(text).join(" ")
}

/// Token-level F1 over normalized multiset overlap. Both empty -> 1, one
/// empty -> 0.
pub fn token_f1(gold: &str, pred: &str) -> f64 {
    let gold_tokens = normalize_answer(gold);
    let pred_tokens = normalize_answer(pred);
    if gold_tokens.is_empty() && pred_tokens.is_empty() {
        return 1.0;
    }
    if gold_tokens.is_empty() || pred_tokens.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for tok in &gold_tokens {
        *counts.entry(tok.as_str()).or_insert(0i64) += 1;
    }
    let mut overlap = 0i64;
    for tok in &pred_tokens {
        if let Some(count) = counts.get_mut(tok.as_str()) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match of normalized token sequences.
pub fn exact_match(gold: &str, pred: &str) -> u8 {
    (normalize_answer(gold) == normalize_answer(pred)) as u8
}

/// Substring-style accuracy: 1 iff either normalized string contains the
/// other. Diagnostic only.
pub fn lenient_accuracy(gold: &str, pred: &str) -> u8 {
    let g = normalized_joined(gold);
    let p = normalized_joined(pred);
    if g.is_empty() && p.is_empty() {
        return 1;
    }
    if g.is_empty() || p.is_empty() {
        return 0;
    }
    (g.contains(&p) || p.contains(&g)) as u8
}

/// Levenshtein distance over chars.
fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut current = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        current[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitution = prev[j] + (ca != cb) as usize;
            current[j + 1] = substitution.min(prev[j + 1] + 1).min(current[j] + 1);
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

/// Thresholded normalized Levenshtein similarity. Comparison is
/// case-insensitive with collapsed whitespace; scores below the threshold
/// clip to 0.
pub fn anls(gold: &str, pred: &str, threshold: f64) -> f64 {
    let g: Vec<char> = gold.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ").chars().collect();
    let p: Vec<char> = pred.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ").chars().collect();
    let longest = g.len().max(p.len());
    if longest == 0 {
        return 1.0;
    }
    let similarity = 1.0 - levenshtein(&g, &p) as f64 / longest as f64;
    if similarity >= threshold {
        similarity
    } else {
        0.0
    }
}

/// Default ANLS clipping threshold.
pub const ANLS_THRESHOLD: f64 = 0.5;

// ---------------------------------------------------------------------------
// Confidence intervals
// ---------------------------------------------------------------------------

/// Normal-approximation binomial CI half-width, `z * sqrt(p(1-p)/n)`.
/// Supported levels: 0.90, 0.95 (z = 1.96), 0.99.
pub fn binomial_ci(p: f64, n: u64, level: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p must be in [0, 1]"));
    }
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let z = if (level - 0.95).abs() < 1e-12 {
        1.96
    } else if (level - 0.90).abs() < 1e-12 {
        1.645
    } else if (level - 0.99).abs() < 1e-12 {
        2.576
    } else {
        return Err(Error::invalid(format!("unsupported confidence level {level}")));
    };
    Ok(z * (p * (1.0 - p) / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Token bins
// ---------------------------------------------------------------------------

/// Bin edges over large-model token counts.
pub const BIN_EDGES: [u64; 7] = [300, 500, 800, 1200, 1800, 2500, 5000];

/// Bin labels in ascending order. Edges are left-inclusive: a count equal to
/// an edge falls into the bin starting at that edge.
pub const BIN_LABELS: [&str; 8] = [
    "<300",
    "300-500",
    "500-800",
    "800-1200",
    "1200-1800",
    "1800-2500",
    "2500-5000",
    "5000+",
];

/// Map a token count to its bin label.
pub fn bin_tokens(count: u64) -> &'static str {
    for (i, edge) in BIN_EDGES.iter().enumerate() {
        if count < *edge {
            return BIN_LABELS[i];
        }
    }
    BIN_LABELS[7]
}

// ---------------------------------------------------------------------------
// Per-query records and aggregation
// ---------------------------------------------------------------------------

/// Per-query evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub em: u8,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
    pub lenient: u8,
    pub large_model_tokens: u64,
    pub token_bin: String,
    pub recovered: bool,
    pub bypassed: bool,
}

impl MetricRecord {
    /// Score a prediction against gold plus aliases (best alias wins per
    /// metric).
    pub fn score(
        gold: &str,
        aliases: &[String],
        pred: &str,
        with_anls: bool,
        large_model_tokens: u64,
        recovered: bool,
        bypassed: bool,
    ) -> MetricRecord {
        let mut variants: Vec<&str> = vec![gold];
        variants.extend(aliases.iter().map(String::as_str));
        let em = variants.iter().map(|g| exact_match(g, pred)).max().unwrap_or(0);
        let f1 = variants
            .iter()
            .map(|g| token_f1(g, pred))
            .fold(0.0f64, f64::max);
        let lenient = variants.iter().map(|g| lenient_accuracy(g, pred)).max().unwrap_or(0);
        let anls_score = with_anls.then(|| {
            variants
                .iter()
                .map(|g| anls(g, pred, ANLS_THRESHOLD))
                .fold(0.0f64, f64::max)
        });
        MetricRecord {
            em,
            f1,
            anls: anls_score,
            lenient,
            large_model_tokens,
            token_bin: bin_tokens(large_model_tokens).to_string(),
            recovered,
            bypassed,
        }
    }
}

/// Share and quality of one token bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub label: String,
    pub count: u64,
    pub share_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
}

/// Aggregate over one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: u64,
    pub em: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
    pub lenient: f64,
    /// 95% binomial CI half-width for EM.
    pub em_ci_half: f64,
    pub mean_large_model_tokens: f64,
    pub bins: Vec<BinSummary>,
    pub recovery_rate: f64,
    pub bypass_rate: f64,
    pub mg_lookups: u64,
    pub mg_hits: u64,
    pub mg_hit_rate: f64,
    pub skipped_records: u64,
}

/// Fold per-query records into the run summary. Bin shares cover every
/// record, so they sum to 100% (within float noise).
pub fn aggregate_report(
    records: &[MetricRecord],
    mg_lookups: u64,
    mg_hits: u64,
    skipped_records: u64,
) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty record set"));
    }
    let n = records.len() as u64;
    let mean = |f: &dyn Fn(&MetricRecord) -> f64| -> f64 {
        records.iter().map(|r| f(r)).sum::<f64>() / n as f64
    };
    let em = mean(&|r| r.em as f64);
    let f1 = mean(&|r| r.f1);
    let lenient = mean(&|r| r.lenient as f64);
    let with_anls: Vec<f64> = records.iter().filter_map(|r| r.anls).collect();
    let anls_mean = if with_anls.is_empty() {
        None
    } else {
        Some(with_anls.iter().sum::<f64>() / with_anls.len() as f64)
    };

    let mut bins = Vec::with_capacity(BIN_LABELS.len());
    for label in BIN_LABELS {
        let members: Vec<&MetricRecord> =
            records.iter().filter(|r| r.token_bin == label).collect();
        let count = members.len() as u64;
        let bin_em = if members.is_empty() {
            None
        } else {
            Some(members.iter().map(|r| r.em as f64).sum::<f64>() / members.len() as f64)
        };
        bins.push(BinSummary {
            label: label.to_string(),
            count,
            share_pct: count as f64 / n as f64 * 100.0,
            em: bin_em,
        });
    }

    Ok(EvalSummary {
        n,
        em,
        f1,
        anls: anls_mean,
        lenient,
        em_ci_half: binomial_ci(em, n, 0.95)?,
        mean_large_model_tokens: mean(&|r| r.large_model_tokens as f64),
        bins,
        recovery_rate: records.iter().filter(|r| r.recovered).count() as f64 / n as f64,
        bypass_rate: records.iter().filter(|r| r.bypassed).count() as f64 / n as f64,
        mg_lookups,
        mg_hits,
        mg_hit_rate: mg_hits as f64 / mg_lookups.max(1) as f64,
        skipped_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_answer("The United States of America"),
            vec!["united", "states", "of", "america"]
        );
        assert_eq!(normalize_answer(""), Vec::<String>::new());
        assert_eq!(normalize_answer("Pacific War."), normalize_answer("pacific war"));
        // Hyphenated compounds collapse into a single token.
        assert_eq!(normalize_answer("the Asia-Pacific War"), vec!["asiapacific", "war"]);
    }

    #[test]
    fn token_f1_reference_pairs() {
        assert!((token_f1("the Asia-Pacific War", "Pacific War") - 0.500).abs() < 1e-3);
        assert!((token_f1("The United States of America", "United States") - 0.667).abs() < 1e-3);
        assert!((token_f1("Brian Patrick Friel", "Brian Friel") - 0.800).abs() < 1e-3);
        assert!((token_f1("The Savannah River Site", "Savannah River Plant") - 0.667).abs() < 1e-3);
    }

    #[test]
    fn f1_empty_conventions() {
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("x", ""), 0.0);
        assert_eq!(token_f1("", "x"), 0.0);
        // Articles-only gold normalizes to empty.
        assert_eq!(token_f1("the", "the"), 1.0);
    }

    #[test]
    fn em_and_lenient_reference_pairs() {
        assert_eq!(exact_match("the Asia-Pacific War", "Pacific War"), 0);
        assert_eq!(lenient_accuracy("the Asia-Pacific War", "Pacific War"), 1);
        assert_eq!(exact_match("The Savannah River Site", "Savannah River Plant"), 0);
        assert_eq!(lenient_accuracy("The Savannah River Site", "Savannah River Plant"), 0);
        assert!((token_f1("The Savannah River Site", "Savannah River Plant") - 0.667).abs() < 1e-3);
        assert_eq!(lenient_accuracy("Brian Patrick Friel", "Brian Friel"), 0);
        assert_eq!(exact_match("same answer", "Same Answer."), 1);
        assert_eq!(lenient_accuracy("same answer", "same answer"), 1);
    }

    // Brute-force Levenshtein oracle: exhaustive recursion with memoization,
    // independent of the DP in the implementation.
    fn lev_oracle(a: &str, b: &str) -> usize {
        fn rec(
            a: &[char],
            b: &[char],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(v) = memo.get(&(i, j)) {
                return *v;
            }
            let result = if a[i] == b[j] {
                rec(a, b, i + 1, j + 1, memo)
            } else {
                1 + rec(a, b, i + 1, j + 1, memo)
                    .min(rec(a, b, i + 1, j, memo))
                    .min(rec(a, b, i, j + 1, memo))
            };
            memo.insert((i, j), result);
            result
        }
        let av: Vec<char> = a.chars().collect();
        let bv: Vec<char> = b.chars().collect();
        rec(&av, &bv, 0, 0, &mut std::collections::HashMap::new())
    }

    #[test]
    fn anls_examples() {
        assert_eq!(anls("identical", "identical", ANLS_THRESHOLD), 1.0);
        // distance 1 over length 3.
        assert_eq!(lev_oracle("abc", "abd"), 1);
        assert!((anls("abc", "abd", ANLS_THRESHOLD) - 2.0 / 3.0).abs() < 1e-3);
        assert_eq!(anls("abc", "xyz", ANLS_THRESHOLD), 0.0);
        assert_eq!(anls("Mixed  Case", "mixed case", ANLS_THRESHOLD), 1.0);
        assert_eq!(anls("", "", ANLS_THRESHOLD), 1.0);
    }

    #[test]
    fn binomial_ci_reference_values() {
        let longbench = binomial_ci(0.362, 600, 0.95).unwrap();
        assert!((longbench - 0.0384).abs() < 0.0005, "got {longbench}");
        let hotpot = binomial_ci(0.516, 7405, 0.95).unwrap();
        assert!((hotpot - 0.0114).abs() < 0.0003, "got {hotpot}");
        assert_eq!(binomial_ci(0.0, 100, 0.95).unwrap(), 0.0);
        assert!(binomial_ci(1.2, 100, 0.95).is_err());
        assert!(binomial_ci(0.5, 0, 0.95).is_err());
        assert!(binomial_ci(0.5, 10, 0.42).is_err());
    }

    #[test]
    fn bin_boundaries_left_inclusive() {
        assert_eq!(bin_tokens(478), "300-500");
        assert!(478 < 500);
        assert_eq!(bin_tokens(299), "<300");
        assert_eq!(bin_tokens(300), "300-500");
        assert_eq!(bin_tokens(500), "500-800");
        assert_eq!(bin_tokens(4999), "2500-5000");
        assert_eq!(bin_tokens(5000), "5000+");
        assert_eq!(bin_tokens(0), "<300");
    }

    fn record(tokens: u64, em: u8) -> MetricRecord {
        MetricRecord {
            em,
            f1: em as f64,
            anls: None,
            lenient: em,
            large_model_tokens: tokens,
            token_bin: bin_tokens(tokens).to_string(),
            recovered: false,
            bypassed: false,
        }
    }

    // Counting oracle: three records in three different bins each take a
    // 33.3% share.
    #[test]
    fn aggregate_bin_shares() {
        let records = vec![record(100, 1), record(400, 0), record(900, 1)];
        let summary = aggregate_report(&records, 10, 5, 0).unwrap();
        let total: f64 = summary.bins.iter().map(|b| b.share_pct).sum();
        assert!((total - 100.0).abs() < 0.1);
        let occupied: Vec<&BinSummary> = summary.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 3);
        for bin in occupied {
            assert!((bin.share_pct - 100.0 / 3.0).abs() < 0.1);
        }
        assert!((summary.mg_hit_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_uses_best_alias() {
        let rec = MetricRecord::score(
            "the Asia-Pacific War",
            &["Pacific War".to_string()],
            "Pacific War",
            false,
            120,
            false,
            false,
        );
        assert_eq!(rec.em, 1);
        assert_eq!(rec.f1, 1.0);
        assert_eq!(rec.token_bin, "<300");
    }

    // Exact-binomial (Clopper-Pearson) oracle via bisection on the binomial
    // CDF, computed with log-sum-exp so large n stays stable.
    mod ci_oracle {
        fn log_binom_cdf(k: u64, n: u64, p: f64) -> f64 {
            // log of sum_{i=0..k} C(n,i) p^i (1-p)^(n-i)
            let logp = p.ln();
            let log1p = (1.0 - p).ln();
            let mut log_term = n as f64 * log1p; // i = 0
            let mut terms = vec![log_term];
            for i in 0..k {
                // ratio term(i+1)/term(i) = (n-i)/(i+1) * p/(1-p)
                log_term += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + logp - log1p;
                terms.push(log_term);
            }
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        }

        fn solve_p(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
            // f is monotone; find root of f(p) = 0 by bisection.
            for _ in 0..80 {
                let mid = (lo + hi) / 2.0;
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (lo + hi) / 2.0
        }

        /// Clopper-Pearson interval half-width at 95% for k successes of n.
        pub fn exact_half_width(k: u64, n: u64) -> f64 {
            let alpha = 0.05;
            let lower = if k == 0 {
                0.0
            } else {
                // P(X >= k | p) = alpha/2  <=>  CDF(k-1; n, p) = 1 - alpha/2
                solve_p(0.0, 1.0, |p| {
                    log_binom_cdf(k - 1, n, p).exp() - (1.0 - alpha / 2.0)
                })
            };
            let upper = if k == n {
                1.0
            } else {
                // P(X <= k | p) = alpha/2
                solve_p(0.0, 1.0, |p| log_binom_cdf(k, n, p).exp() - alpha / 2.0)
            };
            (upper - lower) / 2.0
        }
    }

    #[test]
    fn normal_ci_tracks_exact_binomial_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n: u64 = rng.random_range(500..4000);
            let k: u64 = rng.random_range((n as f64 * 0.2) as u64..=(n as f64 * 0.8) as u64);
            let p = k as f64 / n as f64;
            let approx = binomial_ci(p, n, 0.95).unwrap();
            let exact = ci_oracle::exact_half_width(k, n);
            assert!(
                (approx - exact).abs() < 0.002,
                "n={n} k={k}: normal {approx} vs exact {exact}"
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn self_match_is_perfect(text in "[a-zA-Z][a-zA-Z0-9 \\-]{0,40}") {
                prop_assume!(!normalize_answer(&text).is_empty());
                prop_assert_eq!(exact_match(&text, &text), 1);
                prop_assert!((token_f1(&text, &text) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn em_implies_full_f1(a in "[a-z ]{0,20}", b in "[a-z ]{0,20}") {
                if exact_match(&a, &b) == 1 {
                    prop_assert!((token_f1(&a, &b) - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn anls_range_under_threshold(a in "[a-z]{0,12}", b in "[a-z]{0,12}") {
                let score = anls(&a, &b, ANLS_THRESHOLD);
                prop_assert!(score == 0.0 || (ANLS_THRESHOLD..=1.0).contains(&score));
            }

            #[test]
            fn bins_partition_counts(counts in proptest::collection::vec(0u64..10_000, 1..50)) {
                let records: Vec<MetricRecord> = counts.iter().map(|c| record(*c, 0)).collect();
                let summary = aggregate_report(&records, 0, 0, 0).unwrap();
                let total: f64 = summary.bins.iter().map(|b| b.share_pct).sum();
                prop_assert!((total - 100.0).abs() < 0.1);
                let counted: u64 = summary.bins.iter().map(|b| b.count).sum();
                prop_assert_eq!(counted, records.len() as u64);
            }
        }
    }
}
