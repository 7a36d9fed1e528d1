//! From biclusters to Yara rules.
//!
//! Every bicluster becomes a `t of (...)` clause over its features, clauses
//! are joined with `or`, and the best candidate across gram sizes and
//! normalizations is kept.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::bicluster::{self, Bicluster, ClusterSource, Normalization};
use crate::bloom_index::BloomIndex;
use crate::error::{Error, Result};
use crate::feature_filter::{filter_simple, FeatureOccurrence};
use crate::ngram::{self, SampleSource, Strategy, LADDER};

pub const DEFAULT_K_PER_N: usize = 1024;
/// Distinct features at which a rule stops being penalized.
pub const FULL_CREDIT_FEATURES: usize = 5;

/// Which side of the variance split sets the clause threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Size of the high-frequency group (`m - s*`).
    #[default]
    HighGroup,
    /// The split index itself (`s*`).
    SplitIndex,
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high-group" => Ok(ThresholdMode::HighGroup),
            "split-index" => Ok(ThresholdMode::SplitIndex),
            other => Err(Error::Argument(format!(
                "unknown threshold mode {other:?} (expected high-group or split-index)"
            ))),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::HighGroup => "high-group",
            ThresholdMode::SplitIndex => "split-index",
        })
    }
}

/// Smallest minimizer of `s * var(low s) + (m - s) * var(high m - s)` over
/// `s in 0..m`, with counts sorted ascending.
pub fn variance_split(counts: &[usize]) -> Result<usize> {
    let m = counts.len();
    if m < 2 {
        return Err(Error::Argument(format!("threshold needs at least 2 counts, got {m}")));
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    // prefix sums give each group's sum of squared deviations in O(1)
    let mut sum = vec![0.0; m + 1];
    let mut sq = vec![0.0; m + 1];
    for (i, &x) in sorted.iter().enumerate() {
        sum[i + 1] = sum[i] + x;
        sq[i + 1] = sq[i] + x * x;
    }
    let ssd = |a: usize, b: usize| {
        let len = (b - a) as f64;
        if len == 0.0 {
            return 0.0;
        }
        let s = sum[b] - sum[a];
        ((sq[b] - sq[a]) - s * s / len).max(0.0)
    };
    let mut best = (0usize, f64::INFINITY);
    for s in 0..m {
        let objective = ssd(0, s) + ssd(s, m);
        // counts are integers, so distinct objectives differ by far more
        if objective < best.1 - 1e-9 {
            best = (s, objective);
        }
    }
    Ok(best.0)
}

/// Clause threshold from the features' in-family document frequencies.
pub fn clause_threshold(counts: &[usize], mode: ThresholdMode) -> Result<usize> {
    let m = counts.len();
    if counts.contains(&0) {
        return Err(Error::Argument("clause counts must be positive".into()));
    }
    let s = variance_split(counts)?;
    let t = match mode {
        ThresholdMode::HighGroup => m - s,
        ThresholdMode::SplitIndex => s,
    };
    Ok(t.clamp(1, m))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleClause {
    pub threshold: usize,
    /// Indices into the rule's patterns, ascending.
    pub feature_ids: Vec<usize>,
}

/// A rule in the emitted subset: hex-string patterns and a disjunction of
/// threshold clauses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct YaraRule {
    pub name: String,
    pub patterns: Vec<Vec<u8>>,
    pub clauses: Vec<RuleClause>,
}

impl YaraRule {
    /// Checks the structural invariants every emitted rule satisfies.
    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() || self.clauses.is_empty() {
            return Err(Error::Format("rule needs at least one pattern and one clause".into()));
        }
        if self.patterns.iter().any(Vec::is_empty) {
            return Err(Error::Format("empty pattern".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.patterns.iter().all(|p| seen.insert(p)) {
            return Err(Error::Format("duplicate pattern".into()));
        }
        for c in &self.clauses {
            if c.feature_ids.is_empty() || c.threshold == 0 || c.threshold > c.feature_ids.len() {
                return Err(Error::Format(format!(
                    "clause threshold {} over {} patterns",
                    c.threshold,
                    c.feature_ids.len()
                )));
            }
            if let Some(&bad) = c.feature_ids.iter().find(|&&f| f >= self.patterns.len()) {
                return Err(Error::Reference(format!("$x{bad}")));
            }
        }
        Ok(())
    }

    /// Whether a sample with the given pattern presence satisfies the rule.
    pub fn satisfied_by(&self, present: impl Fn(usize) -> bool) -> bool {
        self.clauses
            .iter()
            .any(|c| c.feature_ids.iter().filter(|&&f| present(f)).count() >= c.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub coverage: f64,
    pub distinct_features: usize,
    pub score: f64,
}

impl CandidateScore {
    pub fn new(covered: usize, sample_count: usize, distinct_features: usize) -> Self {
        let coverage = if sample_count == 0 {
            0.0
        } else {
            covered as f64 / sample_count as f64
        };
        let credit = distinct_features.min(FULL_CREDIT_FEATURES) as f64 / FULL_CREDIT_FEATURES as f64;
        CandidateScore {
            coverage,
            distinct_features,
            score: coverage * credit,
        }
    }
}

/// Builds the rule for one set of biclusters. Coverage is measured by
/// evaluating the finished rule on the family's feature file sets, which is
/// exactly what the matcher reports on those samples.
pub fn assemble_candidate(
    name: &str,
    biclusters: &[Bicluster],
    sample_count: usize,
    features: &[FeatureOccurrence],
    mode: ThresholdMode,
) -> Result<(YaraRule, CandidateScore)> {
    if biclusters.is_empty() {
        return Err(Error::Argument("a candidate needs at least one bicluster".into()));
    }
    let mut pattern_of = std::collections::HashMap::new();
    let mut patterns: Vec<Vec<u8>> = Vec::new();
    let mut sources: Vec<usize> = Vec::new();
    let mut clauses = Vec::with_capacity(biclusters.len());
    for b in biclusters {
        let mut ids = Vec::with_capacity(b.col_ids.len());
        let mut counts = Vec::with_capacity(b.col_ids.len());
        for &f in &b.col_ids {
            let feature = features
                .get(f)
                .ok_or_else(|| Error::Internal(format!("bicluster refers to unknown feature {f}")))?;
            let id = *pattern_of.entry(f).or_insert_with(|| {
                patterns.push(feature.gram.bytes.clone());
                sources.push(f);
                patterns.len() - 1
            });
            ids.push(id);
            counts.push(feature.doc_freq());
        }
        let threshold = clause_threshold(&counts, mode)?;
        ids.sort_unstable();
        clauses.push(RuleClause {
            threshold,
            feature_ids: ids,
        });
    }
    let rule = YaraRule {
        name: sanitize_identifier(name),
        patterns,
        clauses,
    };
    let covered = (0..sample_count)
        .filter(|&s| rule.satisfied_by(|p| features[sources[p]].file_set.contains(s)))
        .count();
    let score = CandidateScore::new(covered, sample_count, rule.patterns.len());
    Ok((rule, score))
}

#[derive(Debug, Clone)]
pub struct RulegenParams {
    pub k_per_n: usize,
    /// Largest ladder size tried.
    pub max_n: usize,
    pub threshold_mode: ThresholdMode,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for RulegenParams {
    fn default() -> Self {
        RulegenParams {
            k_per_n: DEFAULT_K_PER_N,
            max_n: *LADDER.last().unwrap(),
            threshold_mode: ThresholdMode::HighGroup,
            seed: 0,
            strategy: Strategy::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub n: usize,
    pub normalization: Normalization,
    pub score: CandidateScore,
    pub biclusters: usize,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRule {
    pub rule: YaraRule,
    pub provenance: Provenance,
}

/// What happened at one (n, normalization) step.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptStatus {
    Candidate(CandidateScore),
    NoFeatures { extracted: usize, kept: usize },
    InsufficientSignal(String),
    NoBiclusters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub n: usize,
    pub normalization: Option<Normalization>,
    pub status: AttemptStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleOutcome {
    Rule(GeneratedRule),
    NoRule { attempts: Vec<Attempt> },
}

impl RuleOutcome {
    pub fn rule(&self) -> Option<&GeneratedRule> {
        match self {
            RuleOutcome::Rule(r) => Some(r),
            RuleOutcome::NoRule { .. } => None,
        }
    }
}

/// Short human-readable reason for a no-rule outcome.
pub fn describe_attempts(attempts: &[Attempt]) -> String {
    let mut out = String::new();
    for a in attempts {
        let norm = a.normalization.map_or_else(|| "-".to_string(), |n| n.to_string());
        let what = match &a.status {
            AttemptStatus::Candidate(s) => format!("candidate score {:.3}", s.score),
            AttemptStatus::NoFeatures { extracted, kept } => {
                format!("{kept} of {extracted} grams survived filtering")
            }
            AttemptStatus::InsufficientSignal(m) => format!("insufficient signal ({m})"),
            AttemptStatus::NoBiclusters => "no biclusters".to_string(),
        };
        let _ = writeln!(out, "n={} {}: {}", a.n, norm, what);
    }
    out
}

/// Searches the gram ladder for the best-scoring rule.
pub fn build_yara_rule<S: SampleSource + ?Sized>(
    samples: &S,
    index: &BloomIndex,
    name: &str,
    params: &RulegenParams,
) -> Result<RuleOutcome> {
    let count = samples.sample_count();
    if count < 2 {
        return Err(Error::Argument(format!("need >= 2 samples, got {count}")));
    }
    if params.k_per_n == 0 {
        return Err(Error::Argument("k per n must be positive".into()));
    }
    let mut attempts = Vec::new();
    let mut best: Option<GeneratedRule> = None;
    for &n in LADDER.iter().filter(|&&n| n <= params.max_n) {
        let top = ngram::top_k(samples, n, params.k_per_n, 1, params.strategy)?;
        if top.grams.is_empty() {
            attempts.push(Attempt {
                n,
                normalization: None,
                status: AttemptStatus::NoFeatures { extracted: 0, kept: 0 },
            });
            continue;
        }
        let occurrences = FeatureOccurrence::collect(samples, &top)?;
        let kept = filter_simple(&occurrences, index.filter(n)?)?;
        let matrix = match bicluster::build_matrix(count, &kept) {
            Ok(m) => m,
            Err(Error::InsufficientSignal(msg)) => {
                attempts.push(Attempt {
                    n,
                    normalization: None,
                    status: if kept.len() < 2 {
                        AttemptStatus::NoFeatures {
                            extracted: occurrences.len(),
                            kept: kept.len(),
                        }
                    } else {
                        AttemptStatus::InsufficientSignal(msg)
                    },
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let seed = params.seed ^ (n as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let (scale, bistochastic) = rayon::join(
            || bicluster::bicluster_matrix(&matrix, Normalization::Scale, seed),
            || bicluster::bicluster_matrix(&matrix, Normalization::Bistochastic, seed),
        );
        for (normalization, outcome) in [(Normalization::Scale, scale), (Normalization::Bistochastic, bistochastic)] {
            let outcome = outcome?;
            if outcome.biclusters.is_empty() {
                attempts.push(Attempt {
                    n,
                    normalization: Some(normalization),
                    status: AttemptStatus::NoBiclusters,
                });
                continue;
            }
            let (rule, score) = assemble_candidate(name, &outcome.biclusters, count, &kept, params.threshold_mode)?;
            log::debug!(
                "n={n} {normalization}: {} biclusters, coverage {:.3}, {} features, score {:.3}",
                outcome.biclusters.len(),
                score.coverage,
                score.distinct_features,
                score.score
            );
            attempts.push(Attempt {
                n,
                normalization: Some(normalization),
                status: AttemptStatus::Candidate(score),
            });
            // ladder order and scale-first order already encode the tie-break
            let better = best.as_ref().is_none_or(|b| score.score > b.provenance.score.score);
            if better {
                best = Some(GeneratedRule {
                    rule,
                    provenance: Provenance {
                        n,
                        normalization,
                        score,
                        biclusters: outcome.biclusters.len(),
                        fallback_used: outcome.source == ClusterSource::DensityFallback,
                    },
                });
            }
        }
        if best.as_ref().is_some_and(|b| b.provenance.score.score >= 1.0) {
            break;
        }
    }
    Ok(match best {
        Some(rule) => RuleOutcome::Rule(rule),
        None => RuleOutcome::NoRule { attempts },
    })
}

/// Maps every character outside `[A-Za-z0-9_]` to `_` and prefixes `_` when
/// the result would start with a digit or be empty.
pub fn sanitize_identifier(name: &str) -> String {
    let mut out: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() || out.starts_with(|c: char| c.is_ascii_digit()) {
        out.insert(0, '_');
    }
    out
}

/// Renders the rule in the emitted Yara subset.
pub fn emit_yara(rule: &YaraRule) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "rule {}", sanitize_identifier(&rule.name));
    out.push_str("{\n    strings:\n");
    for (i, p) in rule.patterns.iter().enumerate() {
        let hex: Vec<String> = p.iter().map(|b| format!("{b:02X}")).collect();
        let _ = writeln!(out, "        $x{i} = {{ {} }}", hex.join(" "));
    }
    out.push_str("    condition:\n        ");
    let clauses: Vec<String> = rule
        .clauses
        .iter()
        .map(|c| {
            let refs: Vec<String> = c.feature_ids.iter().map(|f| format!("$x{f}")).collect();
            format!("({} of ({}))", c.threshold, refs.join(","))
        })
        .collect();
    out.push_str(&clauses.join(" or "));
    out.push_str("\n}\n");
    out
}
