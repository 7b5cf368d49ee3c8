//! Answer extraction, verification against reference solutions, and the
//! two reward schemas.
//!
//! The conductor schema scores parse failure 0, a verified match 1, and
//! anything else 0.5; the classic schema scores format failure -1, a
//! match 1, and anything else -0.5. Both are total over every
//! (format, match) combination.

use crate::engine::{EpisodeRecord, ExecutionTrace};
use crate::plan::ParseOutcome;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when a numeric sample does not specify one.
pub const DEFAULT_NUMERIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("sample line {line}: {reason}")]
    MalformedSample { line: usize, reason: String },
    #[error("no reward rounds given")]
    EmptyRounds,
    #[error("initial discount {0} is outside [0, 1]")]
    BadDiscount(f64),
}

/// How a sample's final response is checked against its solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Exact,
    Numeric { tolerance: f64 },
    MultipleChoice,
    TaggedAnswer,
    Boxed,
}

/// A verifiable problem: question, reference solution, and the verifier
/// used to compare them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct TaskSample {
    pub id: String,
    pub question: String,
    pub solution: String,
    pub verifier: VerifierKind,
    pub domain_tag: String,
}

/// JSONL wire form: one object per line with `verifier` as a string and
/// `tolerance` as an optional sibling field.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSample {
    id: String,
    question: String,
    solution: String,
    verifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
    #[serde(default)]
    domain_tag: String,
}

impl TryFrom<RawSample> for TaskSample {
    type Error = String;

    fn try_from(raw: RawSample) -> Result<Self, Self::Error> {
        if raw.solution.is_empty() {
            return Err(format!("sample `{}` has an empty solution", raw.id));
        }
        let verifier = match raw.verifier.as_str() {
            "exact" => VerifierKind::Exact,
            "numeric" => {
                let tolerance = raw.tolerance.unwrap_or(DEFAULT_NUMERIC_TOLERANCE);
                if tolerance.is_nan() || tolerance < 0.0 {
                    return Err(format!("sample `{}` has a negative tolerance", raw.id));
                }
                VerifierKind::Numeric { tolerance }
            }
            "multiple_choice" => VerifierKind::MultipleChoice,
            "tagged_answer" => VerifierKind::TaggedAnswer,
            "boxed" => VerifierKind::Boxed,
            other => return Err(format!("sample `{}` has unknown verifier `{other}`", raw.id)),
        };
        Ok(TaskSample {
            id: raw.id,
            question: raw.question,
            solution: raw.solution,
            verifier,
            domain_tag: raw.domain_tag,
        })
    }
}

impl From<TaskSample> for RawSample {
    fn from(sample: TaskSample) -> Self {
        let (verifier, tolerance) = match sample.verifier {
            VerifierKind::Exact => ("exact", None),
            VerifierKind::Numeric { tolerance } => ("numeric", Some(tolerance)),
            VerifierKind::MultipleChoice => ("multiple_choice", None),
            VerifierKind::TaggedAnswer => ("tagged_answer", None),
            VerifierKind::Boxed => ("boxed", None),
        };
        RawSample {
            id: sample.id,
            question: sample.question,
            solution: sample.solution,
            verifier: verifier.to_string(),
            tolerance,
            domain_tag: sample.domain_tag,
        }
    }
}

/// Load task samples from JSONL text (one object per line; blank lines
/// ignored).
pub fn load_samples_jsonl(text: &str) -> Result<Vec<TaskSample>, RewardError> {
    let mut samples = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let sample: TaskSample =
            serde_json::from_str(line).map_err(|e| RewardError::MalformedSample {
                line: index + 1,
                reason: e.to_string(),
            })?;
        samples.push(sample);
    }
    Ok(samples)
}

// ── Extraction ───────────────────────────────────────────────

/// Extract the candidate answer from a response.
///
/// Tagged extraction takes the last complete `<answer>...</answer>`
/// span; boxed takes the last `\boxed{...}` with balanced braces;
/// multiple choice looks for a standalone letter A-E inside the last
/// answer tag first and otherwise takes the last standalone letter in
/// the whole response; exact/numeric use the tag content when a tag is
/// present and the whole trimmed response otherwise.
pub fn extract_answer(response: &str, kind: &VerifierKind) -> Option<String> {
    match kind {
        VerifierKind::TaggedAnswer => last_answer_tag(response).map(|s| s.trim().to_string()),
        VerifierKind::Boxed => last_balanced_boxed(response),
        VerifierKind::MultipleChoice => last_answer_tag(response)
            .and_then(last_standalone_letter)
            .or_else(|| last_standalone_letter(response))
            .map(|c| c.to_ascii_uppercase().to_string()),
        VerifierKind::Exact | VerifierKind::Numeric { .. } => {
            let text = match last_answer_tag(response) {
                Some(tag) => tag.trim(),
                None => response.trim(),
            };
            (!text.is_empty()).then(|| text.to_string())
        }
    }
}

fn last_answer_tag(response: &str) -> Option<&str> {
    const OPEN: &str = "<answer>";
    const CLOSE: &str = "</answer>";
    let mut last = None;
    let mut cursor = 0;
    while let Some(open_rel) = response[cursor..].find(OPEN) {
        let content_start = cursor + open_rel + OPEN.len();
        match response[content_start..].find(CLOSE) {
            Some(close_rel) => {
                last = Some(&response[content_start..content_start + close_rel]);
                cursor = content_start + close_rel + CLOSE.len();
            }
            None => break,
        }
    }
    last
}

/// Content of the last `\boxed{...}` whose braces balance. Escaped
/// braces (`\{`, `\}`) do not count toward nesting.
fn last_balanced_boxed(response: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let starts: Vec<usize> = response
        .match_indices(MARKER)
        .map(|(i, _)| i + MARKER.len())
        .collect();
    for &start in starts.iter().rev() {
        let mut depth = 1usize;
        let mut chars = response[start..].char_indices();
        while let Some((offset, c)) = chars.next() {
            match c {
                '\\' => {
                    chars.next();
                }
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(response[start..start + offset].to_string());
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Last A-E (either case) bounded by non-alphanumeric characters.
fn last_standalone_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate().rev() {
        if !matches!(c, 'A'..='E' | 'a'..='e') {
            continue;
        }
        let left_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let right_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if left_ok && right_ok {
            return Some(c);
        }
    }
    None
}

// ── Verification ─────────────────────────────────────────────

/// Check an extracted answer against the sample's solution. Absent
/// extraction is never a match.
pub fn verify(extracted: Option<&str>, sample: &TaskSample) -> bool {
    let Some(text) = extracted else {
        return false;
    };
    match &sample.verifier {
        VerifierKind::Exact | VerifierKind::TaggedAnswer | VerifierKind::Boxed => {
            normalized_eq(text, &sample.solution)
        }
        VerifierKind::MultipleChoice => text.trim().eq_ignore_ascii_case(sample.solution.trim()),
        VerifierKind::Numeric { tolerance } => {
            match (parse_numeric(text), parse_numeric(&sample.solution)) {
                (Some(a), Some(b)) => (a - b).abs() <= tolerance * f64::max(1.0, b.abs()),
                _ => normalized_eq(text, &sample.solution),
            }
        }
    }
}

/// Equality after trimming and collapsing whitespace runs.
fn normalized_eq(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    norm(a) == norm(b)
}

/// Parse integers, decimals, simple fractions `a/b`, and percent
/// suffixes. Anything else is `None` (callers fall back to string
/// comparison).
fn parse_numeric(text: &str) -> Option<f64> {
    let t = text.trim();
    if let Some(rest) = t.strip_suffix('%') {
        return rest.trim().parse::<f64>().ok().map(|v| v / 100.0);
    }
    if let Some((numerator, denominator)) = t.split_once('/') {
        let n: f64 = numerator.trim().parse().ok()?;
        let d: f64 = denominator.trim().parse().ok()?;
        if d == 0.0 {
            return None;
        }
        return Some(n / d);
    }
    t.parse::<f64>().ok()
}

// ── Reward schemas ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSchema {
    /// {0, 0.5, 1}: parse failure / mismatch / match.
    Conductor,
    /// {-1, -0.5, 1}: format failure / mismatch / match.
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub value: f64,
    pub schema: RewardSchema,
    pub matched: bool,
    pub format_ok: bool,
}

/// The reward table shared by both schemas. A format failure forces the
/// schema's failure value regardless of `matched`.
pub fn reward_from_flags(format_ok: bool, matched: bool, schema: RewardSchema) -> RewardValue {
    let matched = format_ok && matched;
    let value = match (schema, format_ok, matched) {
        (RewardSchema::Conductor, false, _) => 0.0,
        (RewardSchema::Conductor, true, true) => 1.0,
        (RewardSchema::Conductor, true, false) => 0.5,
        (RewardSchema::Classic, false, _) => -1.0,
        (RewardSchema::Classic, true, true) => 1.0,
        (RewardSchema::Classic, true, false) => -0.5,
    };
    RewardValue {
        value,
        schema,
        matched,
        format_ok,
    }
}

/// Score one completion from its parse outcome and (when it executed)
/// its trace.
pub fn score_completion(
    parse: &ParseOutcome,
    trace: Option<&ExecutionTrace>,
    sample: &TaskSample,
    schema: RewardSchema,
) -> RewardValue {
    let format_ok = parse.plan.is_some();
    let matched = trace.is_some_and(|t| {
        verify(
            extract_answer(&t.final_response, &sample.verifier).as_deref(),
            sample,
        )
    });
    reward_from_flags(format_ok, matched, schema)
}

/// Score a full episode on its final response. Recursion fallbacks keep
/// the previous round's response, so only a round-0 format failure
/// scores as a format failure.
pub fn score_episode(
    episode: &EpisodeRecord,
    sample: &TaskSample,
    schema: RewardSchema,
) -> RewardValue {
    let format_ok = !episode.format_failure && episode.final_response.is_some();
    let matched = format_ok
        && episode.final_response.as_deref().is_some_and(|response| {
            verify(extract_answer(response, &sample.verifier).as_deref(), sample)
        });
    reward_from_flags(format_ok, matched, schema)
}

// ── Recursion reward shaping ─────────────────────────────────

/// Scale the initial (non-recursive) round's rewards by the discount
/// factor, leaving later rounds untouched. `rounds[r]` holds the group's
/// rewards for round `r`.
pub fn discount_initial_round(
    rounds: &[Vec<f64>],
    initial_discount: f64,
) -> Result<Vec<Vec<f64>>, RewardError> {
    if rounds.is_empty() {
        return Err(RewardError::EmptyRounds);
    }
    if !(0.0..=1.0).contains(&initial_discount) {
        return Err(RewardError::BadDiscount(initial_discount));
    }
    Ok(rounds
        .iter()
        .enumerate()
        .map(|(round, rewards)| {
            if round == 0 {
                rewards.iter().map(|r| r * initial_discount).collect()
            } else {
                rewards.clone()
            }
        })
        .collect())
}

/// Zero-mean, unit-std standardization (population std) with an epsilon
/// guard: a group with spread below `std_epsilon` maps to all zeros.
pub fn standardize_group(values: &[f64], std_epsilon: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = variance.sqrt();
    if std < std_epsilon {
        return vec![0.0; n];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Rewards for a recursive episode group: the round-0 discount followed
/// by per-round standardization across the group.
pub fn score_recursive_rounds(
    rounds: &[Vec<f64>],
    initial_discount: f64,
    std_epsilon: f64,
) -> Result<Vec<Vec<f64>>, RewardError> {
    let discounted = discount_initial_round(rounds, initial_discount)?;
    Ok(discounted
        .iter()
        .map(|round| standardize_group(round, std_epsilon))
        .collect())
}
