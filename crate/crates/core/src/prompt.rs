//! Prompt assembly: the conductor system prompt (instructions, few-shot
//! examples, pool description), the recursion follow-up prompt, and
//! per-step worker message histories.
//!
//! Templates are plain text with `{placeholder}` syntax, shipped as data
//! files so they can be edited without a rebuild. Substitution is single
//! pass: placeholder values are never re-scanned, so a question that
//! happens to contain `{user_question}` is substituted exactly once.

use crate::client::ChatMessage;
use crate::plan::{parse_conductor_output, AccessSpec, WorkflowStep};
use crate::pool::{describe_pool, AgentPool};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CONDUCTOR_TEMPLATE: &str = include_str!("../assets/conductor_prompt.txt");
pub const DEFAULT_RECURSION_TEMPLATE: &str = include_str!("../assets/recursion_prompt.txt");
const DEFAULT_FEW_SHOT_JSON: &str = include_str!("../assets/few_shot_ood.json");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unresolved placeholder `{{{name}}}`")]
    UnresolvedPlaceholder { name: String },
    #[error("previous worker response is empty")]
    EmptyWorkerResponse,
    #[error("few-shot file is malformed: {0}")]
    MalformedFewShot(#[from] serde_json::Error),
    #[error("few-shot example {index} does not parse into a valid plan: {diagnostics}")]
    InvalidFewShot { index: usize, diagnostics: String },
    #[error("step accesses position {position}, which has not completed")]
    IncompleteAccess { position: usize },
}

/// A text template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    body: String,
}

impl PromptTemplate {
    pub fn new(body: impl Into<String>) -> Self {
        Self { body: body.into() }
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitute placeholders from `vars`. A `{name}` whose name is a
    /// valid identifier must resolve; anything else in braces is literal
    /// text. Values are inserted verbatim, never expanded again.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        let bytes = self.body.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                if let Some(end) = find_placeholder_end(bytes, i) {
                    let name = &self.body[i + 1..end];
                    match vars.iter().find(|(k, _)| *k == name) {
                        Some((_, value)) => out.push_str(value),
                        None => {
                            return Err(PromptError::UnresolvedPlaceholder {
                                name: name.to_string(),
                            })
                        }
                    }
                    i = end + 1;
                    continue;
                }
            }
            let ch = self.body[i..].chars().next().expect("in bounds");
            out.push(ch);
            i += ch.len_utf8();
        }
        Ok(out)
    }
}

/// Position of the closing `}` if `bytes[start..]` opens a `{ident}`
/// placeholder.
fn find_placeholder_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'}' => return (i > start + 1).then_some(i),
            b if b.is_ascii_alphanumeric() || b == b'_' => i += 1,
            _ => return None,
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    InDistribution,
    OutOfDistribution,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub response: String,
}

/// Few-shot conditioning examples for the conductor prompt. Every
/// response is checked at load time to parse into a valid plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub provenance: Provenance,
    pub examples: Vec<FewShotExample>,
}

impl FewShotSet {
    /// Empty set: the "w/o few-shot" ablation mode.
    pub fn empty() -> Self {
        Self {
            provenance: Provenance::Mixed,
            examples: Vec::new(),
        }
    }

    pub fn from_json_str(
        json: &str,
        max_steps: usize,
        fine_grained: bool,
    ) -> Result<Self, PromptError> {
        let set: FewShotSet = serde_json::from_str(json)?;
        for (index, example) in set.examples.iter().enumerate() {
            let outcome = parse_conductor_output(&example.response, max_steps, fine_grained);
            if outcome.plan.is_none() {
                let diagnostics = outcome
                    .diagnostics
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; ");
                return Err(PromptError::InvalidFewShot { index, diagnostics });
            }
        }
        Ok(set)
    }

    /// The default out-of-distribution example set.
    pub fn default_ood() -> Self {
        Self::from_json_str(DEFAULT_FEW_SHOT_JSON, crate::plan::DEFAULT_MAX_STEPS, false)
            .expect("bundled few-shot set is valid")
    }
}

/// Conductor and recursion templates plus the few-shot set, bundled for
/// episode execution.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub conductor: PromptTemplate,
    pub recursion: PromptTemplate,
    pub few_shot: FewShotSet,
}

impl Default for PromptBundle {
    fn default() -> Self {
        Self {
            conductor: PromptTemplate::new(DEFAULT_CONDUCTOR_TEMPLATE),
            recursion: PromptTemplate::new(DEFAULT_RECURSION_TEMPLATE),
            few_shot: FewShotSet::default_ood(),
        }
    }
}

fn format_few_shot_block(few_shot: &FewShotSet) -> String {
    few_shot
        .examples
        .iter()
        .enumerate()
        .map(|(i, example)| {
            format!(
                "EXAMPLE {}:\n\nQuestion: {}\n\nAssistant Response: {}",
                i + 1,
                example.question,
                example.response
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Assemble the full conductor prompt for one question.
pub fn build_conductor_prompt(
    template: &PromptTemplate,
    few_shot: &FewShotSet,
    question: &str,
    pool: &AgentPool,
    max_steps: usize,
) -> Result<String, PromptError> {
    let examples = format_few_shot_block(few_shot);
    let models = describe_pool(pool);
    let max_steps = max_steps.to_string();
    template.render(&[
        ("few_shot_examples", examples.as_str()),
        ("user_question", question),
        ("available_models", models.as_str()),
        ("max_number_of_routing_steps", max_steps.as_str()),
    ])
}

/// Assemble the recursion follow-up prompt; appended to the conductor's
/// conversation as a new user turn.
pub fn build_recursion_prompt(
    template: &PromptTemplate,
    previous_final_response: &str,
    max_steps: usize,
) -> Result<String, PromptError> {
    if previous_final_response.is_empty() {
        return Err(PromptError::EmptyWorkerResponse);
    }
    let max_steps = max_steps.to_string();
    template.render(&[
        ("worker_response", previous_final_response),
        ("max_number_of_routing_steps", max_steps.as_str()),
    ])
}

/// A completed earlier step, as seen from a later step's context.
#[derive(Debug, Clone, Copy)]
pub struct PriorStep<'a> {
    pub subtask: &'a str,
    pub response: &'a str,
}

/// Assemble the message history for one step.
///
/// `prior` holds the outcome of every step before this one, in plan
/// order, `None` where a step has not completed. Accessible steps are
/// included in position order as (user: subtask, assistant: response)
/// pairs, followed by the current subtask as the final user turn. The
/// original question is prepended to the first user turn, so a worker
/// with an empty access list still sees the problem. In recursion rounds
/// an `All` access additionally sees the previous round's final routing
/// message, placed before the current round's steps.
pub fn build_step_messages(
    question: &str,
    step: &WorkflowStep,
    prior: &[Option<PriorStep<'_>>],
    previous_round_final: Option<PriorStep<'_>>,
) -> Result<Vec<ChatMessage>, PromptError> {
    let positions = step.access.resolved_positions(prior.len());
    let mut pairs: Vec<PriorStep<'_>> = Vec::with_capacity(positions.len() + 1);
    if matches!(step.access, AccessSpec::All) {
        if let Some(previous) = previous_round_final {
            pairs.push(previous);
        }
    }
    for position in positions {
        match prior.get(position).copied().flatten() {
            Some(p) => pairs.push(p),
            None => return Err(PromptError::IncompleteAccess { position }),
        }
    }

    let mut messages = Vec::with_capacity(pairs.len() * 2 + 1);
    for (i, pair) in pairs.iter().enumerate() {
        let subtask = if i == 0 {
            format!("{question}\n\n{}", pair.subtask)
        } else {
            pair.subtask.to_string()
        };
        messages.push(ChatMessage::user(subtask));
        messages.push(ChatMessage::assistant(pair.response.to_string()));
    }
    let current = if pairs.is_empty() {
        format!("{question}\n\n{}", step.subtask)
    } else {
        step.subtask.clone()
    };
    messages.push(ChatMessage::user(current));
    Ok(messages)
}
