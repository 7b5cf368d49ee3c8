//! Workflow plan syntax: parsing, validation, and rendering.
//!
//! A conductor completion carries its coordination strategy as three
//! list literals, usually after a free-form reasoning preamble:
//!
//! ```text
//! model_id = [2, 0]
//! subtasks = ["Develop an efficient algorithm...", "Implement it in Python"]
//! access_list = [[], ["all"]]
//! ```
//!
//! The parser is total: any byte sequence yields either a plan or
//! diagnostics, never a panic. When an assignment appears more than once
//! (conductors often sketch lists in their reasoning before the final
//! statement), the last occurrence wins.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Default cap on workflow steps per plan.
pub const DEFAULT_MAX_STEPS: usize = 5;

/// Bound on list nesting so adversarial input cannot exhaust the stack.
const MAX_LIST_DEPTH: usize = 64;

/// Which prior steps a worker sees in its context.
///
/// `None` is written as `[]` in the surface syntax; `All` as `"all"`,
/// bare `all`, or the list-wrapped `["all"]` seen in real completions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessSpec {
    All,
    None,
    /// Explicit prior-step positions (fine-grained topology variant).
    Indices(Vec<usize>),
}

impl AccessSpec {
    /// Prior-step positions this access spec resolves to for a step at
    /// `position`, ascending. `All` means every earlier step.
    pub fn resolved_positions(&self, position: usize) -> Vec<usize> {
        match self {
            AccessSpec::All => (0..position).collect(),
            AccessSpec::None => Vec::new(),
            AccessSpec::Indices(ix) => {
                let mut out = ix.clone();
                out.sort_unstable();
                out
            }
        }
    }
}

/// One workflow step: which worker, what to ask it, what it may see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowStep {
    pub worker_ordinal: usize,
    pub subtask: String,
    pub access: AccessSpec,
}

/// An ordered sequence of workflow steps. An empty plan is meaningful
/// only in a recursion round, where it means "return the previous
/// response".
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorkflowPlan {
    pub steps: Vec<WorkflowStep>,
}

impl WorkflowPlan {
    pub fn new(steps: Vec<WorkflowStep>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A parse problem, anchored to a byte offset in the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub position: usize,
    pub message: String,
}

impl Diagnostic {
    fn new(position: usize, message: impl Into<String>) -> Self {
        Self {
            position,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "offset {}: {}", self.position, self.message)
    }
}

/// Result of parsing a conductor completion. `plan` is present exactly
/// when `diagnostics` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub raw_text: String,
    pub plan: Option<WorkflowPlan>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseOutcome {
    pub fn is_parsed(&self) -> bool {
        self.plan.is_some()
    }
}

/// A violation found by [`validate_plan`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanViolation {
    OrdinalOutOfRange {
        step: usize,
        ordinal: usize,
        pool_size: usize,
    },
    EmptySubtask {
        step: usize,
    },
    SelfOrForwardReference {
        step: usize,
        index: usize,
    },
    DuplicateAccessIndex {
        step: usize,
        index: usize,
    },
    TooManySteps {
        len: usize,
        max_steps: usize,
    },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::OrdinalOutOfRange {
                step,
                ordinal,
                pool_size,
            } => write!(
                f,
                "step {step}: ordinal out of range (worker {ordinal}, pool size {pool_size})"
            ),
            PlanViolation::EmptySubtask { step } => {
                write!(f, "step {step}: subtask is empty")
            }
            PlanViolation::SelfOrForwardReference { step, index } => {
                write!(f, "step {step}: self/forward reference to position {index}")
            }
            PlanViolation::DuplicateAccessIndex { step, index } => {
                write!(f, "step {step}: duplicate access index {index}")
            }
            PlanViolation::TooManySteps { len, max_steps } => {
                write!(f, "plan has {len} steps, more than the limit of {max_steps}")
            }
        }
    }
}

/// Check a parsed plan against a pool size and step limit. Returns the
/// violations found; an empty vector means the plan is valid.
pub fn validate_plan(
    plan: &WorkflowPlan,
    pool_size: usize,
    max_steps: usize,
) -> Vec<PlanViolation> {
    let mut violations = Vec::new();
    if plan.len() > max_steps {
        violations.push(PlanViolation::TooManySteps {
            len: plan.len(),
            max_steps,
        });
    }
    for (position, step) in plan.steps.iter().enumerate() {
        if step.worker_ordinal >= pool_size {
            violations.push(PlanViolation::OrdinalOutOfRange {
                step: position,
                ordinal: step.worker_ordinal,
                pool_size,
            });
        }
        if step.subtask.trim().is_empty() {
            violations.push(PlanViolation::EmptySubtask { step: position });
        }
        if let AccessSpec::Indices(indices) = &step.access {
            let mut seen = Vec::new();
            for &index in indices {
                if index >= position {
                    violations.push(PlanViolation::SelfOrForwardReference {
                        step: position,
                        index,
                    });
                }
                if seen.contains(&index) {
                    violations.push(PlanViolation::DuplicateAccessIndex {
                        step: position,
                        index,
                    });
                }
                seen.push(index);
            }
        }
    }
    violations
}

/// Render a plan in the canonical three-assignment surface form.
///
/// `parse_conductor_output(render_plan(p), ..)` reproduces `p` exactly.
pub fn render_plan(plan: &WorkflowPlan) -> String {
    let ordinals: Vec<String> = plan
        .steps
        .iter()
        .map(|s| s.worker_ordinal.to_string())
        .collect();
    let subtasks: Vec<String> = plan.steps.iter().map(|s| quote(&s.subtask)).collect();
    let access: Vec<String> = plan
        .steps
        .iter()
        .map(|s| match &s.access {
            AccessSpec::All => "[\"all\"]".to_string(),
            AccessSpec::None => "[]".to_string(),
            AccessSpec::Indices(ix) => {
                let inner: Vec<String> = ix.iter().map(|i| i.to_string()).collect();
                format!("[{}]", inner.join(", "))
            }
        })
        .collect();
    format!(
        "model_id = [{}]\nsubtasks = [{}]\naccess_list = [{}]",
        ordinals.join(", "),
        subtasks.join(", "),
        access.join(", ")
    )
}

/// Double-quote a string, escaping only backslash and double quote; the
/// parser interprets exactly `\"`, `\'`, and `\\`.
fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

// ── List grammar ─────────────────────────────────────────────

/// One literal inside a bracketed list.
#[derive(Debug, Clone, PartialEq)]
enum Item {
    Int(i64),
    Str(String),
    List(Vec<SpannedItem>),
    /// The bare keyword `all`.
    All,
}

#[derive(Debug, Clone, PartialEq)]
struct SpannedItem {
    offset: usize,
    item: Item,
}

struct ListError {
    offset: usize,
    message: String,
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str, pos: usize) -> Self {
        Self { src, pos }
    }

    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() {
            let rest = &self.src[self.pos..];
            match rest.chars().next() {
                Some(c) if c.is_whitespace() => self.pos += c.len_utf8(),
                _ => break,
            }
        }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> ListError {
        ListError {
            offset,
            message: message.into(),
        }
    }

    fn parse_list(&mut self, depth: usize) -> Result<Vec<SpannedItem>, ListError> {
        let open = self.pos;
        if depth > MAX_LIST_DEPTH {
            return Err(self.err(open, "list nesting too deep"));
        }
        debug_assert_eq!(self.peek(), Some(b'['));
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b']') => {
                    self.pos += 1;
                    return Ok(items);
                }
                None => return Err(self.err(open, "unbalanced brackets: list is not closed")),
                _ => {}
            }
            items.push(self.parse_item(depth)?);
            self.skip_ws();
            match self.peek() {
                Some(b',') => {
                    self.pos += 1;
                }
                Some(b']') => {
                    self.pos += 1;
                    return Ok(items);
                }
                Some(_) => return Err(self.err(self.pos, "expected ',' or ']' in list")),
                None => return Err(self.err(open, "unbalanced brackets: list is not closed")),
            }
        }
    }

    fn parse_item(&mut self, depth: usize) -> Result<SpannedItem, ListError> {
        let offset = self.pos;
        let item = match self.peek() {
            Some(b'[') => Item::List(self.parse_list(depth + 1)?),
            Some(q @ (b'"' | b'\'')) => Item::Str(self.parse_string(q)?),
            Some(b'-') | Some(b'0'..=b'9') => Item::Int(self.parse_int()?),
            Some(b'a') if self.keyword_all_at(offset) => {
                self.pos += 3;
                Item::All
            }
            _ => return Err(self.err(offset, "expected an integer, string, list, or `all`")),
        };
        Ok(SpannedItem { offset, item })
    }

    /// True when the bare keyword `all` starts at `pos` and is not part of
    /// a longer identifier.
    fn keyword_all_at(&self, pos: usize) -> bool {
        let bytes = self.bytes();
        if !self.src[pos..].starts_with("all") {
            return false;
        }
        match bytes.get(pos + 3) {
            Some(&b) => !is_ident_byte(b),
            None => true,
        }
    }

    /// Quoted string; may span lines. Only `\"`, `\'`, and `\\` are
    /// interpreted as escapes; any other backslash passes through.
    fn parse_string(&mut self, quote: u8) -> Result<String, ListError> {
        let open = self.pos;
        self.pos += 1;
        let mut value = String::new();
        let mut segment_start = self.pos;
        let bytes = self.bytes();
        while self.pos < bytes.len() {
            let b = bytes[self.pos];
            if b == quote {
                value.push_str(&self.src[segment_start..self.pos]);
                self.pos += 1;
                return Ok(value);
            }
            if b == b'\\' {
                if let Some(&next) = bytes.get(self.pos + 1) {
                    if matches!(next, b'"' | b'\'' | b'\\') {
                        value.push_str(&self.src[segment_start..self.pos]);
                        value.push(next as char);
                        self.pos += 2;
                        segment_start = self.pos;
                        continue;
                    }
                }
            }
            self.pos += 1;
        }
        Err(self.err(open, "unterminated string"))
    }

    fn parse_int(&mut self) -> Result<i64, ListError> {
        let start = self.pos;
        let bytes = self.bytes();
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(self.err(start, "expected digits"));
        }
        debug_assert!(bytes[start..self.pos].is_ascii());
        self.src[start..self.pos]
            .parse::<i64>()
            .map_err(|_| self.err(start, "integer out of range"))
    }
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

// ── Assignment extraction ────────────────────────────────────

const ASSIGNMENT_NAMES: [&str; 3] = ["model_id", "subtasks", "access_list"];

struct Occurrence {
    list_offset: usize,
    items: Vec<SpannedItem>,
}

/// Scan the raw text for `name = [...]` assignments. For each name, the
/// last successfully parsed occurrence wins; the last failed attempt is
/// kept for diagnostics. A successfully parsed list is skipped over in
/// one piece, so list-literal contents (including strings that happen to
/// contain `model_id = [...]`) are never re-scanned for assignments.
fn scan_assignments(src: &str) -> ([Option<Occurrence>; 3], [Option<ListError>; 3]) {
    let mut found: [Option<Occurrence>; 3] = [None, None, None];
    let mut failed: [Option<ListError>; 3] = [None, None, None];
    let bytes = src.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        for (n, name) in ASSIGNMENT_NAMES.iter().enumerate() {
            // Byte-level comparison: `i` may sit inside a multibyte char
            // while scanning arbitrary text.
            if !bytes[i..].starts_with(name.as_bytes()) {
                continue;
            }
            // Word boundaries on both sides, so e.g. `my_model_id` or
            // `model_idx` never match.
            if i > 0 && is_ident_byte(bytes[i - 1]) {
                continue;
            }
            let after = i + name.len();
            if bytes.get(after).copied().map(is_ident_byte) == Some(true) {
                continue;
            }
            let mut scanner = Scanner::new(src, after);
            scanner.skip_ws();
            if scanner.peek() != Some(b'=') {
                continue;
            }
            scanner.pos += 1;
            scanner.skip_ws();
            if scanner.peek() != Some(b'[') {
                failed[n] = Some(scanner.err(scanner.pos, "expected '[' after '='"));
                i = after;
                continue 'outer;
            }
            let list_offset = scanner.pos;
            match scanner.parse_list(0) {
                Ok(items) => {
                    found[n] = Some(Occurrence { list_offset, items });
                    i = scanner.pos;
                }
                Err(e) => {
                    failed[n] = Some(e);
                    i = after;
                }
            }
            continue 'outer;
        }
        i += 1;
    }
    (found, failed)
}

// ── Parsing ──────────────────────────────────────────────────

/// Parse a conductor completion into a workflow plan.
///
/// The text may contain arbitrary prose and a reasoning trace around the
/// three assignments; everything outside them is ignored (but retained
/// verbatim in `raw_text`). When `fine_grained` is false, each access
/// entry must be `all` / `["all"]` or `[]`; when true, lists of prior
/// step indices are also accepted. Never panics.
pub fn parse_conductor_output(raw: &str, max_steps: usize, fine_grained: bool) -> ParseOutcome {
    let (found, failed) = scan_assignments(raw);
    let mut diagnostics = Vec::new();

    for (n, name) in ASSIGNMENT_NAMES.iter().enumerate() {
        if found[n].is_none() {
            match &failed[n] {
                Some(e) => diagnostics.push(Diagnostic::new(
                    e.offset,
                    format!("{name} list is malformed: {}", e.message),
                )),
                None => {
                    diagnostics.push(Diagnostic::new(0, format!("{name} assignment not found")))
                }
            }
        }
    }
    if !diagnostics.is_empty() {
        return outcome(raw, None, diagnostics);
    }

    let [model_ids, subtasks, access_list] = found.map(|o| o.expect("checked above"));
    if model_ids.items.len() != subtasks.items.len()
        || subtasks.items.len() != access_list.items.len()
    {
        diagnostics.push(Diagnostic::new(
            model_ids.list_offset,
            format!(
                "length mismatch: model_id has {} entries, subtasks {}, access_list {}",
                model_ids.items.len(),
                subtasks.items.len(),
                access_list.items.len()
            ),
        ));
        return outcome(raw, None, diagnostics);
    }

    let mut steps = Vec::with_capacity(model_ids.items.len());
    for (position, ((id_item, task_item), access_item)) in model_ids
        .items
        .iter()
        .zip(&subtasks.items)
        .zip(&access_list.items)
        .enumerate()
    {
        let worker_ordinal = match &id_item.item {
            Item::Int(v) if *v >= 0 => *v as usize,
            Item::Int(_) => {
                diagnostics.push(Diagnostic::new(
                    id_item.offset,
                    format!("worker ordinal negative at step {position}"),
                ));
                0
            }
            _ => {
                diagnostics.push(Diagnostic::new(
                    id_item.offset,
                    format!("model_id entry at step {position} must be an integer"),
                ));
                0
            }
        };
        let subtask = match &task_item.item {
            Item::Str(s) => {
                if s.trim().is_empty() {
                    diagnostics.push(Diagnostic::new(
                        task_item.offset,
                        format!("subtask at step {position} is empty"),
                    ));
                }
                s.clone()
            }
            _ => {
                diagnostics.push(Diagnostic::new(
                    task_item.offset,
                    format!("subtasks entry at step {position} must be a string"),
                ));
                String::new()
            }
        };
        let access = interpret_access(access_item, position, fine_grained, &mut diagnostics);
        steps.push(WorkflowStep {
            worker_ordinal,
            subtask,
            access,
        });
    }

    if steps.len() > max_steps {
        diagnostics.push(Diagnostic::new(
            model_ids.list_offset,
            format!(
                "step count {} exceeds max_steps {max_steps}",
                steps.len()
            ),
        ));
    }

    if diagnostics.is_empty() {
        outcome(raw, Some(WorkflowPlan::new(steps)), diagnostics)
    } else {
        outcome(raw, None, diagnostics)
    }
}

fn outcome(raw: &str, plan: Option<WorkflowPlan>, diagnostics: Vec<Diagnostic>) -> ParseOutcome {
    debug_assert_eq!(plan.is_none(), !diagnostics.is_empty());
    ParseOutcome {
        raw_text: raw.to_string(),
        plan,
        diagnostics,
    }
}

fn is_all_token(item: &Item) -> bool {
    matches!(item, Item::All) || matches!(item, Item::Str(s) if s == "all")
}

fn interpret_access(
    entry: &SpannedItem,
    position: usize,
    fine_grained: bool,
    diagnostics: &mut Vec<Diagnostic>,
) -> AccessSpec {
    let invalid = |diagnostics: &mut Vec<Diagnostic>| {
        let expected = if fine_grained {
            "`all`, `[\"all\"]`, `[]`, or a list of prior step indices"
        } else {
            "`all`, `[\"all\"]`, or `[]`"
        };
        diagnostics.push(Diagnostic::new(
            entry.offset,
            format!("access entry at step {position} must be {expected}"),
        ));
        AccessSpec::None
    };

    if is_all_token(&entry.item) {
        return AccessSpec::All;
    }
    let items = match &entry.item {
        Item::List(items) => items,
        _ => return invalid(diagnostics),
    };
    if items.is_empty() {
        return AccessSpec::None;
    }
    if items.len() == 1 && is_all_token(&items[0].item) {
        return AccessSpec::All;
    }
    if items.iter().all(|it| matches!(it.item, Item::Int(_))) {
        if !fine_grained {
            return invalid(diagnostics);
        }
        let mut indices = Vec::with_capacity(items.len());
        for it in items {
            let Item::Int(v) = it.item else { unreachable!() };
            if v < 0 {
                diagnostics.push(Diagnostic::new(
                    it.offset,
                    format!("access index at step {position} is negative"),
                ));
                continue;
            }
            let index = v as usize;
            if index >= position {
                diagnostics.push(Diagnostic::new(
                    it.offset,
                    format!("access index {index} at step {position} is not less than the step's own position"),
                ));
            }
            if indices.contains(&index) {
                diagnostics.push(Diagnostic::new(
                    it.offset,
                    format!("duplicate access index {index} at step {position}"),
                ));
            }
            indices.push(index);
        }
        return AccessSpec::Indices(indices);
    }
    invalid(diagnostics)
}
