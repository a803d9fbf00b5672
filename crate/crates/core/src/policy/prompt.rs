//! Inference prompt rendering and the `Gi:` / `Pi:` answer format.

use std::path::Path;

use thiserror::Error;

use crate::action::{parse_action, ActionError, ActionSpace, ActionType};
use crate::policy::{Candidate, CandidateSet};
use crate::trajectory::Task;

/// Marker separating a candidate's reasoning from its action JSON.
pub const ACTION_MARKER: &str = "So the next one action is:";

pub const PLACEHOLDERS: [&str; 4] = ["available_actions", "previous_actions", "k", "instruction"];

pub const DEFAULT_INFERENCE_TEMPLATE: &str = "\
Task: {instruction}

Task requirements:
The screen is shown twice: as captured, and with numbered boxes marking its elements. \
Pick the next single action that moves the task forward. Actions run automatically and \
nobody is watching, so anything that needs the user (voice input, for example) is a mistake. \
On a phone, the home screen does not list every installed app; scrolling up on it opens the \
app drawer. If the answer is already visible on the current screen, the task is complete.

Available actions:
{available_actions}

Summary of previous actions:
Previous actions: {previous_actions}

Instruction:
Give your {k} best candidates for the next single action. For each, reason step by step in \
at most three sentences, state the action, and then give the probability (0.0 to 1.0) that \
the action advances the task at this point.
";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template:?} has placeholder {{{name}}} {count} times, expected exactly once")]
    Placeholder { template: String, name: &'static str, count: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    name: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, PromptError> {
        let tpl = PromptTemplate { name: name.into(), body: body.into() };
        for p in PLACEHOLDERS {
            let count = tpl.body.matches(&format!("{{{p}}}")).count();
            if count != 1 {
                return Err(PromptError::Placeholder { template: tpl.name.clone(), name: p, count });
            }
        }
        Ok(tpl)
    }

    pub fn inference_default() -> Self {
        PromptTemplate::new("inference", DEFAULT_INFERENCE_TEMPLATE).expect("built-in template is well formed")
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        PromptTemplate::new(name, body)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Single-pass substitution, so inserted values are never re-expanded.
    fn fill(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let hit = values.iter().find(|(name, _)| after.starts_with(name) && after[name.len()..].starts_with('}'));
            match hit {
                Some((name, value)) => {
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

fn action_usage(t: ActionType, space: ActionSpace) -> &'static str {
    if t == ActionType::Type && space.type_requires_target() {
        r#"type: enter text into the element with the given numeric id, {"action_type": "type", "id": <numeric id on the screen>, "text": <text>}"#
    } else {
        t.usage()
    }
}

/// Numbered listing of the space's actions with their JSON shapes.
pub fn available_actions(space: ActionSpace) -> String {
    space
        .allowed_types()
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, action_usage(*t, space)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The G1..Gk / P1..Pk answer block appended to every inference prompt.
pub fn answer_format(k: usize) -> String {
    let mut out = String::from("Answer format:\n");
    for i in 1..=k {
        out.push_str(&format!(
            "G{i}: <your step-by-step reasoning, at most three sentences> {ACTION_MARKER}{{\"action_type\": <an action type from Available actions>, <the remaining fields of that action>}}\n\
             P{i}: <the probability between 0.0 and 1.0 that G{i} is correct; the number only, nothing else>\n"
        ));
    }
    out
}

/// Renders the inference prompt: the filled template followed by the answer
/// format with `k` slots.
pub fn render_inference_prompt(
    tpl: &PromptTemplate,
    task: &Task,
    summary: &str,
    space: ActionSpace,
    k: usize,
) -> Result<String, PromptError> {
    if k == 0 {
        return Err(PromptError::ZeroK);
    }
    let actions = available_actions(space);
    let k_str = k.to_string();
    let mut out = tpl.fill(&[
        ("available_actions", &actions),
        ("previous_actions", summary),
        ("k", &k_str),
        ("instruction", &task.instruction),
    ]);
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&answer_format(k));
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no parseable G/P candidates in reply")]
    NoCandidates,
    #[error("candidate G{index}: {source}")]
    InvalidAction { index: usize, source: ActionError },
    #[error("candidate G{index}: no action JSON object found")]
    MissingAction { index: usize },
}

#[derive(Debug)]
enum Marker {
    G(usize),
    P(usize),
}

/// Recognizes `G12:` / `P3:` at the start of a (trimmed) line, tolerating
/// markdown emphasis such as `**G1:**`.
fn line_marker(line: &str) -> Option<(Marker, &str)> {
    let t = line.trim_start().trim_start_matches(['*', '#', '-', ' ']);
    let mut chars = t.char_indices();
    let (_, kind) = chars.next()?;
    if kind != 'G' && kind != 'P' {
        return None;
    }
    let digits: String = t[1..].chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let rest = &t[1 + digits.len()..];
    let rest = rest.trim_start_matches('*');
    let rest = rest.strip_prefix(':')?;
    let rest = rest.trim_start_matches('*');
    let n: usize = digits.parse().ok()?;
    Some((if kind == 'G' { Marker::G(n) } else { Marker::P(n) }, rest))
}

/// Index of the `}` closing the object that starts at `s[start]`.
fn matching_brace(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i);
                }
            }
            _ => {}
        }
    }
    None
}

/// First decimal number in `s`, e.g. `0.8` in `"about 0.8"`.
pub fn first_number(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let starts = c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit));
        if starts {
            let neg = i > 0 && bytes[i - 1] == b'-';
            let mut j = i;
            let mut seen_dot = false;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || (bytes[j] == b'.' && !seen_dot)) {
                seen_dot |= bytes[j] == b'.';
                j += 1;
            }
            let mut end = j;
            // exponent
            if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                let mut k = end + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let lit = s[i..end].trim_end_matches('.');
            if let Ok(v) = lit.parse::<f64>() {
                return Some(if neg { -v } else { v });
            }
            i = end;
        } else {
            i += 1;
        }
    }
    None
}

/// Parses a top-k reply into at most `k` candidates in emission order.
///
/// Probabilities outside [0, 1] are clamped and flagged; a G entry without a
/// matching P gets confidence 0 and a flag.
pub fn parse_topk_response(text: &str, space: ActionSpace, k: usize) -> Result<CandidateSet, ParseError> {
    // collect marker blocks: (marker, body text up to the next marker)
    let mut blocks: Vec<(Marker, String)> = Vec::new();
    for line in text.lines() {
        match line_marker(line) {
            Some((m, rest)) => blocks.push((m, rest.to_string())),
            None => {
                if let Some((_, body)) = blocks.last_mut() {
                    body.push('\n');
                    body.push_str(line);
                }
            }
        }
    }

    let mut gs: Vec<(usize, String)> = Vec::new();
    let mut ps: Vec<(usize, String)> = Vec::new();
    for (m, body) in blocks {
        match m {
            Marker::G(n) => gs.push((n, body)),
            Marker::P(n) => ps.push((n, body)),
        }
    }

    let mut candidates = Vec::new();
    for (n, body) in gs.into_iter().take(k.max(1)) {
        let (rationale, json_from) = match body.find(ACTION_MARKER) {
            Some(pos) => (body[..pos].trim().to_string(), pos + ACTION_MARKER.len()),
            None => match body.find('{') {
                Some(pos) => (body[..pos].trim().to_string(), pos),
                None => return Err(ParseError::MissingAction { index: n }),
            },
        };
        let open = body[json_from..].find('{').map(|p| p + json_from).ok_or(ParseError::MissingAction { index: n })?;
        let close = matching_brace(&body, open).ok_or(ParseError::MissingAction { index: n })?;
        let action = parse_action(&body[open..=close], space).map_err(|source| ParseError::InvalidAction { index: n, source })?;

        let (confidence, warning) = match ps.iter().find(|(pn, _)| *pn == n).and_then(|(_, b)| first_number(b)) {
            Some(p) if (0.0..=1.0).contains(&p) => (p, None),
            Some(p) if p.is_nan() => (0.0, Some(format!("P{n} is not a number"))),
            Some(p) => (p.clamp(0.0, 1.0), Some(format!("P{n}={p} clamped to [0, 1]"))),
            None => (0.0, Some(format!("no probability for G{n}"))),
        };
        candidates.push(Candidate { action, rationale, confidence, warning });
    }
    if candidates.is_empty() {
        return Err(ParseError::NoCandidates);
    }
    Ok(CandidateSet::new(k.max(candidates.len()), candidates).expect("1 <= len <= k by construction"))
}

/// Renders a candidate set in the answer format; the inverse of
/// [`parse_topk_response`] for rationales free of markers.
pub fn synthesize_response(cs: &CandidateSet) -> String {
    let mut out = String::new();
    for (i, c) in cs.candidates().iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!("G{n}: {} {ACTION_MARKER}{}\nP{n}: {}\n", c.rationale, c.action, c.confidence));
    }
    out
}
