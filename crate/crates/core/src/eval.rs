//! Static and dynamic metrics, usage accounting and strategy comparisons.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matcher::{element_matches, match_action, GroundTruthAction, MatchConfig};
use crate::trajectory::{Outcome, Task, Trajectory};
use crate::wire::Usage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("predicted {pred} steps but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("nothing to score")]
    Empty,
    #[error("ground truth for step {0} has no acceptable targets")]
    NoCandidates(usize),
    #[error("pricing rates must be finite and >= 0")]
    BadPricing,
    #[error("runs cover different task suites: {0} vs {1}")]
    SuiteMismatch(String, String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Fraction of steps whose executed action matches the aligned ground truth.
pub fn static_score(pred: &Trajectory, gt: &[GroundTruthAction], cfg: &MatchConfig) -> Result<f64, EvalError> {
    if pred.steps.len() != gt.len() {
        return Err(EvalError::LengthMismatch { pred: pred.steps.len(), gt: gt.len() });
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = pred.steps.iter().zip(gt).filter(|(s, g)| match_action(&s.action, g, &s.screen, cfg)).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Like [`static_score`] but tolerates a replay cut short: the missing
/// trailing steps count as wrong.
pub fn static_score_partial(pred: &Trajectory, gt: &[GroundTruthAction], cfg: &MatchConfig) -> Result<f64, EvalError> {
    if pred.steps.len() > gt.len() {
        return Err(EvalError::LengthMismatch { pred: pred.steps.len(), gt: gt.len() });
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = pred.steps.iter().zip(gt).filter(|(s, g)| match_action(&s.action, g, &s.screen, cfg)).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Element accuracy and step success rate over one replay. A step counts
/// for the first when the element is acceptable and for the second when the
/// whole action matches as well.
pub fn element_and_step_sr(pred: &Trajectory, gt: &[GroundTruthAction], cfg: &MatchConfig) -> Result<(f64, f64), EvalError> {
    if pred.steps.len() > gt.len() {
        return Err(EvalError::LengthMismatch { pred: pred.steps.len(), gt: gt.len() });
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = gt.iter().position(|g| g.element_candidates.is_none()) {
        return Err(EvalError::NoCandidates(i));
    }
    let mut ele = 0usize;
    let mut step = 0usize;
    for (s, g) in pred.steps.iter().zip(gt) {
        if element_matches(&s.action, g) {
            ele += 1;
            if match_action(&s.action, g, &s.screen, cfg) {
                step += 1;
            }
        }
    }
    let n = gt.len() as f64;
    Ok((ele as f64 / n, step as f64 / n))
}

pub fn dynamic_success(outcomes: &[bool]) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(outcomes.iter().filter(|s| **s).count() as f64 / outcomes.len() as f64)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pricing {
    pub rate_per_million_prompt: f64,
    pub rate_per_million_completion: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Pricing::flat(5.0)
    }
}

impl Pricing {
    pub fn flat(rate: f64) -> Self {
        Pricing { rate_per_million_prompt: rate, rate_per_million_completion: rate }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = |r: f64| r.is_finite() && r >= 0.0;
        if ok(self.rate_per_million_prompt) && ok(self.rate_per_million_completion) {
            Ok(())
        } else {
            Err(EvalError::BadPricing)
        }
    }

    pub fn cost(&self, u: Usage) -> f64 {
        u.prompt_tokens as f64 * self.rate_per_million_prompt / 1e6
            + u.completion_tokens as f64 * self.rate_per_million_completion / 1e6
    }
}

/// One task's result under one strategy. Turns and tokens sum over all
/// rounds and trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub strategy: String,
    pub outcome: Outcome,
    pub turns: usize,
    pub tokens_prompt: u64,
    pub tokens_completion: u64,
    pub rounds_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_success_rate: Option<f64>,
}

impl TaskRecord {
    pub fn usage(&self) -> Usage {
        Usage { prompt_tokens: self.tokens_prompt, completion_tokens: self.tokens_completion }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub tasks: usize,
    pub static_score: Option<f64>,
    pub element_accuracy: Option<f64>,
    pub step_success_rate: Option<f64>,
    pub dynamic_success_rate: f64,
    pub avg_tokens: f64,
    pub avg_cost: f64,
    pub avg_turns: f64,
}

/// Pure fold over task records.
pub fn usage_report(records: &[TaskRecord], pricing: &Pricing) -> Aggregates {
    let n = records.len().max(1) as f64;
    Aggregates {
        tasks: records.len(),
        static_score: mean(records.iter().filter_map(|r| r.static_score)),
        element_accuracy: mean(records.iter().filter_map(|r| r.element_accuracy)),
        step_success_rate: mean(records.iter().filter_map(|r| r.step_success_rate)),
        dynamic_success_rate: records.iter().filter(|r| r.outcome.is_success()).count() as f64 / n,
        avg_tokens: records.iter().map(|r| r.usage().total() as f64).sum::<f64>() / n,
        avg_cost: records.iter().map(|r| pricing.cost(r.usage())).sum::<f64>() / n,
        avg_turns: records.iter().map(|r| r.turns as f64).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub suite_hash: String,
    pub pricing: Pricing,
    pub records: Vec<TaskRecord>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn new(strategy: impl Into<String>, suite_hash: impl Into<String>, pricing: Pricing, records: Vec<TaskRecord>) -> Self {
        let aggregates = usage_report(&records, &pricing);
        RunReport { strategy: strategy.into(), suite_hash: suite_hash.into(), pricing, records, aggregates }
    }

    /// Whether the stored aggregates equal a fresh fold of the records.
    pub fn is_consistent(&self) -> bool {
        usage_report(&self.records, &self.pricing) == self.aggregates
    }

    pub fn records_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "task_id",
            "strategy",
            "outcome",
            "turns",
            "tokens_prompt",
            "tokens_completion",
            "rounds_used",
            "static_score",
            "element_accuracy",
            "step_success_rate",
        ])
        .expect("in-memory");
        for r in &self.records {
            let outcome = serde_json::to_value(r.outcome).expect("serializable");
            w.write_record([
                r.task_id.clone(),
                r.strategy.clone(),
                outcome.as_str().unwrap_or_default().to_string(),
                r.turns.to_string(),
                r.tokens_prompt.to_string(),
                r.tokens_completion.to_string(),
                r.rounds_used.to_string(),
                opt(r.static_score),
                opt(r.element_accuracy),
                opt(r.step_success_rate),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }
}

/// Hash identifying a task suite: SHA-256 over the tasks' JSON, in order.
pub fn suite_hash(tasks: &[&Task]) -> String {
    let mut h = Sha256::new();
    for t in tasks {
        h.update(serde_json::to_vec(t).expect("serializable"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: String,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub suite_hash: String,
    pub rows: Vec<ComparisonRow>,
}

const COLUMNS: [&str; 9] = [
    "strategy",
    "tasks",
    "static_score",
    "element_accuracy",
    "step_success_rate",
    "dynamic_success_rate",
    "avg_tokens",
    "avg_cost",
    "avg_turns",
];

/// One row per run; every run must cover the same suite.
pub fn compare_report(runs: &[RunReport]) -> Result<Comparison, EvalError> {
    let first = runs.first().ok_or(EvalError::Empty)?;
    if let Some(other) = runs.iter().find(|r| r.suite_hash != first.suite_hash) {
        return Err(EvalError::SuiteMismatch(first.suite_hash.clone(), other.suite_hash.clone()));
    }
    Ok(Comparison {
        suite_hash: first.suite_hash.clone(),
        rows: runs.iter().map(|r| ComparisonRow { strategy: r.strategy.clone(), aggregates: r.aggregates.clone() }).collect(),
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory");
        for r in &self.rows {
            let a = &r.aggregates;
            w.write_record([
                r.strategy.clone(),
                a.tasks.to_string(),
                opt(a.static_score),
                opt(a.element_accuracy),
                opt(a.step_success_rate),
                a.dynamic_success_rate.to_string(),
                a.avg_tokens.to_string(),
                a.avg_cost.to_string(),
                a.avg_turns.to_string(),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    /// Parses the output of [`Comparison::to_csv`]; the suite hash is not
    /// part of the CSV and must be supplied.
    pub fn from_csv(text: &str, suite_hash: &str) -> Result<Comparison, EvalError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(|e| EvalError::Csv(e.to_string()))?.iter().map(String::from).collect();
        if header != COLUMNS {
            return Err(EvalError::Csv(format!("unexpected header {header:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| EvalError::Csv(format!("{s:?}: {e}")));
        let optnum = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| EvalError::Csv(e.to_string()))?;
            rows.push(ComparisonRow {
                strategy: rec[0].to_string(),
                aggregates: Aggregates {
                    tasks: rec[1].parse().map_err(|e| EvalError::Csv(format!("tasks: {e}")))?,
                    static_score: optnum(&rec[2])?,
                    element_accuracy: optnum(&rec[3])?,
                    step_success_rate: optnum(&rec[4])?,
                    dynamic_success_rate: num(&rec[5])?,
                    avg_tokens: num(&rec[6])?,
                    avg_cost: num(&rec[7])?,
                    avg_turns: num(&rec[8])?,
                },
            });
        }
        Ok(Comparison { suite_hash: suite_hash.to_string(), rows })
    }

    /// Fixed-width table for terminals.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut cells: Vec<Vec<String>> = vec![COLUMNS.iter().map(|c| c.to_string()).collect()];
        for r in &self.rows {
            let a = &r.aggregates;
            cells.push(vec![
                r.strategy.clone(),
                a.tasks.to_string(),
                fmt(a.static_score),
                fmt(a.element_accuracy),
                fmt(a.step_success_rate),
                format!("{:.4}", a.dynamic_success_rate),
                format!("{:.1}", a.avg_tokens),
                format!("{:.6}", a.avg_cost),
                format!("{:.2}", a.avg_turns),
            ]);
        }
        let widths: Vec<usize> = (0..COLUMNS.len()).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("suite {}\n", &self.suite_hash[..self.suite_hash.len().min(12)]);
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}
