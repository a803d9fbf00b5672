//! Trajectory-level evaluation, reflection and retry.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Agent, EpisodeSpec};
use crate::simenv::Environment;
use crate::trajectory::{Outcome, Task, Trajectory};
use crate::wire::{ChatClient, Usage, WireConfig, WireError};

/// At most this many thoughts are carried into the next attempt.
pub const MAX_THOUGHTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Evaluation {
    Success,
    Failure(String),
}

impl Evaluation {
    pub fn is_success(&self) -> bool {
        matches!(self, Evaluation::Success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CauseVerdict {
    FailureCauseIdentified,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionThought {
    pub text: String,
    /// The round whose failure this thought is about.
    pub round: u32,
    pub verdict_of_previous: CauseVerdict,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("unparseable evaluator reply: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Transport(#[from] WireError),
    #[error("cannot reflect on a successful trajectory")]
    NotAFailure,
    #[error("max_rounds must be at least 1")]
    ZeroRounds,
}

pub trait Evaluator {
    /// Judges a finished trajectory; `env` is left in the trajectory's final state.
    fn evaluate(&mut self, traj: &Trajectory, env: &dyn Environment) -> Result<Evaluation, RefineError>;
}

/// Judges by the simulator's goal predicate, so it is never wrong.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimEvaluator;

pub fn failure_reason(traj: &Trajectory) -> String {
    match traj.outcome {
        Outcome::Truncated => "max turns".into(),
        _ => traj.failure_cause.clone().unwrap_or_else(|| "goal not reached".into()),
    }
}

impl Evaluator for SimEvaluator {
    fn evaluate(&mut self, traj: &Trajectory, env: &dyn Environment) -> Result<Evaluation, RefineError> {
        if env.goal_reached() {
            Ok(Evaluation::Success)
        } else {
            Ok(Evaluation::Failure(failure_reason(traj)))
        }
    }
}

/// Remote judge. Expects `VERDICT: success|failure` and an optional
/// `REASON: ...` line.
pub struct WireEvaluator {
    client: ChatClient,
    pub usage: Usage,
}

impl WireEvaluator {
    pub fn new(cfg: WireConfig) -> Self {
        WireEvaluator { client: ChatClient::new(cfg), usage: Usage::default() }
    }

    pub fn prompt(traj: &Trajectory, env: &dyn Environment) -> String {
        let mut p = format!("Task: {}\nActions taken:\n", traj.task.instruction);
        for s in &traj.steps {
            p.push_str(&format!("{}. {}\n", s.index + 1, s.action.short()));
        }
        p.push_str(&format!("Final screen:\n{}\n\n", env.observe().describe()));
        p.push_str("Did these actions accomplish the task? Answer with a line `VERDICT: success` or `VERDICT: failure`, then a line `REASON: <one sentence>`.");
        p
    }
}

pub fn parse_verdict(reply: &str) -> Result<Evaluation, RefineError> {
    let mut verdict = None;
    let mut reason = String::new();
    for line in reply.lines() {
        let l = line.trim().trim_matches('*');
        let lower = l.to_lowercase();
        if let Some(v) = lower.strip_prefix("verdict:") {
            let v = v.trim();
            if v.starts_with("success") {
                verdict = Some(true);
            } else if v.starts_with("fail") {
                verdict = Some(false);
            }
        } else if lower.starts_with("reason:") {
            reason = l["reason:".len()..].trim().to_string();
        }
    }
    match verdict {
        Some(true) => Ok(Evaluation::Success),
        Some(false) => Ok(Evaluation::Failure(if reason.is_empty() { "judged unsuccessful".into() } else { reason })),
        None => Err(RefineError::Unparseable(reply.chars().take(200).collect())),
    }
}

impl Evaluator for WireEvaluator {
    fn evaluate(&mut self, traj: &Trajectory, env: &dyn Environment) -> Result<Evaluation, RefineError> {
        let screen = env.observe();
        let reply = self.client.complete(&WireEvaluator::prompt(traj, env), screen.image.as_deref())?;
        self.usage += reply.usage;
        parse_verdict(&reply.text)
    }
}

pub trait Reflector {
    fn reflect(&mut self, traj: &Trajectory, reason: &str, round: u32) -> Result<ReflectionThought, RefineError>;
}

/// Lists the last three actions and the failure reason, and names the most
/// repeated action as the one to avoid.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultReflector;

impl Reflector for DefaultReflector {
    fn reflect(&mut self, traj: &Trajectory, reason: &str, round: u32) -> Result<ReflectionThought, RefineError> {
        if traj.outcome.is_success() {
            return Err(RefineError::NotAFailure);
        }
        let shorts: Vec<String> = traj.steps.iter().map(|s| s.action.short()).collect();
        let last: Vec<&str> = shorts.iter().rev().take(3).rev().map(String::as_str).collect();
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        for (i, s) in shorts.iter().enumerate() {
            let e = counts.entry(s.as_str()).or_insert((0, i));
            e.0 += 1;
            e.1 = i;
        }
        // most frequent, most recent on ties
        let repeated = counts.into_iter().filter(|(_, (n, _))| *n >= 2).max_by_key(|(_, (n, last))| (*n, *last)).map(|(s, _)| s);
        let mut text = format!("Attempt {round} failed: {reason}. ");
        if last.is_empty() {
            text.push_str("No action was executed.");
        } else {
            text.push_str(&format!("Last actions: {}.", last.join("; ")));
        }
        let verdict = match repeated {
            Some(a) => {
                text.push_str(&format!(" avoid repeating: {a}"));
                CauseVerdict::FailureCauseIdentified
            }
            None => {
                if let Some(a) = last.last() {
                    text.push_str(&format!(" Try something other than {a} at that point."));
                }
                CauseVerdict::Unknown
            }
        };
        Ok(ReflectionThought { text, round, verdict_of_previous: verdict })
    }
}

/// Remote reflector with the default one as fallback.
pub struct WireReflector {
    client: ChatClient,
    pub usage: Usage,
}

impl WireReflector {
    pub fn new(cfg: WireConfig) -> Self {
        WireReflector { client: ChatClient::new(cfg), usage: Usage::default() }
    }
}

impl Reflector for WireReflector {
    fn reflect(&mut self, traj: &Trajectory, reason: &str, round: u32) -> Result<ReflectionThought, RefineError> {
        if traj.outcome.is_success() {
            return Err(RefineError::NotAFailure);
        }
        let mut p = format!("Task: {}\nThe attempt below failed ({reason}).\n", traj.task.instruction);
        for s in &traj.steps {
            p.push_str(&format!("{}. {}\n", s.index + 1, s.action.short()));
        }
        p.push_str("In two or three sentences, say what went wrong and what to do differently next time.");
        match self.client.complete(&p, None) {
            Ok(reply) if !reply.text.trim().is_empty() => {
                self.usage += reply.usage;
                Ok(ReflectionThought { text: reply.text.trim().to_string(), round, verdict_of_previous: CauseVerdict::FailureCauseIdentified })
            }
            Ok(_) => DefaultReflector.reflect(traj, reason, round),
            Err(e) => {
                log::warn!("reflector call failed, using the default reflector: {e}");
                DefaultReflector.reflect(traj, reason, round)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub trajectory: Trajectory,
    pub evaluation: Evaluation,
    /// Thought produced after this round, when another round follows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionThought>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalOutcome {
    pub success: bool,
    pub rounds_used: u32,
    pub rounds: Vec<RoundRecord>,
}

impl FinalOutcome {
    pub fn turns(&self) -> usize {
        self.rounds.iter().map(|r| r.trajectory.turns()).sum()
    }

    pub fn usage(&self) -> Usage {
        self.rounds.iter().fold(Usage::default(), |acc, r| acc + r.trajectory.usage())
    }
}

/// Runs up to `max_rounds` attempts, feeding the reflections from failed
/// attempts (newest [`MAX_THOUGHTS`]) into the next one. Stops at the first
/// success. Every round uses the same seed; the round number is passed to
/// the policy.
pub fn run_with_retries(
    agent: &mut Agent<'_>,
    task: &Task,
    env: &mut dyn Environment,
    evaluator: &mut dyn Evaluator,
    reflector: &mut dyn Reflector,
    max_rounds: u32,
    seed: u64,
) -> Result<FinalOutcome, RefineError> {
    if max_rounds == 0 {
        return Err(RefineError::ZeroRounds);
    }
    let mut thoughts: Vec<ReflectionThought> = Vec::new();
    let mut rounds = Vec::new();
    for round in 1..=max_rounds {
        let start = thoughts.len().saturating_sub(MAX_THOUGHTS);
        let traj = agent.run_episode(task, env, EpisodeSpec { seed, round, reflections: &thoughts[start..] });
        let evaluation = match evaluator.evaluate(&traj, env) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("task {} round {round}: evaluation failed ({e}), counting as failure", task.id);
                Evaluation::Failure(format!("evaluation failed: {e}"))
            }
        };
        let success = evaluation.is_success();
        let reflection = match (&evaluation, round < max_rounds) {
            (Evaluation::Failure(reason), true) => {
                // an evaluator may call a finished-successful run a failure; reflect anyway
                let mut as_failed = traj.clone();
                if as_failed.outcome.is_success() {
                    as_failed.outcome = Outcome::Failure;
                }
                Some(reflector.reflect(&as_failed, reason, round)?)
            }
            _ => None,
        };
        if let Some(t) = &reflection {
            thoughts.push(t.clone());
        }
        rounds.push(RoundRecord { round, trajectory: traj, evaluation, reflection });
        if success {
            return Ok(FinalOutcome { success: true, rounds_used: round, rounds });
        }
    }
    Ok(FinalOutcome { success: false, rounds_used: max_rounds, rounds })
}
