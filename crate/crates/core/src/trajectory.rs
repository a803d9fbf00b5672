//! Tasks, per-step records and trajectories, with JSONL persistence.
//!
//! A persisted trajectory is one header line followed by one line per step:
//!
//! ```text
//! {"kind":"header","task":{...},"round":1,"seed":7,"outcome":"success","steps":4}
//! {"kind":"step","index":0,"screen":{...},"candidates":{...},...}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionSpace};
use crate::policy::CandidateSet;
use crate::som::LabeledScreen;
use crate::wire::Usage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task {0:?}: instruction is empty")]
    EmptyInstruction(String),
    #[error("task {0:?}: max_turns must be at least 1")]
    ZeroTurns(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct Task {
    pub id: String,
    pub instruction: String,
    pub action_space: ActionSpace,
    pub goal_id: String,
    pub max_turns: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    id: String,
    instruction: String,
    action_space: ActionSpace,
    goal_id: String,
    max_turns: usize,
}

impl TryFrom<RawTask> for Task {
    type Error = TaskError;

    fn try_from(r: RawTask) -> Result<Self, TaskError> {
        Task::new(r.id, r.instruction, r.action_space, r.goal_id, r.max_turns)
    }
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        action_space: ActionSpace,
        goal_id: impl Into<String>,
        max_turns: usize,
    ) -> Result<Self, TaskError> {
        let id = id.into();
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(TaskError::EmptyInstruction(id));
        }
        if max_turns == 0 {
            return Err(TaskError::ZeroTurns(id));
        }
        Ok(Task { id, instruction, action_space, goal_id: goal_id.into(), max_turns })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Truncated,
    Running,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }
}

/// Everything logged for one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub screen: LabeledScreen,
    pub candidates: CandidateSet,
    /// One score per candidate; empty when the strategy does not score.
    #[serde(default)]
    pub scores: Vec<f64>,
    pub chosen_index: usize,
    pub action: Action,
    pub summary_before: String,
    #[serde(default)]
    pub usage: Usage,
    /// Scoring failed and the first candidate was executed instead.
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: Task,
    pub round: u32,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_cause: Option<String>,
    /// Tokens spent on calls that did not produce an executed step.
    #[serde(default)]
    pub extra_usage: Usage,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("step {index}: chosen index {chosen} outside {len} candidates")]
    ChosenOutOfBounds { index: usize, chosen: usize, len: usize },
    #[error("step {index}: {scores} scores for {len} candidates")]
    ScoreCount { index: usize, scores: usize, len: usize },
    #[error("step {index}: executed action differs from the chosen candidate")]
    ActionMismatch { index: usize },
    #[error("{steps} steps exceed max_turns {max}")]
    TooLong { steps: usize, max: usize },
    #[error("step indices are not 0..n")]
    Indices,
    #[error("jsonl line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header {
        task: Task,
        round: u32,
        seed: u64,
        outcome: Outcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure_cause: Option<String>,
        #[serde(default)]
        extra_usage: Usage,
        steps: usize,
    },
    Step(Box<StepRecord>),
}

impl Trajectory {
    pub fn new(task: Task, round: u32, seed: u64) -> Self {
        Trajectory { task, round, seed, steps: Vec::new(), outcome: Outcome::Running, failure_cause: None, extra_usage: Usage::default() }
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }

    pub fn turns(&self) -> usize {
        self.steps.len()
    }

    pub fn usage(&self) -> Usage {
        self.steps.iter().fold(self.extra_usage, |acc, s| acc + s.usage)
    }

    /// Checks the structural invariants of a finished or running trajectory.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.steps.len() > self.task.max_turns {
            return Err(TrajectoryError::TooLong { steps: self.steps.len(), max: self.task.max_turns });
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.index != i {
                return Err(TrajectoryError::Indices);
            }
            let len = s.candidates.len();
            if s.chosen_index >= len {
                return Err(TrajectoryError::ChosenOutOfBounds { index: i, chosen: s.chosen_index, len });
            }
            if !s.scores.is_empty() && s.scores.len() != len {
                return Err(TrajectoryError::ScoreCount { index: i, scores: s.scores.len(), len });
            }
            if s.candidates.candidates()[s.chosen_index].action != s.action {
                return Err(TrajectoryError::ActionMismatch { index: i });
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TrajectoryError> {
        let header = Line::Header {
            task: self.task.clone(),
            round: self.round,
            seed: self.seed,
            outcome: self.outcome,
            failure_cause: self.failure_cause.clone(),
            extra_usage: self.extra_usage,
            steps: self.steps.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for s in &self.steps {
            writeln!(w, "{}", serde_json::to_string(&Line::Step(Box::new(s.clone()))).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TrajectoryError> {
        let mut traj: Option<Trajectory> = None;
        let mut expected = 0;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| TrajectoryError::Format { line: n + 1, message: e.to_string() })?;
            match (parsed, traj.as_mut()) {
                (Line::Header { task, round, seed, outcome, failure_cause, extra_usage, steps }, None) => {
                    expected = steps;
                    traj = Some(Trajectory { task, round, seed, steps: Vec::new(), outcome, failure_cause, extra_usage });
                }
                (Line::Step(s), Some(t)) => t.steps.push(*s),
                (Line::Header { .. }, Some(_)) => {
                    return Err(TrajectoryError::Format { line: n + 1, message: "second header".into() })
                }
                (Line::Step(_), None) => {
                    return Err(TrajectoryError::Format { line: n + 1, message: "step before header".into() })
                }
            }
        }
        let t = traj.ok_or(TrajectoryError::Format { line: 0, message: "missing header".into() })?;
        if t.steps.len() != expected {
            return Err(TrajectoryError::Format {
                line: 0,
                message: format!("header announces {expected} steps, found {}", t.steps.len()),
            });
        }
        t.validate()?;
        Ok(t)
    }

    pub fn from_jsonl(s: &str) -> Result<Self, TrajectoryError> {
        Trajectory::read_jsonl(s.as_bytes())
    }
}
