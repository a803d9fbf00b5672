//! Executing a suite task under a strategy and persisting runs to disk.
//!
//! A run directory holds `manifest.json`, `report.json`, `report.csv` and one
//! JSONL file per executed trajectory under `trajectories/`. Directories are
//! never reused: [`RunDir::create`] picks a fresh name.

use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::ActionSpace;
use crate::engine::{Agent, EpisodeSpec, Strategy};
use crate::eval::{element_and_step_sr, static_score_partial, EvalError, Pricing, RunReport, TaskRecord};
use crate::refine::{run_with_retries, Evaluation, Evaluator, ReflectionThought, RefineError, Reflector};
use crate::simenv::{SimError, SimScript, SimTask};
use crate::trajectory::{Outcome, Trajectory, TrajectoryError};
use crate::wire::Usage;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("need {needed} seeds, got {got}")]
    Seeds { needed: usize, got: usize },
    #[error("max_rounds must be at least 1")]
    ZeroRounds,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Live episodes in the simulator, judged by task success.
    Dynamic,
    /// Replay of the demo, judged step by step.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub strategy: Strategy,
    pub mode: EvalMode,
    pub max_rounds: u32,
    pub seeds: Vec<u64>,
}

impl SuiteSpec {
    pub fn trials(&self) -> usize {
        self.strategy.pass_n.unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.max_rounds == 0 {
            return Err(RunError::ZeroRounds);
        }
        if self.seeds.len() < self.trials() {
            return Err(RunError::Seeds { needed: self.trials(), got: self.seeds.len() });
        }
        Ok(())
    }
}

/// One executed trajectory as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub trial: usize,
    pub round: u32,
    pub seed: u64,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionThought>,
    pub trajectory_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub record: TaskRecord,
    pub entries: Vec<RoundEntry>,
    pub trajectories: Vec<Trajectory>,
}

pub fn trajectory_file_name(task_id: &str, trial: usize, round: u32) -> String {
    let safe: String = task_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.t{trial}.r{round}.jsonl")
}

/// Runs one task. Dynamic mode runs `pass_n` trials (default 1), each with
/// up to `max_rounds` reflective rounds; the task succeeds if any trial
/// does. Static mode replays the demo once with the first seed.
pub fn execute_task(
    agent: &mut Agent<'_>,
    script: &SimScript,
    task: &Arc<SimTask>,
    spec: &SuiteSpec,
    evaluator: &mut dyn Evaluator,
    reflector: &mut dyn Reflector,
) -> Result<TaskRun, RunError> {
    spec.validate()?;
    let t = &task.task;
    let label = spec.strategy.label();
    match spec.mode {
        EvalMode::Static => {
            let run = agent.run_static(script, task, EpisodeSpec::seed(spec.seeds[0]))?;
            let cfg = agent.cfg.match_cfg.clone();
            let static_score = static_score_partial(&run.trajectory, &run.ground_truth, &cfg)?;
            let (element_accuracy, step_success_rate) =
                if t.action_space == ActionSpace::Mind2Web && run.ground_truth.iter().all(|g| g.element_candidates.is_some()) {
                    let (e, s) = element_and_step_sr(&run.trajectory, &run.ground_truth, &cfg)?;
                    (Some(e), Some(s))
                } else {
                    (None, None)
                };
            let usage = run.trajectory.usage();
            let file = trajectory_file_name(&t.id, 0, 1);
            let record = TaskRecord {
                task_id: t.id.clone(),
                strategy: label,
                outcome: run.trajectory.outcome,
                turns: run.trajectory.turns(),
                tokens_prompt: usage.prompt_tokens,
                tokens_completion: usage.completion_tokens,
                rounds_used: 1,
                static_score: Some(static_score),
                element_accuracy,
                step_success_rate,
            };
            let entry = RoundEntry {
                trial: 0,
                round: 1,
                seed: spec.seeds[0],
                outcome: run.trajectory.outcome,
                evaluation: None,
                reflection: None,
                trajectory_file: file,
            };
            Ok(TaskRun { record, entries: vec![entry], trajectories: vec![run.trajectory] })
        }
        EvalMode::Dynamic => {
            let mut env = script.env(task);
            let mut entries = Vec::new();
            let mut trajectories = Vec::new();
            let mut success = false;
            let mut rounds_used = 0;
            let mut usage = Usage::default();
            let mut last_outcome = Outcome::Failure;
            for (trial, seed) in spec.seeds.iter().take(spec.trials()).enumerate() {
                let fin = run_with_retries(agent, t, &mut env, evaluator, reflector, spec.max_rounds, *seed)?;
                success |= fin.success;
                rounds_used += fin.rounds_used;
                usage += fin.usage();
                for r in fin.rounds {
                    last_outcome = r.trajectory.outcome;
                    entries.push(RoundEntry {
                        trial,
                        round: r.round,
                        seed: *seed,
                        outcome: r.trajectory.outcome,
                        evaluation: Some(r.evaluation),
                        reflection: r.reflection,
                        trajectory_file: trajectory_file_name(&t.id, trial, r.round),
                    });
                    trajectories.push(r.trajectory);
                }
            }
            let record = TaskRecord {
                task_id: t.id.clone(),
                strategy: label,
                outcome: if success { Outcome::Success } else { last_outcome },
                turns: trajectories.iter().map(Trajectory::turns).sum(),
                tokens_prompt: usage.prompt_tokens,
                tokens_completion: usage.completion_tokens,
                rounds_used,
                static_score: None,
                element_accuracy: None,
                step_success_rate: None,
            };
            Ok(TaskRun { record, entries, trajectories })
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_id: String,
    pub rounds: Vec<RoundEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub strategy: String,
    pub kind: String,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_n: Option<usize>,
    pub mode: EvalMode,
    pub max_rounds: u32,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub suite_hash: String,
    pub tasks: Vec<TaskManifest>,
}

impl Manifest {
    pub fn new(spec: &SuiteSpec, config_hash: String, suite_hash: String, runs: &[TaskRun]) -> Self {
        Manifest {
            strategy: spec.strategy.label(),
            kind: spec.strategy.kind.name().to_string(),
            k: spec.strategy.k,
            pass_n: spec.strategy.pass_n,
            mode: spec.mode,
            max_rounds: spec.max_rounds,
            seeds: spec.seeds.clone(),
            config_hash,
            suite_hash,
            tasks: runs.iter().map(|r| TaskManifest { task_id: r.record.task_id.clone(), rounds: r.entries.clone() }).collect(),
        }
    }
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `root/name`, or `root/name-2`, `root/name-3`, ... when taken.
    pub fn create(root: &Path, name: &str) -> Result<RunDir, RunError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        for n in 1u32.. {
            let candidate = if n == 1 { root.join(name) } else { root.join(format!("{name}-{n}")) };
            match fs::create_dir(&candidate) {
                Ok(()) => {
                    let traj = candidate.join("trajectories");
                    fs::create_dir(&traj).map_err(io_err(&traj))?;
                    return Ok(RunDir { path: candidate });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(RunError::Io { path: candidate, source: e }),
            }
        }
        unreachable!("u32 exhausted")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_new(&self, rel: &str, contents: &[u8]) -> Result<(), RunError> {
        use std::io::Write;
        let path = self.path.join(rel);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(io_err(&path))?;
        f.write_all(contents).map_err(io_err(&path))
    }

    /// Writes everything for a finished suite.
    pub fn write_all(&self, manifest: &Manifest, report: &RunReport, runs: &[TaskRun]) -> Result<(), RunError> {
        for run in runs {
            for (e, t) in run.entries.iter().zip(&run.trajectories) {
                self.write_new(&format!("trajectories/{}", e.trajectory_file), t.to_jsonl().as_bytes())?;
            }
        }
        self.write_new("manifest.json", pretty(manifest).as_bytes())?;
        self.write_new("report.json", pretty(report).as_bytes())?;
        self.write_new("report.csv", report.records_csv().as_bytes())
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub manifest: Manifest,
    pub report: RunReport,
}

/// Reads a run directory back, checking that the manifest, report and
/// trajectory files agree.
pub fn load_run(dir: &Path) -> Result<LoadedRun, RunError> {
    let corrupt = |path: &Path, message: String| RunError::Corrupt { path: path.to_path_buf(), message };
    let read = |rel: &str| {
        let p = dir.join(rel);
        fs::read_to_string(&p).map_err(io_err(&p)).map(|s| (p, s))
    };
    let (mp, text) = read("manifest.json")?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(&mp, e.to_string()))?;
    let (rp, text) = read("report.json")?;
    let report: RunReport = serde_json::from_str(&text).map_err(|e| corrupt(&rp, e.to_string()))?;
    if !report.is_consistent() {
        return Err(corrupt(&rp, "aggregates do not match records".into()));
    }
    if report.suite_hash != manifest.suite_hash {
        return Err(corrupt(&rp, "suite hash differs from manifest".into()));
    }
    let ids: Vec<&str> = manifest.tasks.iter().map(|t| t.task_id.as_str()).collect();
    let rec_ids: Vec<&str> = report.records.iter().map(|r| r.task_id.as_str()).collect();
    if ids != rec_ids {
        return Err(corrupt(&rp, "records do not match manifest tasks".into()));
    }
    for e in manifest.tasks.iter().flat_map(|t| &t.rounds) {
        let p = dir.join("trajectories").join(&e.trajectory_file);
        let f = fs::File::open(&p).map_err(io_err(&p))?;
        let traj = Trajectory::read_jsonl(BufReader::new(f)).map_err(|e: TrajectoryError| corrupt(&p, e.to_string()))?;
        if traj.outcome != e.outcome || traj.round != e.round {
            return Err(corrupt(&p, "trajectory disagrees with manifest".into()));
        }
    }
    Ok(LoadedRun { manifest, report })
}

/// Folds finished task runs into a report.
pub fn build_report(spec: &SuiteSpec, suite_hash: &str, pricing: Pricing, runs: &[TaskRun]) -> RunReport {
    RunReport::new(spec.strategy.label(), suite_hash, pricing, runs.iter().map(|r| r.record.clone()).collect())
}
