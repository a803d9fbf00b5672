//! The per-step loop: summarize, propose k candidates, score, select, act.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{validate_action, Action, ActionType};
use crate::matcher::{match_action, GroundTruthAction, MatchConfig};
use crate::policy::{CandidateSet, PolicyBackend, PolicyError, PolicyRequest};
use crate::refine::ReflectionThought;
use crate::reward::{RewardBackend, ScoreContext};
use crate::simenv::{Environment, SimScript, SimTask};
use crate::som::LabeledScreen;
use crate::trajectory::{Outcome, StepRecord, Task, Trajectory};
use crate::wire::{ChatClient, Usage, WireConfig};

pub const DEFAULT_SUMMARY_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Dp,
    TopkFirst,
    Guidnav,
    OracleTopk,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [StrategyKind::Dp, StrategyKind::TopkFirst, StrategyKind::Guidnav, StrategyKind::OracleTopk];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Dp => "dp",
            StrategyKind::TopkFirst => "topk_first",
            StrategyKind::Guidnav => "guidnav",
            StrategyKind::OracleTopk => "oracle_topk",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EngineError::BadStrategy(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_n: Option<usize>,
}

impl Strategy {
    /// `dp` always uses k = 1 whatever is asked.
    pub fn new(kind: StrategyKind, k: usize, pass_n: Option<usize>) -> Result<Self, EngineError> {
        let k = if kind == StrategyKind::Dp { 1 } else { k };
        if k == 0 {
            return Err(EngineError::BadStrategy("k must be at least 1".into()));
        }
        if pass_n == Some(0) {
            return Err(EngineError::BadStrategy("pass_n must be at least 1".into()));
        }
        Ok(Strategy { kind, k, pass_n })
    }

    pub fn dp() -> Self {
        Strategy { kind: StrategyKind::Dp, k: 1, pass_n: None }
    }

    pub fn topk_first(k: usize) -> Self {
        Strategy::new(StrategyKind::TopkFirst, k, None).expect("k >= 1")
    }

    pub fn guidnav(k: usize) -> Self {
        Strategy::new(StrategyKind::Guidnav, k, None).expect("k >= 1")
    }

    pub fn oracle_topk(k: usize) -> Self {
        Strategy::new(StrategyKind::OracleTopk, k, None).expect("k >= 1")
    }

    pub fn label(&self) -> String {
        match self.pass_n {
            Some(n) if n > 1 => format!("{}@k{}-pass{}", self.kind, self.k, n),
            _ => format!("{}@k{}", self.kind, self.k),
        }
    }

    fn scores(&self) -> bool {
        matches!(self.kind, StrategyKind::Guidnav | StrategyKind::OracleTopk)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("{scores} scores for {candidates} candidates")]
    ScoreCount { scores: usize, candidates: usize },
    #[error("invalid strategy: {0}")]
    BadStrategy(String),
    #[error("pass@n needs at least one seed")]
    NoSeeds,
}

/// Index of the candidate to execute. Score-based strategies take the
/// argmax, keeping the lowest index on ties; the others take the first.
pub fn select(cands: &CandidateSet, scores: &[f64], strategy: &Strategy) -> Result<usize, EngineError> {
    if cands.is_empty() {
        return Err(EngineError::EmptyCandidates);
    }
    if !strategy.scores() {
        return Ok(0);
    }
    if scores.len() != cands.len() {
        return Err(EngineError::ScoreCount { scores: scores.len(), candidates: cands.len() });
    }
    Ok(argmax_first(scores))
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// history summaries

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub text: String,
    pub turns_covered: usize,
}

pub trait Summarizer: Send {
    fn summarize(&mut self, task: &Task, history: &[(&LabeledScreen, &Action)]) -> HistorySummary;

    fn drain_usage(&mut self) -> Usage {
        Usage::default()
    }
}

/// One clause per executed step.
pub fn describe_step(screen: &LabeledScreen, a: &Action) -> String {
    let target = |id: u32| match screen.name_of(id) {
        Some(n) => format!("element {id} ({})", n.to_lowercase()),
        None => format!("element {id}"),
    };
    match a.action_type {
        ActionType::Click => format!("clicked {}", target(a.id.unwrap_or_default())),
        ActionType::Longpress => format!("long-pressed {}", target(a.id.unwrap_or_default())),
        ActionType::Type => match a.id {
            Some(id) => format!("typed '{}' into {}", a.text.as_deref().unwrap_or_default(), target(id)),
            None => format!("typed '{}'", a.text.as_deref().unwrap_or_default()),
        },
        ActionType::Scroll => format!("scrolled {}", a.direction.map(|d| d.name()).unwrap_or("?")),
        ActionType::NavigateHome => "went to the home screen".into(),
        ActionType::NavigateBack => "went back".into(),
        ActionType::Enter => "pressed enter".into(),
        ActionType::TaskComplete => "declared the task complete".into(),
    }
}

/// Joins clauses with "; ", dropping the oldest ones until the text fits.
pub fn cap_clauses(clauses: &[String], cap: usize) -> String {
    let mut len = 0;
    let mut start = clauses.len();
    for (i, c) in clauses.iter().enumerate().rev() {
        let add = c.len() + if start == clauses.len() { 0 } else { 2 };
        if len + add > cap {
            break;
        }
        len += add;
        start = i;
    }
    if start == clauses.len() {
        // even the newest clause is too long: keep its tail
        return clauses.last().map(|c| tail_chars(c, cap)).unwrap_or_default();
    }
    clauses[start..].join("; ")
}

fn tail_chars(s: &str, cap: usize) -> String {
    let mut cut = s.len().saturating_sub(cap);
    while !s.is_char_boundary(cut) {
        cut += 1;
    }
    s[cut..].to_string()
}

#[derive(Debug, Clone)]
pub struct DeterministicSummarizer {
    pub cap: usize,
}

impl Default for DeterministicSummarizer {
    fn default() -> Self {
        DeterministicSummarizer { cap: DEFAULT_SUMMARY_CAP }
    }
}

impl Summarizer for DeterministicSummarizer {
    fn summarize(&mut self, _task: &Task, history: &[(&LabeledScreen, &Action)]) -> HistorySummary {
        let clauses: Vec<String> = history.iter().map(|(s, a)| describe_step(s, a)).collect();
        HistorySummary { text: cap_clauses(&clauses, self.cap), turns_covered: history.len() }
    }
}

/// Asks a remote model to condense the history; falls back to the
/// deterministic summary if the call fails.
pub struct WireSummarizer {
    client: ChatClient,
    fallback: DeterministicSummarizer,
    usage: Usage,
}

impl WireSummarizer {
    pub fn new(cfg: WireConfig, cap: usize) -> Self {
        WireSummarizer { client: ChatClient::new(cfg), fallback: DeterministicSummarizer { cap }, usage: Usage::default() }
    }

    pub fn prompt(task: &Task, history: &[(&LabeledScreen, &Action)]) -> String {
        let mut p = format!("Task: {}\nActions taken so far, oldest first:\n", task.instruction);
        for (i, (s, a)) in history.iter().enumerate() {
            p.push_str(&format!("{}. {} on screen {}\n", i + 1, describe_step(s, a), s.screen_id));
        }
        p.push_str("\nCondense these actions into a brief history that keeps what matters for the next step.");
        p
    }
}

impl Summarizer for WireSummarizer {
    fn summarize(&mut self, task: &Task, history: &[(&LabeledScreen, &Action)]) -> HistorySummary {
        if history.is_empty() {
            return HistorySummary { text: String::new(), turns_covered: 0 };
        }
        match self.client.complete(&WireSummarizer::prompt(task, history), None) {
            Ok(reply) => {
                self.usage += reply.usage;
                HistorySummary { text: tail_chars(reply.text.trim(), self.fallback.cap), turns_covered: history.len() }
            }
            Err(e) => {
                log::warn!("summarizer call failed, using the deterministic summary: {e}");
                self.fallback.summarize(task, history)
            }
        }
    }

    fn drain_usage(&mut self) -> Usage {
        std::mem::take(&mut self.usage)
    }
}

// ---------------------------------------------------------------------------
// episodes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct EngineConfig {
    pub match_cfg: MatchConfig,
}


/// Per-episode inputs besides the task and environment.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSpec<'a> {
    pub seed: u64,
    pub round: u32,
    pub reflections: &'a [ReflectionThought],
}

impl EpisodeSpec<'_> {
    pub fn seed(seed: u64) -> EpisodeSpec<'static> {
        EpisodeSpec { seed, round: 1, reflections: &[] }
    }
}

/// Everything needed to act: one policy, one reward backend, one summarizer.
pub struct Agent<'a> {
    pub policy: &'a mut dyn PolicyBackend,
    pub reward: &'a dyn RewardBackend,
    pub summarizer: &'a mut dyn Summarizer,
    pub strategy: Strategy,
    pub cfg: EngineConfig,
}

struct Observation<'a> {
    step_index: usize,
    summary: &'a str,
    screen: &'a LabeledScreen,
    gt: Option<&'a GroundTruthAction>,
    expert: Option<&'a Action>,
}

enum Decision {
    Step(Box<StepRecord>),
    Abort { cause: String, usage: Usage },
}

impl<'a> Agent<'a> {
    pub fn new(
        policy: &'a mut dyn PolicyBackend,
        reward: &'a dyn RewardBackend,
        summarizer: &'a mut dyn Summarizer,
        strategy: Strategy,
    ) -> Self {
        Agent { policy, reward, summarizer, strategy, cfg: EngineConfig::default() }
    }

    fn propose(&mut self, task: &Task, obs: &Observation<'_>, spec: &EpisodeSpec<'_>) -> (Result<CandidateSet, PolicyError>, Usage) {
        let req = PolicyRequest {
            task,
            step_index: obs.step_index,
            summary: obs.summary,
            screen: obs.screen,
            k: self.strategy.k,
            reflections: spec.reflections,
            seed: spec.seed,
            round: spec.round,
            expert: obs.expert,
        };
        let mut wasted = Usage::default();
        for attempt in 0..2 {
            match self.policy.propose(&req) {
                Ok(reply) => return (Ok(reply.candidates), wasted + reply.usage),
                Err(e) if e.is_parse() && attempt == 0 => {
                    log::warn!("task {} step {}: {e}; asking again", task.id, obs.step_index);
                    wasted += e.usage();
                }
                Err(e) => {
                    wasted += e.usage();
                    return (Err(e), wasted);
                }
            }
        }
        unreachable!("second attempt always returns")
    }

    fn decide(&mut self, task: &Task, obs: Observation<'_>, spec: &EpisodeSpec<'_>) -> Decision {
        let (proposed, mut usage) = self.propose(task, &obs, spec);
        let proposed = match proposed {
            Ok(c) => c,
            Err(e) => return Decision::Abort { cause: format!("policy failed at step {}: {e}", obs.step_index), usage },
        };
        let mut notes = Vec::new();
        let space = task.action_space;
        let trimmed = proposed.truncated(self.strategy.k);
        let candidates = match trimmed.filtered(|c| validate_action(&c.action, space).is_empty()) {
            Some(c) => c,
            None => {
                return Decision::Abort {
                    cause: format!("policy failed at step {}: no candidate is valid in {space}", obs.step_index),
                    usage,
                }
            }
        };
        if candidates.len() < trimmed.len() {
            notes.push(format!("dropped {} invalid candidate(s)", trimmed.len() - candidates.len()));
        }

        let mut degraded = false;
        let scores: Vec<f64> = match self.strategy.kind {
            StrategyKind::Dp | StrategyKind::TopkFirst => Vec::new(),
            StrategyKind::Guidnav => {
                let ctx = ScoreContext {
                    instruction: &task.instruction,
                    summary: obs.summary,
                    screen: obs.screen,
                    step_index: obs.step_index,
                    ground_truth: obs.gt,
                };
                let scored: Result<Vec<f64>, _> = candidates.candidates().iter().map(|c| self.reward.score(&ctx, &c.action)).collect();
                usage += self.reward.drain_usage();
                match scored {
                    Ok(s) => s,
                    Err(e) => {
                        degraded = true;
                        notes.push(format!("scoring unavailable ({e}); executed the first candidate"));
                        Vec::new()
                    }
                }
            }
            StrategyKind::OracleTopk => match obs.gt {
                Some(gt) => candidates
                    .candidates()
                    .iter()
                    .map(|c| if match_action(&c.action, gt, obs.screen, &self.cfg.match_cfg) { 1.0 } else { 0.0 })
                    .collect(),
                None => {
                    degraded = true;
                    notes.push(format!(
                        "scoring unavailable ({}); executed the first candidate",
                        crate::reward::RewardError::NoGroundTruth(obs.step_index)
                    ));
                    Vec::new()
                }
            },
        };
        if !scores.is_empty() && scores.iter().all(|s| *s == 0.0) {
            notes.push("all candidates scored 0".into());
        }
        let effective = if degraded { Strategy { kind: StrategyKind::TopkFirst, ..self.strategy } } else { self.strategy };
        let chosen_index = select(&candidates, &scores, &effective).expect("non-empty, scores aligned");
        let action = candidates.candidates()[chosen_index].action.clone();
        Decision::Step(Box::new(StepRecord {
            index: obs.step_index,
            screen: obs.screen.clone(),
            candidates,
            scores,
            chosen_index,
            action,
            summary_before: obs.summary.to_string(),
            usage,
            degraded,
            notes,
        }))
    }

    /// Runs one episode from a fresh reset until the goal holds, the agent
    /// declares completion, or the turn budget runs out.
    pub fn run_episode(&mut self, task: &Task, env: &mut dyn Environment, spec: EpisodeSpec<'_>) -> Trajectory {
        let mut traj = Trajectory::new(task.clone(), spec.round, spec.seed);
        let mut screen = env.reset();
        while traj.steps.len() < task.max_turns {
            let history: Vec<(&LabeledScreen, &Action)> = traj.steps.iter().map(|s| (&s.screen, &s.action)).collect();
            let summary = self.summarizer.summarize(task, &history);
            let summary_usage = self.summarizer.drain_usage();
            let gt = env.ground_truth();
            let expert = env.expert_action();
            let obs = Observation {
                step_index: traj.steps.len(),
                summary: &summary.text,
                screen: &screen,
                gt: gt.as_ref(),
                expert: expert.as_ref(),
            };
            let mut record = match self.decide(task, obs, &spec) {
                Decision::Step(r) => r,
                Decision::Abort { cause, usage } => {
                    traj.extra_usage += usage + summary_usage;
                    traj.outcome = Outcome::Failure;
                    traj.failure_cause = Some(cause);
                    return traj;
                }
            };
            record.usage += summary_usage;
            let action = record.action.clone();
            traj.steps.push(*record);
            match env.apply(&action) {
                Ok(next) => screen = next,
                Err(e) => {
                    traj.outcome = Outcome::Failure;
                    traj.failure_cause = Some(format!("environment rejected step {}: {e}", traj.steps.len() - 1));
                    return traj;
                }
            }
            if env.goal_reached() {
                traj.outcome = Outcome::Success;
                return traj;
            }
            if action.action_type == ActionType::TaskComplete {
                traj.outcome = Outcome::Failure;
                traj.failure_cause = Some("declared complete before the goal was reached".into());
                return traj;
            }
        }
        traj.outcome = Outcome::Truncated;
        traj.failure_cause = Some("max turns".into());
        traj
    }

    /// N independent trials with the given seeds; success if any succeeds.
    pub fn pass_at_n(&mut self, task: &Task, env: &mut dyn Environment, seeds: &[u64]) -> Result<PassOutcome, EngineError> {
        if seeds.is_empty() {
            return Err(EngineError::NoSeeds);
        }
        let trials: Vec<Trajectory> = seeds.iter().map(|s| self.run_episode(task, env, EpisodeSpec::seed(*s))).collect();
        Ok(PassOutcome { success: trials.iter().any(|t| t.outcome.is_success()), trials })
    }

    /// Static replay: at every demo state, choose an action against the
    /// demo's own history and record it without acting. The outcome is
    /// success when every step matches.
    pub fn run_static(&mut self, script: &SimScript, task: &SimTask, spec: EpisodeSpec<'_>) -> Result<StaticRun, crate::simenv::SimError> {
        let pairs = script.demo_trajectory(task)?;
        let t = &task.task;
        let mut traj = Trajectory::new(t.clone(), spec.round, spec.seed);
        let mut gts = Vec::with_capacity(pairs.len());
        for (i, (screen, gt)) in pairs.iter().enumerate() {
            let history: Vec<(&LabeledScreen, &Action)> = pairs[..i].iter().zip(&task.demo).map(|((s, _), d)| (s, &d.action)).collect();
            let summary = self.summarizer.summarize(t, &history);
            let summary_usage = self.summarizer.drain_usage();
            let obs = Observation { step_index: i, summary: &summary.text, screen, gt: Some(gt), expert: Some(&task.demo[i].action) };
            match self.decide(t, obs, &spec) {
                Decision::Step(mut r) => {
                    r.usage += summary_usage;
                    traj.steps.push(*r);
                    gts.push(gt.clone());
                }
                Decision::Abort { cause, usage } => {
                    traj.extra_usage += usage + summary_usage;
                    traj.failure_cause = Some(cause);
                    break;
                }
            }
        }
        let all_match = traj.steps.len() == pairs.len()
            && traj.steps.iter().zip(&gts).all(|(s, gt)| match_action(&s.action, gt, &s.screen, &self.cfg.match_cfg));
        traj.outcome = if all_match { Outcome::Success } else { Outcome::Failure };
        // an aborted replay still counts every demo step in the denominator
        let missing = pairs.len() - traj.steps.len();
        Ok(StaticRun { trajectory: traj, ground_truth: pairs.into_iter().map(|p| p.1).collect(), unanswered: missing })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassOutcome {
    pub success: bool,
    pub trials: Vec<Trajectory>,
}

/// A static replay: predicted steps aligned with the demo's ground truth.
/// `unanswered` trailing demo steps got no prediction because the policy
/// failed.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRun {
    pub trajectory: Trajectory,
    pub ground_truth: Vec<GroundTruthAction>,
    pub unanswered: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{ActionSpace, Direction};
    use crate::policy::{Candidate, RankProfile, ScriptedPolicy, StochasticPolicy};
    use crate::reward::{OracleReward, RewardError};
    use crate::simenv::parse_task_script;
    use crate::som::assign_labels;
    use proptest::prelude::*;
    use super::Strategy;

    const SEARCH_APP: &str = include_str!("../fixtures/search_app.json");

    fn set(actions: Vec<Action>) -> CandidateSet {
        let n = actions.len();
        CandidateSet::new(n, actions.into_iter().map(|a| Candidate::new(a, 0.5)).collect()).unwrap()
    }

    #[test]
    fn selection_rules() {
        let c = set(vec![Action::click(0), Action::click(1), Action::click(2)]);
        assert_eq!(select(&c, &[0.3, 0.9, 0.4], &Strategy::guidnav(3)), Ok(1));
        assert_eq!(select(&c, &[0.9, 0.9, 0.1], &Strategy::guidnav(3)), Ok(0));
        assert_eq!(select(&c, &[0.1, 0.2, 0.9], &Strategy::topk_first(3)), Ok(0));
        assert_eq!(select(&c, &[], &Strategy::topk_first(3)), Ok(0));
        assert_eq!(select(&c, &[0.1], &Strategy::guidnav(3)), Err(EngineError::ScoreCount { scores: 1, candidates: 3 }));
        assert_eq!(Strategy::new(StrategyKind::Dp, 3, None).unwrap().k, 1);
        assert!(Strategy::new(StrategyKind::Guidnav, 0, None).is_err());
        assert!(Strategy::new(StrategyKind::Guidnav, 3, Some(0)).is_err());
    }

    #[test]
    fn summaries() {
        let task = Task::new("t", "x", ActionSpace::Aitw, "g", 60).unwrap();
        let s = crate::som::assign_named(
            vec![(crate::som::BBox::new(0., 0., 5., 5.).unwrap(), None); 6]
                .into_iter()
                .chain([(crate::som::BBox::new(0., 0., 5., 5.).unwrap(), Some("Search bar".to_string()))])
                .collect(),
            10.,
            10.,
        )
        .unwrap();
        let mut d = DeterministicSummarizer::default();
        assert_eq!(d.summarize(&task, &[]), HistorySummary { text: String::new(), turns_covered: 0 });
        let click = Action::click(6);
        let typed = Action::type_text("walmart");
        let h = d.summarize(&task, &[(&s, &click), (&s, &typed)]);
        assert_eq!(h.text, "clicked element 6 (search bar); typed 'walmart'");
        assert_eq!(h.turns_covered, 2);

        let many: Vec<Action> = (0..50).map(|i| Action::type_text(format!("query number {i} with padding text"))).collect();
        let hist: Vec<(&LabeledScreen, &Action)> = many.iter().map(|a| (&s, a)).collect();
        let long = d.summarize(&task, &hist);
        assert!(long.text.len() <= 1000);
        assert!(long.text.ends_with("typed 'query number 49 with padding text'"));
        assert!(!long.text.contains("number 0 "));
        assert_eq!(long.turns_covered, 50);
        assert_eq!(cap_clauses(&["abcdef".to_string()], 3), "def");
    }

    fn script() -> SimScript {
        parse_task_script(SEARCH_APP).unwrap()
    }

    fn demo_policy(s: &SimScript, task: &str) -> ScriptedPolicy {
        let t = s.task(task).unwrap();
        let mut p = ScriptedPolicy::new();
        for (i, d) in t.demo.iter().enumerate() {
            p.insert(task, i, set(vec![Action::scroll(Direction::Down), d.action.clone(), Action::simple(ActionType::NavigateBack)]));
        }
        p
    }

    #[test]
    fn guidnav_with_oracle_picks_rank_two() {
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut policy = demo_policy(&s, "search_walmart");
        let reward = OracleReward::default();
        let mut summ = DeterministicSummarizer::default();
        let mut agent = Agent::new(&mut policy, &reward, &mut summ, Strategy::guidnav(3));
        let traj = agent.run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        assert_eq!(traj.outcome, Outcome::Success);
        assert_eq!(traj.turns(), 4);
        assert!(traj.steps.iter().all(|s| s.chosen_index == 1 && s.scores == vec![0.0, 1.0, 0.0]));
        traj.validate().unwrap();
    }

    #[test]
    fn topk_first_runs_off_the_script() {
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut policy = demo_policy(&s, "search_walmart");
        let reward = OracleReward::default();
        let mut summ = DeterministicSummarizer::default();
        let mut agent = Agent::new(&mut policy, &reward, &mut summ, Strategy::topk_first(3));
        // the distractor at index 0 is taken every step; the script runs out after the demo length
        let traj = agent.run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        assert_eq!(traj.outcome, Outcome::Failure);
        assert!(traj.failure_cause.as_deref().unwrap().contains("no scripted candidates"));
    }

    #[test]
    fn dp_requests_one_candidate() {
        struct CountK(Vec<usize>);
        impl PolicyBackend for CountK {
            fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<crate::policy::PolicyReply, PolicyError> {
                self.0.push(req.k);
                Ok(crate::policy::PolicyReply { candidates: set(vec![Action::scroll(Direction::Down)]), usage: Usage::default() })
            }
        }
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut p = CountK(vec![]);
        let reward = OracleReward::default();
        let mut summ = DeterministicSummarizer::default();
        let traj = Agent::new(&mut p, &reward, &mut summ, Strategy::dp()).run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        assert_eq!(traj.outcome, Outcome::Truncated);
        assert_eq!(traj.turns(), t.task.max_turns);
        assert!(p.0.iter().all(|k| *k == 1));
    }

    #[test]
    fn premature_completion_fails() {
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut p = ScriptedPolicy::new();
        p.insert("search_walmart", 0, set(vec![Action::simple(ActionType::TaskComplete)]));
        let reward = OracleReward::default();
        let mut summ = DeterministicSummarizer::default();
        let traj = Agent::new(&mut p, &reward, &mut summ, Strategy::topk_first(3)).run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        assert_eq!(traj.outcome, Outcome::Failure);
        assert_eq!(traj.turns(), 1);
    }

    struct Down;
    impl RewardBackend for Down {
        fn score(&self, _: &ScoreContext<'_>, _: &Action) -> Result<f64, RewardError> {
            Err(RewardError::Unparseable("down".into()))
        }
    }

    #[test]
    fn reward_outage_degrades_to_first() {
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut policy = demo_policy(&s, "search_walmart");
        let mut summ = DeterministicSummarizer::default();
        let traj = Agent::new(&mut policy, &Down, &mut summ, Strategy::guidnav(3)).run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        let first = &traj.steps[0];
        assert!(first.degraded);
        assert_eq!(first.chosen_index, 0);
        assert_eq!(first.action, Action::scroll(Direction::Down));
    }

    #[test]
    fn parse_failure_retried_once() {
        use crate::policy::{ParseError, PolicyReply};
        struct Flaky(usize);
        impl PolicyBackend for Flaky {
            fn propose(&mut self, _: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
                self.0 += 1;
                if self.0 % 2 == 1 {
                    Err(PolicyError::Unparseable { source: ParseError::NoCandidates, usage: Usage { prompt_tokens: 5, completion_tokens: 1 } })
                } else {
                    Ok(PolicyReply { candidates: set(vec![Action::scroll(Direction::Down)]), usage: Usage::default() })
                }
            }
        }
        struct Broken;
        impl PolicyBackend for Broken {
            fn propose(&mut self, _: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
                Err(PolicyError::Unparseable { source: ParseError::NoCandidates, usage: Usage::default() })
            }
        }
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut summ = DeterministicSummarizer::default();
        let reward = OracleReward::default();
        let mut f = Flaky(0);
        let traj = Agent::new(&mut f, &reward, &mut summ, Strategy::dp()).run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        assert_eq!(traj.outcome, Outcome::Truncated);
        assert_eq!(traj.steps[0].usage.prompt_tokens, 5);
        let traj = Agent::new(&mut Broken, &reward, &mut summ, Strategy::dp()).run_episode(&t.task, &mut env, EpisodeSpec::seed(0));
        assert_eq!(traj.outcome, Outcome::Failure);
        assert!(traj.steps.is_empty());
    }

    #[test]
    fn pass_at_n_any_success() {
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut env = s.env(&t);
        let mut policy = StochasticPolicy::new(RankProfile::new(vec![0.5, 0.5]).unwrap(), 3);
        let reward = OracleReward::default();
        let mut summ = DeterministicSummarizer::default();
        let mut agent = Agent::new(&mut policy, &reward, &mut summ, Strategy::topk_first(3));
        assert_eq!(agent.pass_at_n(&t.task, &mut env, &[]), Err(EngineError::NoSeeds));
        let one = agent.pass_at_n(&t.task, &mut env, &[11]).unwrap();
        let single = agent.run_episode(&t.task, &mut env, EpisodeSpec::seed(11));
        assert_eq!(one.trials, vec![single.clone()]);
        assert_eq!(one.success, single.outcome.is_success());
        let three = agent.pass_at_n(&t.task, &mut env, &[11, 12, 13]).unwrap();
        assert_eq!(three.success, three.trials.iter().any(|t| t.outcome.is_success()));
    }

    #[test]
    fn static_replay() {
        let s = script();
        let t = s.task("search_walmart").unwrap().clone();
        let mut policy = demo_policy(&s, "search_walmart");
        let reward = OracleReward::default();
        let mut summ = DeterministicSummarizer::default();
        let run = Agent::new(&mut policy, &reward, &mut summ, Strategy::oracle_topk(3)).run_static(&s, &t, EpisodeSpec::seed(0)).unwrap();
        assert_eq!(run.trajectory.outcome, Outcome::Success);
        assert_eq!(run.trajectory.steps[1].summary_before, "clicked element 0 (search bar)");
        let run = Agent::new(&mut policy, &reward, &mut summ, Strategy::topk_first(3)).run_static(&s, &t, EpisodeSpec::seed(0)).unwrap();
        assert_eq!(run.trajectory.outcome, Outcome::Failure);
        assert_eq!(run.trajectory.turns(), 4);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_monotone_maps(scores in prop::collection::vec(-10.0f64..10.0, 1..6), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let c = set((0..scores.len() as u32).map(Action::click).collect());
            let g = Strategy::guidnav(scores.len());
            let base = select(&c, &scores, &g).unwrap();
            let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let squashed: Vec<f64> = scores.iter().map(|s| crate::reward::sigmoid(*s)).collect();
            prop_assert_eq!(select(&c, &affine, &g).unwrap(), base);
            prop_assert_eq!(select(&c, &squashed, &g).unwrap(), base);
        }

        #[test]
        fn episodes_bounded_and_finished(seed in 0u64..1000, p1 in 0.0f64..0.6) {
            let s = script();
            let mut summ = DeterministicSummarizer::default();
            let reward = OracleReward::default();
            for t in &s.tasks {
                let mut env = s.env(t);
                let mut policy = StochasticPolicy::new(RankProfile::new(vec![p1, 0.3]).unwrap(), 3);
                for strat in [Strategy::dp(), Strategy::topk_first(3), Strategy::guidnav(3)] {
                    let traj = Agent::new(&mut policy, &reward, &mut summ, strat).run_episode(&t.task, &mut env, EpisodeSpec::seed(seed));
                    prop_assert!(traj.turns() <= t.task.max_turns);
                    prop_assert!(traj.outcome != Outcome::Running);
                    prop_assert!(traj.validate().is_ok());
                }
            }
        }
    }

    #[test]
    fn screens_without_elements_are_fine() {
        let s = assign_labels(&[], 10., 10.).unwrap();
        assert_eq!(describe_step(&s, &Action::click(3)), "clicked element 3");
    }
}
