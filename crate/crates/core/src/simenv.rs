//! Deterministic GUI simulator driven by task scripts.
//!
//! A script holds one app (screens and a transition table) and the tasks
//! defined on it:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "app": {
//!     "home": "home",
//!     "screens": {"home": {"width": 1080, "height": 1920, "elements": [{"box": [0,0,10,10], "name": "x"}]}},
//!     "transitions": [{"from": "home", "trigger": {"kind": "click", "label": 0}, "to": "search"}]
//!   },
//!   "tasks": [{
//!     "id": "t1", "instruction": "...", "action_space": "aitw", "max_turns": 8, "start": "home",
//!     "goal": {"on_screen": "results", "typed_contains": ["walmart"], "visited": [], "completed": true},
//!     "demo": [{"action": {"action_type": "click", "id": 0}, "accept": [1]}]
//!   }]
//! }
//! ```
//!
//! Trigger kinds: `click`/`longpress` (`label`), `type_commit` (`contains`,
//! optional `label`), `scroll` (`direction`), `navigate_home`,
//! `navigate_back`, `enter`.
//!
//! Typing appends to the typed log. In spaces with `enter` the text waits
//! until `enter` commits it; elsewhere it commits at once. A commit fires the
//! first `type_commit` transition whose token is contained in the
//! (normalized) text. `navigate_home` always lands on home; `navigate_back`
//! uses an explicit transition if there is one and otherwise returns to the
//! previous screen. Anything else without a transition leaves the screen
//! unchanged but still uses up a turn.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{validate_action, Action, ActionSpace, ActionType, Direction};
use crate::matcher::{normalize_text, GroundTruthAction};
use crate::som::{LabeledScreen, RawScreen, SomError};
use crate::trajectory::{Task, TaskError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("unsupported schema_version {0}")]
    Version(u32),
    #[error("screen {screen:?}: {source}")]
    Screen { screen: String, source: SomError },
    #[error("unknown screen {0:?}")]
    UnknownScreen(String),
    #[error("transition from {from:?}: label {label} does not exist on that screen")]
    UnknownTriggerLabel { from: String, label: u32 },
    #[error("duplicate transition from {from:?} on {trigger}")]
    DuplicateTransition { from: String, trigger: String },
    #[error("screen {0:?} is unreachable from home")]
    Unreachable(String),
    #[error("task {task}: {message}")]
    Task { task: String, message: String },
    #[error(transparent)]
    BadTask(#[from] TaskError),
    #[error("action {action} is not valid in {space}")]
    InvalidAction { action: String, space: ActionSpace },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    Click { label: u32 },
    Longpress { label: u32 },
    TypeCommit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<u32>,
        contains: String,
    },
    Scroll { direction: Direction },
    NavigateHome,
    NavigateBack,
    Enter,
}

impl Trigger {
    fn label(&self) -> Option<u32> {
        match self {
            Trigger::Click { label } | Trigger::Longpress { label } => Some(*label),
            Trigger::TypeCommit { label, .. } => *label,
            _ => None,
        }
    }

    fn describe(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: String,
    pub trigger: Trigger,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApp {
    home: String,
    screens: BTreeMap<String, RawScreen>,
    #[serde(default)]
    transitions: Vec<Transition>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_screen: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub typed_contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visited: Vec<String>,
    #[serde(default)]
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoStep {
    pub action: Action,
    /// Further acceptable element labels for this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accept: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskDef {
    id: String,
    instruction: String,
    action_space: ActionSpace,
    max_turns: usize,
    start: String,
    goal: Goal,
    demo: Vec<DemoStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    schema_version: u32,
    app: RawApp,
    tasks: Vec<RawTaskDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimApp {
    pub home: String,
    pub screens: BTreeMap<String, LabeledScreen>,
    pub transitions: Vec<Transition>,
}

impl SimApp {
    fn screen(&self, id: &str) -> &LabeledScreen {
        &self.screens[id]
    }

    fn lookup(&self, from: &str, pred: impl Fn(&Trigger) -> bool) -> Option<&str> {
        self.transitions.iter().find(|t| t.from == from && pred(&t.trigger)).map(|t| t.to.as_str())
    }
}

/// Environment state. Equality on this drives ground-truth lookup.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimState {
    pub screen: String,
    pub typed_log: Vec<String>,
    pub pending_text: Option<String>,
    pub completed: bool,
    #[serde(skip)]
    visited: BTreeSet<String>,
    #[serde(skip)]
    back_stack: Vec<String>,
}

impl SimState {
    fn start(screen: &str) -> Self {
        SimState {
            screen: screen.to_string(),
            typed_log: Vec::new(),
            pending_text: None,
            completed: false,
            visited: BTreeSet::from([screen.to_string()]),
            back_stack: Vec::new(),
        }
    }

    pub fn visited(&self) -> &BTreeSet<String> {
        &self.visited
    }

    /// The part of the state that the demo is keyed on.
    fn key(&self) -> (&str, &[String], Option<&str>, bool) {
        (&self.screen, &self.typed_log, self.pending_text.as_deref(), self.completed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTask {
    pub task: Task,
    pub start: String,
    pub goal: Goal,
    pub demo: Vec<DemoStep>,
    demo_states: Vec<SimState>,
}

impl SimTask {
    /// Ground truth for each demo step, annotated the way the task's
    /// benchmark would annotate it.
    pub fn demo_ground_truth(&self, app: &SimApp) -> Vec<GroundTruthAction> {
        self.demo
            .iter()
            .zip(&self.demo_states)
            .map(|(d, s)| GroundTruthAction::for_space(&d.action, app.screen(&s.screen), self.task.action_space, &d.accept))
            .collect()
    }

    fn demo_index(&self, state: &SimState) -> Option<usize> {
        self.demo_states.iter().position(|s| s.key() == state.key())
    }
}

/// Goal predicate over the current screen, the typed log and the visited set.
pub fn goal_holds(goal: &Goal, state: &SimState) -> bool {
    if let Some(s) = &goal.on_screen {
        if &state.screen != s {
            return false;
        }
    }
    let typed = normalize_text(&state.typed_log.join(" "));
    if !goal.typed_contains.iter().all(|t| typed.contains(&normalize_text(t))) {
        return false;
    }
    if !goal.visited.iter().all(|v| state.visited.contains(v)) {
        return false;
    }
    !goal.completed || state.completed
}

/// Pure transition function; see the module docs for the rules.
pub fn step_state(app: &SimApp, space: ActionSpace, state: &SimState, action: &Action) -> SimState {
    let mut next = state.clone();
    let goto = |next: &mut SimState, to: &str| {
        if next.screen != to {
            let prev = std::mem::replace(&mut next.screen, to.to_string());
            next.back_stack.push(prev);
        }
        next.visited.insert(to.to_string());
    };
    let commit = |next: &mut SimState, text: &str, target: Option<u32>| {
        let norm = normalize_text(text);
        let from = next.screen.clone();
        let hit = app.lookup(&from, |t| match t {
            Trigger::TypeCommit { label, contains } => {
                (label.is_none() || *label == target) && norm.contains(&normalize_text(contains))
            }
            _ => false,
        });
        hit.map(str::to_string)
    };
    match action.action_type {
        ActionType::Click | ActionType::Longpress => {
            let id = action.id;
            let long = action.action_type == ActionType::Longpress;
            let hit = app.lookup(&state.screen, |t| match t {
                Trigger::Click { label } => !long && Some(*label) == id,
                Trigger::Longpress { label } => long && Some(*label) == id,
                _ => false,
            });
            if let Some(to) = hit {
                next.pending_text = None;
                goto(&mut next, to);
            }
        }
        ActionType::Type => {
            let text = action.text.clone().unwrap_or_default();
            next.typed_log.push(text.clone());
            if space.has_enter() {
                next.pending_text = Some(text);
            } else if let Some(to) = commit(&mut next, &text, action.id) {
                goto(&mut next, &to);
            }
        }
        ActionType::Enter => {
            let pending = next.pending_text.take();
            let via_text = pending.as_deref().and_then(|t| commit(&mut next, t, None));
            let to = via_text.or_else(|| app.lookup(&state.screen, |t| *t == Trigger::Enter).map(str::to_string));
            if let Some(to) = to {
                goto(&mut next, &to);
            }
        }
        ActionType::Scroll => {
            let d = action.direction;
            if let Some(to) = app.lookup(&state.screen, |t| matches!(t, Trigger::Scroll { direction } if Some(*direction) == d)) {
                goto(&mut next, to);
            }
        }
        ActionType::NavigateHome => {
            next.pending_text = None;
            let home = app.home.clone();
            goto(&mut next, &home);
        }
        ActionType::NavigateBack => {
            next.pending_text = None;
            if let Some(to) = app.lookup(&state.screen, |t| *t == Trigger::NavigateBack) {
                goto(&mut next, to);
            } else if let Some(prev) = next.back_stack.pop() {
                next.visited.insert(prev.clone());
                next.screen = prev;
            }
        }
        ActionType::TaskComplete => next.completed = true,
    }
    next
}

/// A loaded script: one app and its validated tasks.
#[derive(Debug, Clone)]
pub struct SimScript {
    pub app: Arc<SimApp>,
    pub tasks: Vec<Arc<SimTask>>,
}

impl SimScript {
    pub fn task(&self, id: &str) -> Option<&Arc<SimTask>> {
        self.tasks.iter().find(|t| t.task.id == id)
    }

    pub fn env(&self, task: &Arc<SimTask>) -> SimEnv {
        SimEnv::new(self.app.clone(), task.clone())
    }

    /// Replays a task's demo: each ground truth paired with the screen it
    /// was taken on.
    pub fn demo_trajectory(&self, task: &SimTask) -> Result<Vec<(LabeledScreen, GroundTruthAction)>, SimError> {
        let gts = task.demo_ground_truth(&self.app);
        let mut state = SimState::start(&task.start);
        let mut out = Vec::with_capacity(gts.len());
        for ((step, expected), gt) in task.demo.iter().zip(&task.demo_states).zip(gts) {
            if state.key() != expected.key() {
                return Err(SimError::Task { task: task.task.id.clone(), message: "demo replay diverged".into() });
            }
            out.push((self.app.screen(&state.screen).clone(), gt));
            state = step_state(&self.app, task.task.action_space, &state, &step.action);
        }
        if !goal_holds(&task.goal, &state) {
            return Err(SimError::Task { task: task.task.id.clone(), message: "demo replay misses the goal".into() });
        }
        Ok(out)
    }
}

impl SimScript {
    /// Ground truth along a recorded episode. Replays `steps` (recorded
    /// screen id, executed action) from the task's start, checking each
    /// recorded screen against the replay; entries are `None` once the
    /// episode has left the demo.
    pub fn replay_ground_truth(&self, task: &Arc<SimTask>, steps: &[(&str, &Action)]) -> Result<Vec<Option<GroundTruthAction>>, SimError> {
        let mut env = self.env(task);
        env.reset();
        let mut out = Vec::with_capacity(steps.len());
        for (i, (screen_id, action)) in steps.iter().enumerate() {
            if env.state.screen != *screen_id {
                return Err(SimError::Task {
                    task: task.task.id.clone(),
                    message: format!("step {i}: recorded screen {screen_id:?} but replay is on {:?}", env.state.screen),
                });
            }
            out.push(env.ground_truth());
            env.apply(action)?;
        }
        Ok(out)
    }
}

pub fn load_task_script(path: &Path) -> Result<SimScript, SimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_task_script(&text)
}

pub fn parse_task_script(text: &str) -> Result<SimScript, SimError> {
    let raw: RawScript = serde_json::from_str(text).map_err(|e| SimError::Schema(e.to_string()))?;
    if raw.schema_version != SCHEMA_VERSION {
        return Err(SimError::Version(raw.schema_version));
    }
    let app = build_app(raw.app)?;
    let mut tasks = Vec::with_capacity(raw.tasks.len());
    let mut seen = HashSet::new();
    for t in raw.tasks {
        if !seen.insert(t.id.clone()) {
            return Err(SimError::Task { task: t.id, message: "duplicate task id".into() });
        }
        tasks.push(Arc::new(build_task(&app, t)?));
    }
    Ok(SimScript { app: Arc::new(app), tasks })
}

fn build_app(raw: RawApp) -> Result<SimApp, SimError> {
    let mut screens = BTreeMap::new();
    for (id, rs) in &raw.screens {
        let s = rs.label().map_err(|source| SimError::Screen { screen: id.clone(), source })?;
        screens.insert(id.clone(), s.with_id(id.clone()));
    }
    if !screens.contains_key(&raw.home) {
        return Err(SimError::UnknownScreen(raw.home));
    }
    let mut seen = HashSet::new();
    for t in &raw.transitions {
        for id in [&t.from, &t.to] {
            if !screens.contains_key(id) {
                return Err(SimError::UnknownScreen(id.clone()));
            }
        }
        if let Some(label) = t.trigger.label() {
            if screens[&t.from].element(label).is_none() {
                return Err(SimError::UnknownTriggerLabel { from: t.from.clone(), label });
            }
        }
        if !seen.insert((t.from.clone(), t.trigger.clone())) {
            return Err(SimError::DuplicateTransition { from: t.from.clone(), trigger: t.trigger.describe() });
        }
    }
    let mut reached = BTreeSet::from([raw.home.clone()]);
    let mut queue = VecDeque::from([raw.home.clone()]);
    while let Some(s) = queue.pop_front() {
        for t in raw.transitions.iter().filter(|t| t.from == s) {
            if reached.insert(t.to.clone()) {
                queue.push_back(t.to.clone());
            }
        }
    }
    if let Some(orphan) = screens.keys().find(|s| !reached.contains(*s)) {
        return Err(SimError::Unreachable(orphan.clone()));
    }
    Ok(SimApp { home: raw.home, screens, transitions: raw.transitions })
}

fn build_task(app: &SimApp, raw: RawTaskDef) -> Result<SimTask, SimError> {
    let id = raw.id.clone();
    let err = |message: String| SimError::Task { task: id.clone(), message };
    let task = Task::new(raw.id.clone(), raw.instruction, raw.action_space, raw.id.clone(), raw.max_turns)?;
    let space = task.action_space;
    if !app.screens.contains_key(&raw.start) {
        return Err(SimError::UnknownScreen(raw.start));
    }
    for s in raw.goal.on_screen.iter().chain(&raw.goal.visited) {
        if !app.screens.contains_key(s) {
            return Err(SimError::UnknownScreen(s.clone()));
        }
    }
    if space.has_task_complete() && !raw.goal.completed {
        return Err(err(format!("{space} goals must require completed")));
    }
    if raw.demo.len() > task.max_turns {
        return Err(err(format!("demo has {} steps but max_turns is {}", raw.demo.len(), task.max_turns)));
    }
    let mut state = SimState::start(&raw.start);
    let mut states = Vec::with_capacity(raw.demo.len());
    for (i, step) in raw.demo.iter().enumerate() {
        if !validate_action(&step.action, space).is_empty() {
            return Err(SimError::InvalidAction { action: step.action.to_string(), space });
        }
        if goal_holds(&raw.goal, &state) {
            return Err(err(format!("goal already holds before demo step {i}")));
        }
        if states.iter().any(|s: &SimState| s.key() == state.key()) {
            return Err(err(format!("demo revisits an earlier state at step {i}")));
        }
        if let Some(id) = step.action.id {
            if app.screen(&state.screen).element(id).is_none() {
                return Err(err(format!("demo step {i} targets label {id} missing on {:?}", state.screen)));
            }
        }
        states.push(state.clone());
        state = step_state(app, space, &state, &step.action);
    }
    if !goal_holds(&raw.goal, &state) {
        return Err(err("demo does not reach the goal".into()));
    }
    Ok(SimTask { task, start: raw.start, goal: raw.goal, demo: raw.demo, demo_states: states })
}

/// What the engine needs from an environment.
pub trait Environment {
    fn reset(&mut self) -> LabeledScreen;
    fn observe(&self) -> LabeledScreen;
    fn apply(&mut self, action: &Action) -> Result<LabeledScreen, SimError>;
    fn goal_reached(&self) -> bool;
    /// Ground truth for the current state, when the state lies on the demo.
    fn ground_truth(&self) -> Option<GroundTruthAction>;
    /// The demo's next action from the current state, when on the demo.
    fn expert_action(&self) -> Option<Action>;
}

#[derive(Debug, Clone)]
pub struct SimEnv {
    app: Arc<SimApp>,
    task: Arc<SimTask>,
    gts: Arc<Vec<GroundTruthAction>>,
    state: SimState,
}

impl SimEnv {
    pub fn new(app: Arc<SimApp>, task: Arc<SimTask>) -> Self {
        let gts = Arc::new(task.demo_ground_truth(&app));
        let state = SimState::start(&task.start);
        SimEnv { app, task, gts, state }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn sim_task(&self) -> &SimTask {
        &self.task
    }
}

impl Environment for SimEnv {
    fn reset(&mut self) -> LabeledScreen {
        self.state = SimState::start(&self.task.start);
        self.observe()
    }

    fn observe(&self) -> LabeledScreen {
        self.app.screen(&self.state.screen).clone()
    }

    fn apply(&mut self, action: &Action) -> Result<LabeledScreen, SimError> {
        let space = self.task.task.action_space;
        if !validate_action(action, space).is_empty() {
            return Err(SimError::InvalidAction { action: action.to_string(), space });
        }
        self.state = step_state(&self.app, space, &self.state, action);
        Ok(self.observe())
    }

    fn goal_reached(&self) -> bool {
        goal_holds(&self.task.goal, &self.state)
    }

    fn ground_truth(&self) -> Option<GroundTruthAction> {
        self.task.demo_index(&self.state).map(|i| self.gts[i].clone())
    }

    fn expert_action(&self) -> Option<Action> {
        self.task.demo_index(&self.state).map(|i| self.task.demo[i].action.clone())
    }
}
