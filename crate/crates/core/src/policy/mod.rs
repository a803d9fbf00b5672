//! The policy model: proposes up to k candidate actions for the current step.
//!
//! Backends implement [`PolicyBackend`]. [`ScriptedPolicy`] replays fixed
//! candidate sets, [`StochasticPolicy`] draws candidate rankings from a
//! seeded distribution over the simulator's expert action, and
//! [`WirePolicy`] queries a remote chat-completions endpoint.

mod prompt;
mod scripted;
mod stochastic;
mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::refine::ReflectionThought;
use crate::som::LabeledScreen;
use crate::trajectory::Task;
use crate::wire::{Usage, WireError};

pub use prompt::{
    answer_format, available_actions, first_number, parse_topk_response, render_inference_prompt, synthesize_response,
    ParseError, PromptError, PromptTemplate, ACTION_MARKER, DEFAULT_INFERENCE_TEMPLATE,
};
pub use scripted::{ScriptEntry, ScriptFile, ScriptedPolicy};
pub use stochastic::{RankProfile, StochasticPolicy};
pub use wire::WirePolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub action: Action,
    #[serde(default)]
    pub rationale: String,
    pub confidence: f64,
    /// Set when the reported probability had to be repaired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl Candidate {
    pub fn new(action: Action, confidence: f64) -> Self {
        Candidate { action, rationale: String::new(), confidence, warning: None }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CandidateSetError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("candidate set is empty")]
    Empty,
    #[error("{len} candidates exceed k = {k}")]
    TooMany { len: usize, k: usize },
}

/// Up to k candidates, in the order the model emitted them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCandidateSet")]
pub struct CandidateSet {
    k: usize,
    candidates: Vec<Candidate>,
}

#[derive(Deserialize)]
struct RawCandidateSet {
    k: usize,
    candidates: Vec<Candidate>,
}

impl TryFrom<RawCandidateSet> for CandidateSet {
    type Error = CandidateSetError;

    fn try_from(raw: RawCandidateSet) -> Result<Self, Self::Error> {
        CandidateSet::new(raw.k, raw.candidates)
    }
}

impl CandidateSet {
    pub fn new(k: usize, candidates: Vec<Candidate>) -> Result<Self, CandidateSetError> {
        if k == 0 {
            return Err(CandidateSetError::ZeroK);
        }
        if candidates.is_empty() {
            return Err(CandidateSetError::Empty);
        }
        if candidates.len() > k {
            return Err(CandidateSetError::TooMany { len: candidates.len(), k });
        }
        Ok(CandidateSet { k, candidates })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn actions(&self) -> Vec<Action> {
        self.candidates.iter().map(|c| c.action.clone()).collect()
    }

    pub fn get(&self, i: usize) -> Option<&Candidate> {
        self.candidates.get(i)
    }

    /// Keeps the first `k` candidates and lowers k accordingly.
    pub fn truncated(&self, k: usize) -> CandidateSet {
        let k = k.max(1);
        CandidateSet { k: k.min(self.k), candidates: self.candidates.iter().take(k).cloned().collect() }
    }

    /// Keeps candidates for which `keep` holds; `None` if nothing survives.
    pub fn filtered(&self, mut keep: impl FnMut(&Candidate) -> bool) -> Option<CandidateSet> {
        let candidates: Vec<_> = self.candidates.iter().filter(|c| keep(c)).cloned().collect();
        CandidateSet::new(self.k, candidates).ok()
    }
}

/// Everything a policy backend may look at for one step.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub task: &'a Task,
    pub step_index: usize,
    pub summary: &'a str,
    pub screen: &'a LabeledScreen,
    pub k: usize,
    /// Lessons from earlier failed attempts, oldest first.
    pub reflections: &'a [ReflectionThought],
    /// Episode seed; deterministic backends derive their randomness from it.
    pub seed: u64,
    /// Retry round, starting at 1.
    pub round: u32,
    /// The simulator's expert action for the current state. Only simulated
    /// policies read this; real backends must ignore it.
    pub expert: Option<&'a Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReply {
    pub candidates: CandidateSet,
    pub usage: Usage,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unparseable policy reply: {source}")]
    Unparseable { source: ParseError, usage: Usage },
    #[error(transparent)]
    Transport(#[from] WireError),
    #[error("no scripted candidates for task {task_id:?} step {step}")]
    MissingScript { task_id: String, step: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl PolicyError {
    pub fn is_parse(&self) -> bool {
        matches!(self, PolicyError::Unparseable { .. })
    }

    /// Tokens spent on the failed call, when known.
    pub fn usage(&self) -> Usage {
        match self {
            PolicyError::Unparseable { usage, .. } => *usage,
            _ => Usage::default(),
        }
    }
}

pub trait PolicyBackend: Send {
    fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError>;
}

impl<P: PolicyBackend + ?Sized> PolicyBackend for Box<P> {
    fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        (**self).propose(req)
    }
}
