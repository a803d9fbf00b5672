use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Candidate, CandidateSet, PolicyBackend, PolicyError, PolicyReply, PolicyRequest};
use crate::action::{Action, ActionSpace, ActionType, Direction};
use crate::seed::{derive_seed, fnv1a};
use crate::som::LabeledScreen;
use crate::wire::Usage;

/// Where the expert action lands in the candidate list.
///
/// `rank_probs[r]` is the probability that the expert action sits at rank
/// `r + 1`; the remaining mass means it is missing from the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankProfile {
    pub rank_probs: Vec<f64>,
}

impl RankProfile {
    pub fn new(rank_probs: Vec<f64>) -> Result<Self, String> {
        let p = RankProfile { rank_probs };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rank_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("rank probabilities must lie in [0, 1]".into());
        }
        let total: f64 = self.rank_probs.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(format!("rank probabilities sum to {total} > 1"));
        }
        Ok(())
    }

    pub fn absent_prob(&self) -> f64 {
        (1.0 - self.rank_probs.iter().sum::<f64>()).max(0.0)
    }

    /// Maps a uniform draw in [0, 1) to a 0-based rank, or `None` for absent.
    pub fn rank_for(&self, u: f64) -> Option<usize> {
        let mut acc = 0.0;
        for (r, p) in self.rank_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(r);
            }
        }
        None
    }
}

/// Simulated policy whose first choice is right only some of the time.
///
/// At each step one uniform draw, seeded from (episode seed, task, round,
/// step), picks the rank of the simulator's expert action. The other slots
/// hold deterministic distractors. Lists are always generated at full width
/// and then cut to the requested k, so a k = 1 request sees exactly the first
/// candidate a k = 3 request would.
#[derive(Debug, Clone)]
pub struct StochasticPolicy {
    profile: RankProfile,
    width: usize,
}

impl StochasticPolicy {
    pub fn new(profile: RankProfile, width: usize) -> Self {
        StochasticPolicy { profile, width: width.max(1) }
    }

    pub fn profile(&self) -> &RankProfile {
        &self.profile
    }

    /// Draw for a given step; exposed so tests can enumerate outcomes.
    pub fn step_seed(seed: u64, task_id: &str, round: u32, step: usize) -> u64 {
        derive_seed(&[seed, fnv1a(task_id.as_bytes()), u64::from(round), step as u64])
    }

    /// Candidate list with the expert placed at `rank` (or absent).
    pub fn candidates_with_rank(
        &self,
        space: ActionSpace,
        screen: &LabeledScreen,
        expert: Option<&Action>,
        rank: Option<usize>,
        width: usize,
    ) -> CandidateSet {
        let width = width.max(1);
        let mut distractors = distractor_pool(space, screen, expert).into_iter();
        let rank = match expert {
            Some(_) => rank.filter(|r| *r < width),
            None => None,
        };
        let mut out = Vec::with_capacity(width);
        for slot in 0..width {
            let action = if Some(slot) == rank {
                expert.cloned()
            } else {
                distractors.next()
            };
            let Some(action) = action else { break };
            let confidence = 0.6 / (1u32 << slot.min(16)) as f64;
            out.push(Candidate { action, rationale: format!("candidate {}", slot + 1), confidence, warning: None });
        }
        if out.is_empty() {
            // a one-element screen in a click-only space can run out of distractors
            out.push(Candidate::new(expert.cloned().unwrap_or_else(|| fallback_action(space)), 0.6));
        }
        let len = out.len();
        CandidateSet::new(width.max(len), out).expect("non-empty")
    }
}

fn fallback_action(space: ActionSpace) -> Action {
    match space {
        ActionSpace::Mind2Web => Action::click(0),
        _ => Action::scroll(Direction::Down),
    }
}

/// Deterministic wrong answers for a screen, never equal to the expert action.
fn distractor_pool(space: ActionSpace, screen: &LabeledScreen, expert: Option<&Action>) -> Vec<Action> {
    let mut pool = Vec::new();
    if space.allows(ActionType::Scroll) {
        pool.extend([Direction::Down, Direction::Right, Direction::Left].map(Action::scroll));
        pool.push(Action::simple(ActionType::NavigateBack));
    }
    let expert_id = expert.and_then(|a| a.id);
    for e in &screen.elements {
        if Some(e.label) != expert_id {
            pool.push(Action::click(e.label));
        }
    }
    pool.retain(|a| Some(a) != expert);
    pool
}

impl PolicyBackend for StochasticPolicy {
    fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::step_seed(req.seed, &req.task.id, req.round, req.step_index));
        let u: f64 = rng.random();
        let rank = self.profile.rank_for(u);
        let full = self.candidates_with_rank(req.task.action_space, req.screen, req.expert, rank, self.width.max(req.k));
        Ok(PolicyReply { candidates: full.truncated(req.k), usage: Usage::default() })
    }
}
