//! Process-reward guided navigation for GUI agents: set-of-marks labeling,
//! action matching, candidate policies, reward scoring, the guided step
//! loop, reflective retries, a scripted simulator and evaluation.

pub mod action;
pub mod engine;
pub mod eval;
pub mod matcher;
pub mod policy;
pub mod refine;
pub mod reward;
pub mod run;
pub mod seed;
pub mod simenv;
pub mod som;
pub mod trajectory;
pub mod wire;

pub use action::{Action, ActionSpace, ActionType, Direction};
pub use engine::{Agent, EngineConfig, EpisodeSpec, Strategy, StrategyKind};
pub use matcher::{GroundTruthAction, MatchConfig};
pub use policy::{Candidate, CandidateSet, PolicyBackend};
pub use reward::{RewardBackend, RewardSample};
pub use simenv::{Environment, SimEnv, SimScript};
pub use som::{BBox, Element, LabeledScreen};
pub use trajectory::{Outcome, StepRecord, Task, Trajectory};
pub use wire::Usage;
