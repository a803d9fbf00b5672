//! Process reward backends and the surrogate trainer.
//!
//! * [`OracleReward`] scores 1.0/0.0 with the matcher against the step's
//!   ground truth.
//! * [`SurrogateReward`] is `sigmoid(w·f + b)` over [`featurize`] output,
//!   trained by full-batch gradient descent on mean squared error.
//! * [`WireReward`] asks a remote model and reads the first number.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionType, Direction};
use crate::matcher::{match_action, GroundTruthAction, MatchConfig};
use crate::policy::first_number;
use crate::seed::fnv1a;
use crate::som::LabeledScreen;
use crate::wire::{ChatClient, Usage, WireConfig, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    HumanDemo,
    SelfPlay,
}

/// One reward-labeled step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub instruction: String,
    pub summary: String,
    pub screen: LabeledScreen,
    pub action: Action,
    pub reward: f64,
    pub source: SampleSource,
    #[serde(default)]
    pub step_index: usize,
}

pub fn write_samples<W: Write>(mut w: W, samples: &[RewardSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(w, "{}", serde_json::to_string(s).expect("serializable"))?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<RewardSample>, RewardError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| RewardError::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: RewardSample =
            serde_json::from_str(&line).map_err(|e| RewardError::Data(format!("line {}: {e}", n + 1)))?;
        if !(0.0..=1.0).contains(&s.reward) {
            return Err(RewardError::Data(format!("line {}: reward {} outside [0, 1]", n + 1, s.reward)));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("no ground truth bound for step {0}")]
    NoGroundTruth(usize),
    #[error("feature dimension {got} does not match parameters ({want})")]
    Dimension { want: usize, got: usize },
    #[error("feature schema version {got} does not match {want}")]
    Schema { want: u32, got: u32 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("learning rate must be finite and >= 0, got {0}")]
    BadLearningRate(f64),
    #[error("loss became non-finite at epoch {0}")]
    NonFinite(usize),
    #[error("unparseable score reply: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Transport(#[from] WireError),
    #[error("bad data: {0}")]
    Data(String),
}

/// What a reward backend sees for one candidate.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub instruction: &'a str,
    pub summary: &'a str,
    pub screen: &'a LabeledScreen,
    pub step_index: usize,
    /// Only available in static replay and the simulator.
    pub ground_truth: Option<&'a GroundTruthAction>,
}

pub trait RewardBackend: Send + Sync {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError>;

    /// Tokens spent since the last call; local backends spend none.
    fn drain_usage(&self) -> Usage {
        Usage::default()
    }
}

impl<R: RewardBackend + ?Sized> RewardBackend for Box<R> {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError> {
        (**self).score(ctx, action)
    }

    fn drain_usage(&self) -> Usage {
        (**self).drain_usage()
    }
}

impl<R: RewardBackend + ?Sized> RewardBackend for &R {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError> {
        (**self).score(ctx, action)
    }

    fn drain_usage(&self) -> Usage {
        (**self).drain_usage()
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleReward {
    pub cfg: MatchConfig,
}

impl OracleReward {
    pub fn new(cfg: MatchConfig) -> Self {
        OracleReward { cfg }
    }
}

impl RewardBackend for OracleReward {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError> {
        let gt = ctx.ground_truth.ok_or(RewardError::NoGroundTruth(ctx.step_index))?;
        Ok(if match_action(action, gt, ctx.screen, &self.cfg) { 1.0 } else { 0.0 })
    }
}

// ---------------------------------------------------------------------------
// features

pub const FEATURE_SCHEMA_VERSION: u32 = 1;
const TYPE_BLOCK: usize = 0;
const GEOM_BLOCK: usize = 8;
const OVERLAP_BLOCK: usize = 13;
const HASH_BLOCK: usize = 17;
const HASH_BUCKETS: usize = 16;
const STEP_BLOCK: usize = HASH_BLOCK + HASH_BUCKETS;
const DIR_BLOCK: usize = STEP_BLOCK + 2;

/// Layout:
///
/// | range  | meaning                                                    |
/// |--------|------------------------------------------------------------|
/// | 0..8   | one-hot action type                                        |
/// | 8..13  | has target, center x/W, center y/H, width/W, height/H      |
/// | 13..17 | token overlaps: text∩x, text∩h, name∩x, name∩h             |
/// | 17..33 | hashed buckets of (text ∪ name) tokens that also occur in x |
/// | 33..35 | step / 20 capped at 1, first-step flag                     |
/// | 35..39 | one-hot scroll direction                                   |
pub const FEATURE_DIM: usize = DIR_BLOCK + 4;

pub fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    a.intersection(b).count() as f64
}

/// Fixed-length feature vector for one (instruction, summary, screen, action).
pub fn featurize(instruction: &str, summary: &str, screen: &LabeledScreen, action: &Action) -> Vec<f64> {
    let mut f = vec![0.0; FEATURE_DIM];
    f[TYPE_BLOCK + action.action_type.index()] = 1.0;

    let element = action.id.and_then(|id| screen.element(id));
    if let Some(e) = element {
        let c = e.bbox.center();
        f[GEOM_BLOCK] = 1.0;
        f[GEOM_BLOCK + 1] = c.x / screen.width;
        f[GEOM_BLOCK + 2] = c.y / screen.height;
        f[GEOM_BLOCK + 3] = e.bbox.width() / screen.width;
        f[GEOM_BLOCK + 4] = e.bbox.height() / screen.height;
    }

    let x = tokens(instruction);
    let h = tokens(summary);
    let text = action.text.as_deref().map(tokens).unwrap_or_default();
    let name = element.and_then(|e| e.name.as_deref()).map(tokens).unwrap_or_default();
    f[OVERLAP_BLOCK] = overlap(&text, &x);
    f[OVERLAP_BLOCK + 1] = overlap(&text, &h);
    f[OVERLAP_BLOCK + 2] = overlap(&name, &x);
    f[OVERLAP_BLOCK + 3] = overlap(&name, &h);
    for t in text.union(&name).filter(|t| x.contains(*t)) {
        f[HASH_BLOCK + (fnv1a(t.as_bytes()) % HASH_BUCKETS as u64) as usize] += 1.0;
    }

    let step = screen_step(summary);
    f[STEP_BLOCK] = (step as f64 / 20.0).min(1.0);
    f[STEP_BLOCK + 1] = if step == 0 { 1.0 } else { 0.0 };

    if let Some(d) = action.direction {
        f[DIR_BLOCK + d.index()] = 1.0;
    }
    f
}

/// Step count recovered from a summary: one clause per executed step.
fn screen_step(summary: &str) -> usize {
    if summary.trim().is_empty() {
        0
    } else {
        summary.split("; ").count()
    }
}

// ---------------------------------------------------------------------------
// surrogate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateParams {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_schema_version: u32,
}

impl SurrogateParams {
    pub fn zeros(dim: usize) -> Self {
        SurrogateParams { dim, weights: vec![0.0; dim], bias: 0.0, feature_schema_version: FEATURE_SCHEMA_VERSION }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.weights.len() != self.dim {
            return Err(RewardError::Dimension { want: self.dim, got: self.weights.len() });
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(RewardError::Data("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, RewardError> {
        let p: SurrogateParams = serde_json::from_str(s).map_err(|e| RewardError::Data(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: &SurrogateParams, f: &[f64]) -> f64 {
    p.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + p.bias
}

pub fn surrogate_score(p: &SurrogateParams, features: &[f64]) -> Result<f64, RewardError> {
    if features.len() != p.dim || p.weights.len() != p.dim {
        return Err(RewardError::Dimension { want: p.dim, got: features.len() });
    }
    Ok(sigmoid(logit(p, features)))
}

/// Mean squared error of `sigmoid(w·x + b)` against `y` and its gradient
/// with respect to (w, b).
pub fn mse_and_grad(p: &SurrogateParams, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; p.dim];
    let mut gb = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let s = sigmoid(logit(p, x));
        let r = s - y;
        loss += r * r;
        let d = 2.0 * r * s * (1.0 - s);
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += d * xi;
        }
        gb += d;
    }
    gw.iter_mut().for_each(|g| *g /= n);
    (loss / n, gw, gb / n)
}

pub fn mse(p: &SurrogateParams, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    xs.iter().zip(ys).map(|(x, y)| (sigmoid(logit(p, x)) - y).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Initial weights are uniform in [-init_scale, init_scale]; bias starts at 0.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.5, epochs: 500, seed: 0, init_scale: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: SurrogateParams,
    /// Loss before training followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

pub fn init_params(dim: usize, cfg: &TrainConfig) -> SurrogateParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = SurrogateParams::zeros(dim);
    if cfg.init_scale > 0.0 {
        for w in &mut p.weights {
            *w = rng.random_range(-cfg.init_scale..=cfg.init_scale);
        }
    }
    p
}

pub fn train_on_features(xs: &[Vec<f64>], ys: &[f64], cfg: &TrainConfig) -> Result<TrainResult, RewardError> {
    if xs.is_empty() {
        return Err(RewardError::EmptyDataset);
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(RewardError::BadLearningRate(cfg.lr));
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(RewardError::Dimension { want: dim, got: bad.len() });
    }
    let mut p = init_params(dim, cfg);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, gw, gb) = mse_and_grad(&p, xs, ys);
        if !loss.is_finite() {
            return Err(RewardError::NonFinite(epoch));
        }
        losses.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        for (w, g) in p.weights.iter_mut().zip(&gw) {
            *w -= cfg.lr * g;
        }
        p.bias -= cfg.lr * gb;
    }
    Ok(TrainResult { params: p, losses })
}

pub fn train_surrogate(data: &[RewardSample], cfg: &TrainConfig) -> Result<TrainResult, RewardError> {
    if data.is_empty() {
        return Err(RewardError::EmptyDataset);
    }
    let xs: Vec<Vec<f64>> = data.iter().map(|s| featurize(&s.instruction, &s.summary, &s.screen, &s.action)).collect();
    let ys: Vec<f64> = data.iter().map(|s| s.reward).collect();
    train_on_features(&xs, &ys, cfg)
}

#[derive(Debug, Clone)]
pub struct SurrogateReward {
    params: SurrogateParams,
}

impl SurrogateReward {
    pub fn new(params: SurrogateParams) -> Result<Self, RewardError> {
        params.validate()?;
        if params.dim != FEATURE_DIM {
            return Err(RewardError::Dimension { want: FEATURE_DIM, got: params.dim });
        }
        if params.feature_schema_version != FEATURE_SCHEMA_VERSION {
            return Err(RewardError::Schema { want: FEATURE_SCHEMA_VERSION, got: params.feature_schema_version });
        }
        Ok(SurrogateReward { params })
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }
}

impl RewardBackend for SurrogateReward {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError> {
        surrogate_score(&self.params, &featurize(ctx.instruction, ctx.summary, ctx.screen, action))
    }
}

// ---------------------------------------------------------------------------
// remote

pub const DEFAULT_SCORING_PROMPT: &str = "\
You are judging one step of a phone or web agent.
Task: {instruction}
Previous actions: {summary}
Current screen elements:
{screen}
Proposed next action: {action}

How likely is it that this action is a correct step toward finishing the task? \
Reply with a single number between 0.0 and 1.0.";

pub fn render_scoring_prompt(ctx: &ScoreContext<'_>, action: &Action) -> String {
    DEFAULT_SCORING_PROMPT
        .replace("{screen}", &ctx.screen.describe())
        .replace("{action}", &action.to_string())
        .replace("{summary}", ctx.summary)
        .replace("{instruction}", ctx.instruction)
}

/// Reads a score from a reply: the first number, which must lie in [0, 1].
pub fn parse_score(reply: &str) -> Result<f64, RewardError> {
    match first_number(reply) {
        Some(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(RewardError::Unparseable(reply.chars().take(200).collect())),
    }
}

pub struct WireReward {
    client: ChatClient,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl WireReward {
    pub fn new(cfg: WireConfig) -> Self {
        WireReward { client: ChatClient::new(cfg), prompt_tokens: AtomicU64::new(0), completion_tokens: AtomicU64::new(0) }
    }
}

impl RewardBackend for WireReward {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError> {
        let reply = self.client.complete(&render_scoring_prompt(ctx, action), ctx.screen.image.as_deref())?;
        self.prompt_tokens.fetch_add(reply.usage.prompt_tokens, Ordering::Relaxed);
        self.completion_tokens.fetch_add(reply.usage.completion_tokens, Ordering::Relaxed);
        parse_score(&reply.text)
    }

    fn drain_usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens.swap(0, Ordering::Relaxed),
            completion_tokens: self.completion_tokens.swap(0, Ordering::Relaxed),
        }
    }
}

/// Position of a scroll direction's one-hot entry.
pub fn direction_feature_index(d: Direction) -> usize {
    DIR_BLOCK + d.index()
}

/// Position of an action type's one-hot entry.
pub fn type_feature_index(t: ActionType) -> usize {
    TYPE_BLOCK + t.index()
}
