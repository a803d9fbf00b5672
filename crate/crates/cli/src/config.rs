//! Run configuration: a TOML file plus command-line overrides.
//!
//! ```toml
//! fixture = "fixtures/suite.json"   # task script
//! out_dir = "runs"
//! strategy = "guidnav"              # dp | topk_first | guidnav | oracle_topk
//! k = 3
//! pass_n = 3                        # optional
//! max_rounds = 1
//! mode = "dynamic"                  # dynamic | static
//! seeds = [0, 1, 2]
//! tasks = ["open_mail"]             # optional subset
//!
//! [policy]
//! kind = "stochastic"               # stochastic | scripted | wire
//! rank_probs = [0.5, 0.5]
//!
//! [reward]
//! kind = "oracle"                   # oracle | surrogate | wire
//!
//! [pricing]
//! rate_per_million_prompt = 5.0
//! rate_per_million_completion = 5.0
//! ```
//!
//! Remote backends take a `[<section>.wire]` table with `endpoint`, `model`
//! and optionally `timeout_secs`, `retries`, `api_key_env`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use prmnav_core::engine::StrategyKind;
use prmnav_core::eval::Pricing;
use prmnav_core::policy::{PromptTemplate, RankProfile, ScriptedPolicy};
use prmnav_core::reward::SurrogateParams;
use prmnav_core::run::{EvalMode, SuiteSpec};
use prmnav_core::simenv::{load_task_script, SimScript};
use prmnav_core::wire::WireConfig;
use prmnav_core::{MatchConfig, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Stochastic {
        rank_probs: Vec<f64>,
        #[serde(default = "default_width")]
        width: usize,
    },
    Scripted {
        script: PathBuf,
    },
    Wire {
        wire: WireConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        template: Option<PathBuf>,
    },
}

fn default_width() -> usize {
    3
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Stochastic { rank_probs: vec![0.5, 0.5], width: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    #[default]
    Oracle,
    Surrogate {
        params: PathBuf,
    },
    Wire {
        wire: WireConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummarizerSpec {
    Deterministic {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    Wire {
        wire: WireConfig,
        #[serde(default = "default_cap")]
        cap: usize,
    },
}

fn default_cap() -> usize {
    prmnav_core::engine::DEFAULT_SUMMARY_CAP
}

impl Default for SummarizerSpec {
    fn default() -> Self {
        SummarizerSpec::Deterministic { cap: default_cap() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeSpec {
    /// Simulator goal predicate / built-in reflector.
    #[default]
    Local,
    Wire {
        wire: WireConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fixture: PathBuf,
    /// Where run directories go; not hashed.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    #[serde(skip_serializing)]
    pub name: Option<String>,
    pub strategy: StrategyKind,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_n: Option<usize>,
    pub max_rounds: u32,
    pub mode: EvalMode,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<String>>,
    /// Worker threads; not hashed.
    #[serde(skip_serializing)]
    pub parallel: usize,
    #[serde(rename = "match")]
    pub match_cfg: MatchConfig,
    pub pricing: Pricing,
    pub policy: PolicySpec,
    pub reward: RewardSpec,
    pub summarizer: SummarizerSpec,
    pub evaluator: JudgeSpec,
    pub reflector: JudgeSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fixture: PathBuf::new(),
            out_dir: PathBuf::from("runs"),
            name: None,
            strategy: StrategyKind::Guidnav,
            k: 3,
            pass_n: None,
            max_rounds: 1,
            mode: EvalMode::Dynamic,
            seeds: vec![0],
            tasks: None,
            parallel: 1,
            match_cfg: MatchConfig::default(),
            pricing: Pricing::default(),
            policy: PolicySpec::default(),
            reward: RewardSpec::default(),
            summarizer: SummarizerSpec::default(),
            evaluator: JudgeSpec::default(),
            reflector: JudgeSpec::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub fixture: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub name: Option<String>,
    pub strategy: Option<StrategyKind>,
    pub k: Option<usize>,
    pub pass_n: Option<usize>,
    pub max_rounds: Option<u32>,
    pub mode: Option<EvalMode>,
    pub seeds: Option<Vec<u64>>,
    pub tasks: Option<Vec<String>>,
    pub parallel: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn apply(&mut self, o: Overrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { self.$f = v; } )* };
        }
        take!(fixture, out_dir, strategy, k, max_rounds, mode, seeds, parallel);
        if o.name.is_some() {
            self.name = o.name;
        }
        if o.pass_n.is_some() {
            self.pass_n = o.pass_n;
        }
        if o.tasks.is_some() {
            self.tasks = o.tasks;
        }
    }

    /// Canonical JSON of the settings that affect results.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Everything a run needs, checked and loaded.
pub struct Resolved {
    pub config: RunConfig,
    pub spec: SuiteSpec,
    pub script: SimScript,
    pub task_ids: Vec<String>,
    pub out_dir: PathBuf,
    pub policy: LoadedPolicy,
    pub reward: LoadedReward,
}

pub enum LoadedPolicy {
    Stochastic { profile: RankProfile, width: usize },
    Scripted(ScriptedPolicy),
    Wire { wire: WireConfig, template: PromptTemplate },
}

pub enum LoadedReward {
    Oracle,
    Surrogate(SurrogateParams),
    Wire(WireConfig),
}

pub fn resolve_path(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Validates the configuration and loads every file it references. Paths
/// are relative to `root`.
pub fn resolve(config: RunConfig, root: &Path) -> Result<Resolved> {
    if config.fixture.as_os_str().is_empty() {
        bail!("no fixture configured (set `fixture` or pass --fixture)");
    }
    let fixture = resolve_path(root, &config.fixture);
    if !fixture.is_file() {
        bail!("fixture not found: {}", fixture.display());
    }
    let script = load_task_script(&fixture).with_context(|| format!("cannot load fixture {}", fixture.display()))?;
    let strategy = Strategy::new(config.strategy, config.k, config.pass_n)?;
    if config.max_rounds == 0 {
        bail!("max_rounds must be at least 1");
    }
    if config.parallel == 0 {
        bail!("parallel must be at least 1");
    }
    let spec = SuiteSpec { strategy, mode: config.mode, max_rounds: config.max_rounds, seeds: config.seeds.clone() };
    spec.validate()?;
    config.match_cfg.validate()?;
    config.pricing.validate()?;
    let task_ids: Vec<String> = match &config.tasks {
        Some(ids) => {
            for id in ids {
                if script.task(id).is_none() {
                    bail!("task {id:?} is not in {}", fixture.display());
                }
            }
            ids.clone()
        }
        None => script.tasks.iter().map(|t| t.task.id.clone()).collect(),
    };
    if task_ids.is_empty() {
        bail!("no tasks selected");
    }
    let policy = match &config.policy {
        PolicySpec::Stochastic { rank_probs, width } => {
            let profile = RankProfile::new(rank_probs.clone()).map_err(anyhow::Error::msg)?;
            LoadedPolicy::Stochastic { profile, width: *width }
        }
        PolicySpec::Scripted { script } => {
            let p = resolve_path(root, script);
            LoadedPolicy::Scripted(ScriptedPolicy::load(&p).with_context(|| format!("cannot load policy script {}", p.display()))?)
        }
        PolicySpec::Wire { wire, template } => {
            let template = match template {
                Some(t) => {
                    let p = resolve_path(root, t);
                    PromptTemplate::from_file(&p).with_context(|| format!("cannot load template {}", p.display()))?
                }
                None => PromptTemplate::inference_default(),
            };
            LoadedPolicy::Wire { wire: wire.clone(), template }
        }
    };
    let reward = match &config.reward {
        RewardSpec::Oracle => LoadedReward::Oracle,
        RewardSpec::Surrogate { params } => {
            let p = resolve_path(root, params);
            let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read reward params {}", p.display()))?;
            let params = SurrogateParams::from_json(&text).with_context(|| format!("invalid reward params {}", p.display()))?;
            prmnav_core::reward::SurrogateReward::new(params.clone())?;
            LoadedReward::Surrogate(params)
        }
        RewardSpec::Wire { wire } => LoadedReward::Wire(wire.clone()),
    };
    let out_dir = resolve_path(root, &config.out_dir);
    Ok(Resolved { config, spec, script, task_ids, out_dir, policy, reward })
}
