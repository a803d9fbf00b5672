use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use rayon::prelude::*;

use prmnav_core::engine::{DeterministicSummarizer, Summarizer, WireSummarizer};
use prmnav_core::eval::{compare_report, suite_hash, EvalError};
use prmnav_core::matcher::{annotate_human_demo, annotate_trajectory, PredStep};
use prmnav_core::policy::{StochasticPolicy, WirePolicy};
use prmnav_core::refine::{DefaultReflector, Evaluator, Reflector, SimEvaluator, WireEvaluator, WireReflector};
use prmnav_core::reward::{read_samples, train_surrogate, write_samples, OracleReward, SurrogateReward, TrainConfig, WireReward};
use prmnav_core::run::{build_report, execute_task, load_run, sha256_hex, EvalMode, Manifest, RunDir, TaskRun};
use prmnav_core::simenv::{load_task_script, SimScript, SimTask};
use prmnav_core::{Agent, MatchConfig, PolicyBackend, RewardBackend, RewardSample, Trajectory};

use crate::config::{resolve, resolve_path, JudgeSpec, LoadedPolicy, LoadedReward, Resolved, RunConfig, SummarizerSpec};

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Runtime(e) => e,
        }
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

pub type CmdResult = Result<(), Failure>;

// ---------------------------------------------------------------------------
// run

pub fn dir_name(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' }).collect()
}

fn run_one(r: &Resolved, task: &Arc<SimTask>) -> anyhow::Result<TaskRun> {
    let cfg = &r.config;
    let mut policy: Box<dyn PolicyBackend> = match &r.policy {
        LoadedPolicy::Stochastic { profile, width } => Box::new(StochasticPolicy::new(profile.clone(), *width)),
        LoadedPolicy::Scripted(p) => Box::new(p.clone()),
        LoadedPolicy::Wire { wire, template } => Box::new(WirePolicy::new(wire.clone(), template.clone())),
    };
    let reward: Box<dyn RewardBackend> = match &r.reward {
        LoadedReward::Oracle => Box::new(OracleReward::new(cfg.match_cfg.clone())),
        LoadedReward::Surrogate(p) => Box::new(SurrogateReward::new(p.clone())?),
        LoadedReward::Wire(w) => Box::new(WireReward::new(w.clone())),
    };
    let mut summarizer: Box<dyn Summarizer> = match &cfg.summarizer {
        SummarizerSpec::Deterministic { cap } => Box::new(DeterministicSummarizer { cap: *cap }),
        SummarizerSpec::Wire { wire, cap } => Box::new(WireSummarizer::new(wire.clone(), *cap)),
    };
    let mut evaluator: Box<dyn Evaluator> = match &cfg.evaluator {
        JudgeSpec::Local => Box::new(SimEvaluator),
        JudgeSpec::Wire { wire } => Box::new(WireEvaluator::new(wire.clone())),
    };
    let mut reflector: Box<dyn Reflector> = match &cfg.reflector {
        JudgeSpec::Local => Box::new(DefaultReflector),
        JudgeSpec::Wire { wire } => Box::new(WireReflector::new(wire.clone())),
    };
    let mut agent = Agent::new(policy.as_mut(), reward.as_ref(), summarizer.as_mut(), r.spec.strategy);
    agent.cfg.match_cfg = cfg.match_cfg.clone();
    let run = execute_task(&mut agent, &r.script, task, &r.spec, evaluator.as_mut(), reflector.as_mut())
        .with_context(|| format!("task {}", task.task.id))?;
    log::info!("{}: {:?} in {} turn(s)", run.record.task_id, run.record.outcome, run.record.turns);
    Ok(run)
}

pub fn run(config: RunConfig, root: &Path) -> CmdResult {
    let config_hash = sha256_hex(config.canonical_json().as_bytes());
    let resolved = resolve(config, root).map_err(input)?;
    let tasks: Vec<Arc<SimTask>> =
        resolved.task_ids.iter().map(|id| resolved.script.task(id).expect("checked in resolve").clone()).collect();
    let sh = suite_hash(&tasks.iter().map(|t| &t.task).collect::<Vec<_>>());

    let pool = rayon::ThreadPoolBuilder::new().num_threads(resolved.config.parallel).build().map_err(runtime)?;
    let runs: Vec<TaskRun> =
        pool.install(|| tasks.par_iter().map(|t| run_one(&resolved, t)).collect::<anyhow::Result<Vec<_>>>()).map_err(runtime)?;

    let report = build_report(&resolved.spec, &sh, resolved.config.pricing, &runs);
    let manifest = Manifest::new(&resolved.spec, config_hash, sh, &runs);
    let name = resolved.config.name.clone().unwrap_or_else(|| dir_name(&resolved.spec.strategy.label()));
    let dir = RunDir::create(&resolved.out_dir, &name).map_err(runtime)?;
    dir.write_all(&manifest, &report, &runs).map_err(runtime)?;

    let a = &report.aggregates;
    println!("{}", dir.path().display());
    println!(
        "{}: {} task(s), success {:.3}, avg turns {:.2}, avg tokens {:.1}, avg cost {:.6}",
        report.strategy, a.tasks, a.dynamic_success_rate, a.avg_turns, a.avg_tokens, a.avg_cost
    );
    if let Some(s) = a.static_score {
        println!("static score {s:.3}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// annotate

pub enum AnnotateSource {
    Run(PathBuf),
    HumanDemo,
}

fn load_fixture(root: &Path, fixture: &Path) -> Result<SimScript, Failure> {
    let p = resolve_path(root, fixture);
    load_task_script(&p).with_context(|| format!("cannot load fixture {}", p.display())).map_err(input)
}

fn pred_steps(traj: &Trajectory, n: usize) -> Vec<PredStep> {
    traj.steps[..n]
        .iter()
        .map(|s| PredStep { summary: s.summary_before.clone(), screen: s.screen.clone(), action: s.action.clone() })
        .collect()
}

fn annotate_run(script: &SimScript, dir: &Path, cfg: &MatchConfig) -> Result<Vec<RewardSample>, Failure> {
    let loaded = load_run(dir).with_context(|| format!("cannot load run {}", dir.display())).map_err(runtime)?;
    let m = &loaded.manifest;
    let mut tasks = Vec::new();
    for t in &m.tasks {
        let task = script.task(&t.task_id).ok_or_else(|| input(anyhow!("task {:?} of {} is not in the fixture", t.task_id, dir.display())))?;
        tasks.push(task.clone());
    }
    let sh = suite_hash(&tasks.iter().map(|t| &t.task).collect::<Vec<_>>());
    if sh != m.suite_hash {
        return Err(input(anyhow!("fixture suite hash {sh} differs from run suite hash {}", m.suite_hash)));
    }
    let mut out = Vec::new();
    for (t, task) in m.tasks.iter().zip(&tasks) {
        for e in &t.rounds {
            let p = dir.join("trajectories").join(&e.trajectory_file);
            let f = fs::File::open(&p).with_context(|| format!("cannot open {}", p.display())).map_err(runtime)?;
            let traj = Trajectory::read_jsonl(BufReader::new(f)).with_context(|| format!("{}", p.display())).map_err(runtime)?;
            let gts = match m.mode {
                EvalMode::Static => {
                    let demo = task.demo_ground_truth(&script.app);
                    demo.into_iter().take(traj.steps.len()).collect::<Vec<_>>()
                }
                EvalMode::Dynamic => {
                    let steps: Vec<(&str, &prmnav_core::Action)> =
                        traj.steps.iter().map(|s| (s.screen.screen_id.as_str(), &s.action)).collect();
                    let replayed = script.replay_ground_truth(task, &steps).map_err(runtime)?;
                    replayed.into_iter().map_while(|g| g).collect()
                }
            };
            let preds = pred_steps(&traj, gts.len());
            out.extend(annotate_trajectory(&task.task.instruction, &preds, &gts, cfg).map_err(runtime)?);
        }
    }
    Ok(out)
}

fn annotate_demos(script: &SimScript) -> Result<Vec<RewardSample>, Failure> {
    let mut out = Vec::new();
    for task in &script.tasks {
        let demo = script.demo_trajectory(task).map_err(runtime)?;
        let mut summarizer = DeterministicSummarizer::default();
        let mut preds = Vec::with_capacity(demo.len());
        for (i, (screen, _)) in demo.iter().enumerate() {
            let history: Vec<_> = demo[..i].iter().zip(&task.demo).map(|((s, _), d)| (s, &d.action)).collect();
            let summary = summarizer.summarize(&task.task, &history).text;
            preds.push(PredStep { summary, screen: screen.clone(), action: task.demo[i].action.clone() });
        }
        out.extend(annotate_human_demo(&task.task.instruction, &preds));
    }
    Ok(out)
}

pub fn annotate(root: &Path, fixture: &Path, source: AnnotateSource, out: &Path, cfg: &MatchConfig) -> CmdResult {
    cfg.validate().map_err(input)?;
    let script = load_fixture(root, fixture)?;
    let samples = match source {
        AnnotateSource::Run(dir) => annotate_run(&script, &resolve_path(root, &dir), cfg)?,
        AnnotateSource::HumanDemo => annotate_demos(&script)?,
    };
    let out = resolve_path(root, out);
    let f = fs::File::create(&out).with_context(|| format!("cannot create {}", out.display())).map_err(runtime)?;
    write_samples(std::io::BufWriter::new(f), &samples).map_err(runtime)?;
    let pos = samples.iter().filter(|s| s.reward > 0.5).count();
    println!("wrote {} samples ({} positive, {} negative) to {}", samples.len(), pos, samples.len() - pos, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-reward

pub fn train_reward(root: &Path, samples: &Path, out: &Path, loss_csv: Option<&Path>, cfg: &TrainConfig) -> CmdResult {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(input(anyhow!("learning rate must be positive, got {}", cfg.lr)));
    }
    let sp = resolve_path(root, samples);
    let f = fs::File::open(&sp).with_context(|| format!("cannot open samples {}", sp.display())).map_err(input)?;
    let data = read_samples(BufReader::new(f)).with_context(|| format!("invalid samples {}", sp.display())).map_err(input)?;
    if data.is_empty() {
        return Err(input(anyhow!("no samples in {}", sp.display())));
    }
    let result = train_surrogate(&data, cfg).map_err(runtime)?;
    let out = resolve_path(root, out);
    let mut json = serde_json::to_string_pretty(&result.params).map_err(runtime)?;
    json.push('\n');
    fs::write(&out, json).with_context(|| format!("cannot write {}", out.display())).map_err(runtime)?;
    if let Some(p) = loss_csv {
        let p = resolve_path(root, p);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("cannot write {}", p.display())).map_err(runtime)?;
        w.write_record(["epoch", "loss"]).map_err(runtime)?;
        for (i, l) in result.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l}")]).map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    let first = result.losses.first().copied().unwrap_or(f64::NAN);
    let last = result.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained on {} samples for {} epoch(s): loss {first:.6} -> {last:.6}", data.len(), cfg.epochs);
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn report(root: &Path, dirs: &[PathBuf], csv_out: Option<&Path>) -> CmdResult {
    if dirs.is_empty() {
        return Err(input(anyhow!("no run directories given")));
    }
    let mut reports = Vec::with_capacity(dirs.len());
    for d in dirs {
        let d = resolve_path(root, d);
        let loaded = load_run(&d).with_context(|| format!("cannot load run {}", d.display())).map_err(runtime)?;
        reports.push(loaded.report);
    }
    let cmp = compare_report(&reports).map_err(|e| match e {
        EvalError::SuiteMismatch(a, b) => runtime(anyhow!("runs cover different suites: {a} vs {b}")),
        other => runtime(other),
    })?;
    print!("{}", cmp.to_text());
    if let Some(p) = csv_out {
        let p = resolve_path(root, p);
        fs::write(&p, cmp.to_csv()).with_context(|| format!("cannot write {}", p.display())).map_err(runtime)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
