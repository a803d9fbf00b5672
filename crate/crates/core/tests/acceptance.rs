//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use prmnav_core::action::{parse_action, serialize_action};
use prmnav_core::engine::{Agent, DeterministicSummarizer, Strategy};
use prmnav_core::eval::{dynamic_success, element_and_step_sr, static_score, suite_hash, usage_report, Pricing, TaskRecord};
use prmnav_core::matcher::{match_action, GroundTruthAction, MatchConfig};
use prmnav_core::policy::{
    parse_topk_response, synthesize_response, Candidate, CandidateSet, PolicyBackend, RankProfile, ScriptedPolicy, StochasticPolicy,
};
use prmnav_core::refine::{DefaultReflector, SimEvaluator};
use prmnav_core::reward::{
    mse, mse_and_grad, train_on_features, OracleReward, RewardBackend, RewardError, ScoreContext, SurrogateParams, TrainConfig,
};
use prmnav_core::run::{build_report, execute_task, sha256_hex, EvalMode, Manifest, RunDir, SuiteSpec, TaskRun};
use prmnav_core::seed::{derive_seed, fnv1a};
use prmnav_core::simenv::{parse_task_script, Environment, SimEnv, SimScript, SimTask};
use prmnav_core::som::assign_labels;
use prmnav_core::trajectory::{Outcome, Trajectory};
use prmnav_core::{Action, ActionSpace, ActionType, BBox, Direction, Usage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn fixture(name: &str) -> SimScript {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    parse_task_script(&fs::read_to_string(&path).expect("fixture")).expect("valid fixture")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Deterministic pseudo-random scores, unrelated to correctness.
struct NoisyReward;

impl RewardBackend for NoisyReward {
    fn score(&self, ctx: &ScoreContext<'_>, action: &Action) -> Result<f64, RewardError> {
        let h = derive_seed(&[fnv1a(ctx.instruction.as_bytes()), ctx.step_index as u64, fnv1a(serialize_action(action).as_bytes())]);
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

fn run_task(
    script: &SimScript,
    task: &Arc<SimTask>,
    policy: &mut dyn PolicyBackend,
    reward: &dyn RewardBackend,
    spec: &SuiteSpec,
) -> TaskRun {
    let mut summ = DeterministicSummarizer::default();
    let mut agent = Agent::new(policy, reward, &mut summ, spec.strategy);
    execute_task(&mut agent, script, task, spec, &mut SimEvaluator, &mut DefaultReflector).expect("task runs")
}

fn stochastic(probs: &[f64]) -> StochasticPolicy {
    StochasticPolicy::new(RankProfile::new(probs.to_vec()).unwrap(), 3)
}

// ---------------------------------------------------------------- AC1

struct ClickCase {
    pred: Action,
    gt: GroundTruthAction,
}

const SW: f64 = 1080.0;
const SH: f64 = 1920.0;

fn center(b: [f64; 4]) -> (f64, f64) {
    ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
}

fn in_expanded(b: [f64; 4], p: (f64, f64)) -> bool {
    let (cx, cy) = center(b);
    let hw = (b[2] - b[0]) / 2.0 * 2.4;
    let hh = (b[3] - b[1]) / 2.0 * 2.4;
    let (x0, x1) = ((cx - hw).max(0.0), (cx + hw).min(SW));
    let (y0, y1) = ((cy - hh).max(0.0), (cy + hh).min(SH));
    p.0 >= x0 && p.0 <= x1 && p.1 >= y0 && p.1 <= y1
}

fn norm_text(s: &str) -> String {
    s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// Direct geometric recomputation of the matching rules.
fn oracle(boxes: &[[f64; 4]], pred: &Action, gt: &GroundTruthAction) -> bool {
    if pred.action_type != gt.action_type {
        return false;
    }
    match pred.action_type {
        ActionType::Click | ActionType::Longpress => {
            let Some(id) = pred.id else { return false };
            let Some(b) = boxes.get(id as usize).copied() else { return false };
            if gt.element_candidates.as_ref().is_some_and(|c| c.contains(&id)) {
                return true;
            }
            let Some(p) = gt.point else { return false };
            let c = center(b);
            let diag = (SW * SW + SH * SH).sqrt();
            let d = ((c.0 - p.x).powi(2) + (c.1 - p.y).powi(2)).sqrt();
            if d / diag <= 0.14 || in_expanded(b, (p.x, p.y)) {
                return true;
            }
            match gt.gt_box {
                Some(g) => in_expanded([g.x0(), g.y0(), g.x1(), g.y1()], c),
                None => false,
            }
        }
        ActionType::Scroll => pred.direction.is_some() && pred.direction == gt.direction,
        ActionType::Type => {
            let text_ok = matches!((&pred.text, &gt.text), (Some(a), Some(b)) if norm_text(a) == norm_text(b));
            let el_ok = match (&gt.element_candidates, pred.id) {
                (Some(c), Some(id)) => c.contains(&id),
                (Some(_), None) => false,
                (None, _) => true,
            };
            text_ok && el_ok
        }
        _ => true,
    }
}

fn ac1_matcher() -> Check {
    let mut boxes: Vec<[f64; 4]> = vec![
        [100.0, 100.0, 200.0, 200.0],
        [0.0, 0.0, 1080.0, 150.0],
        [900.0, 1700.0, 1060.0, 1900.0],
        [500.0, 900.0, 520.0, 920.0],
        [40.0, 600.0, 1040.0, 700.0],
    ];
    // boxes whose centers sit just inside / outside box 4's expanded bottom edge (y = 770)
    boxes.push([990.0, 760.0 - 1e-9, 1010.0, 780.0 - 1e-9]);
    boxes.push([990.0, 760.0 + 1e-9, 1010.0, 780.0 + 1e-9]);
    let bbs: Vec<BBox> = boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()).collect();
    let screen = assign_labels(&bbs, SW, SH).unwrap();
    let cfg = MatchConfig::default();
    let mut cases: Vec<ClickCase> = Vec::new();
    let mut boundary = 0;
    let mut boundary_idx = Vec::new();

    for x in [0.0, 150.0, 300.0, 540.0, 1000.0, 1080.0] {
        for y in [0.0, 150.0, 400.0, 960.0, 1800.0, 1920.0] {
            for id in 0..5 {
                cases.push(ClickCase { pred: Action::click(id), gt: GroundTruthAction::click_at(x, y) });
            }
        }
    }
    // distance threshold, approached along three directions from box 3's center
    let diag = (SW * SW + SH * SH).sqrt();
    let c3 = center(boxes[3]);
    for (ux, uy) in [(0.0, 1.0), (0.0, -1.0), (0.6, 0.8)] {
        for eps in [-1e-9, 1e-9] {
            let r = (0.14 + eps) * diag;
            cases.push(ClickCase { pred: Action::click(3), gt: GroundTruthAction::click_at(c3.0 + ux * r, c3.1 + uy * r) });
            boundary += 1;
            boundary_idx.push(cases.len() - 1);
        }
    }
    // expanded-box edges of box 4: y in [530, 770]
    for (x, y) in [(1000.0, 770.0), (100.0, 530.0)] {
        for eps in [-1e-9, 1e-9] {
            let y = if y > 600.0 { y + eps } else { y - eps };
            cases.push(ClickCase { pred: Action::click(4), gt: GroundTruthAction::click_at(x, y) });
            boundary += 1;
            boundary_idx.push(cases.len() - 1);
        }
    }
    // symmetric rule: predicted center against box 4's expanded box
    for id in [5, 6] {
        let mut gt = GroundTruthAction::click_at(540.0, 650.0);
        gt.gt_box = Some(bbs[4]);
        cases.push(ClickCase { pred: Action::click(id), gt });
        boundary += 1;
        boundary_idx.push(cases.len() - 1);
    }
    // gt taken from another element's own click
    for i in 0..5u32 {
        for j in 0..5u32 {
            if i != j {
                cases.push(ClickCase { pred: Action::click(i), gt: GroundTruthAction::from_action(&Action::click(j), &screen) });
            }
        }
    }
    // acceptable-target lists
    for id in 0..5 {
        cases.push(ClickCase { pred: Action::click(id), gt: GroundTruthAction::click_at(1079.0, 1919.0).with_candidates([1, 3]) });
        cases.push(ClickCase { pred: Action::longpress(id), gt: GroundTruthAction::new(ActionType::Longpress).with_candidates([2]) });
    }
    // scroll, type, payload-free
    for a in Direction::ALL {
        for b in Direction::ALL {
            cases.push(ClickCase { pred: Action::scroll(a), gt: GroundTruthAction { direction: Some(b), ..GroundTruthAction::new(ActionType::Scroll) } });
        }
    }
    let typed = |t: &str| GroundTruthAction { text: Some(t.into()), ..GroundTruthAction::new(ActionType::Type) };
    for (p, g) in [("walmart", "walmart"), ("Walmart ", "walmart"), ("walmart  store", "Walmart store"), ("walmart", "walmart store"), ("", "x")] {
        cases.push(ClickCase { pred: Action::type_text(p), gt: typed(g) });
    }
    cases.push(ClickCase { pred: Action::type_into(0, "shoes"), gt: typed("shoes").with_candidates([0]) });
    cases.push(ClickCase { pred: Action::type_into(1, "shoes"), gt: typed("shoes").with_candidates([0]) });
    cases.push(ClickCase { pred: Action::type_text("shoes"), gt: typed("shoes").with_candidates([0]) });
    let free = [ActionType::NavigateHome, ActionType::NavigateBack, ActionType::Enter, ActionType::TaskComplete];
    for a in free {
        for b in free {
            cases.push(ClickCase { pred: Action::simple(a), gt: GroundTruthAction::new(b) });
        }
    }
    cases.push(ClickCase { pred: Action::click(0), gt: GroundTruthAction::new(ActionType::Longpress).with_candidates([0]) });
    cases.push(ClickCase { pred: Action::click(42), gt: GroundTruthAction::click_at(10.0, 10.0) });

    let mut disagreements = Vec::new();
    let mut positives = 0;
    for (i, c) in cases.iter().enumerate() {
        let want = oracle(&boxes, &c.pred, &c.gt);
        positives += want as usize;
        if match_action(&c.pred, &c.gt, &screen, &cfg) != want {
            disagreements.push(format!("#{i} {} vs {:?}", c.pred, c.gt));
        }
    }
    // every boundary pair is (just inside, just outside)
    let sides: Vec<bool> = boundary_idx.iter().map(|i| oracle(&boxes, &cases[*i].pred, &cases[*i].gt)).collect();
    ensure(sides.chunks(2).all(|p| p == [true, false]), || format!("boundary cases do not straddle: {sides:?}"))?;
    ensure(cases.len() >= 50, || format!("only {} cases", cases.len()))?;
    ensure(positives > 0 && positives < cases.len(), || "degenerate case table".into())?;
    ensure(disagreements.is_empty(), || format!("{} disagreements, first: {}", disagreements.len(), disagreements[0]))?;
    Ok(format!("{} cases ({} boundary, {} positive) agree with the geometric oracle", cases.len(), boundary, positives))
}

// ---------------------------------------------------------------- AC2

fn suite_static(script: &SimScript, strategy: &Strategy, reward: &dyn RewardBackend, seed: u64, profile: &[f64]) -> f64 {
    let spec = SuiteSpec { strategy: *strategy, mode: EvalMode::Static, max_rounds: 1, seeds: vec![seed] };
    let scores: Vec<f64> = script
        .tasks
        .iter()
        .map(|t| run_task(script, t, &mut stochastic(profile), reward, &spec).record.static_score.unwrap())
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn ac2_oracle_dominance() -> Check {
    let profile = [0.4, 0.3, 0.2];
    let suites = [("suite", fixture("suite.json")), ("web_shop", fixture("web_shop.json"))];
    ensure(suites[0].1.tasks.len() >= 20, || "suite has fewer than 20 tasks".into())?;
    let others: Vec<(&str, Strategy, Box<dyn RewardBackend>)> = vec![
        ("dp", Strategy::dp(), Box::new(NoisyReward)),
        ("topk_first", Strategy::topk_first(3), Box::new(NoisyReward)),
        ("guidnav+noisy", Strategy::guidnav(3), Box::new(NoisyReward)),
    ];
    let mut violations = 0;
    let mut comparisons = 0;
    let mut min_margin = f64::INFINITY;
    let mut sums = vec![0.0; others.len() + 1];
    for seed in 0..100u64 {
        for (_, script) in &suites {
            let oracle = suite_static(script, &Strategy::oracle_topk(3), &NoisyReward, seed, &profile);
            sums[others.len()] += oracle;
            for (i, (_, s, r)) in others.iter().enumerate() {
                let v = suite_static(script, s, r.as_ref(), seed, &profile);
                sums[i] += v;
                comparisons += 1;
                min_margin = min_margin.min(oracle - v);
                if oracle < v {
                    violations += 1;
                }
            }
        }
    }
    ensure(violations == 0, || format!("{violations} violations out of {comparisons}"))?;
    let n = 200.0;
    Ok(format!(
        "0 violations in {comparisons} comparisons over 100 seeds x 2 suites; mean static dp {:.3} topk {:.3} guidnav {:.3} oracle {:.3}; min margin {:.3}",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        min_margin
    ))
}

// ---------------------------------------------------------------- AC3

fn ac3_guidnav_equals_oracle() -> Check {
    let profile = [0.3, 0.3, 0.2];
    let mut episodes = 0;
    let mut steps = 0;
    for name in ["suite.json", "web_shop.json"] {
        let script = fixture(name);
        for seed in 0..100u64 {
            for t in &script.tasks {
                for mode in [EvalMode::Dynamic, EvalMode::Static] {
                    let spec = |s: Strategy| SuiteSpec { strategy: s, mode, max_rounds: 1, seeds: vec![seed] };
                    let g = run_task(&script, t, &mut stochastic(&profile), &OracleReward::default(), &spec(Strategy::guidnav(3)));
                    let o = run_task(&script, t, &mut stochastic(&profile), &NoisyReward, &spec(Strategy::oracle_topk(3)));
                    ensure(g.trajectories == o.trajectories, || format!("{name} task {} seed {seed} {mode:?}: trajectories differ", t.task.id))?;
                    episodes += 1;
                    steps += g.trajectories[0].steps.len();
                }
            }
        }
    }
    Ok(format!("{episodes} episodes ({steps} steps) identical, static and dynamic"))
}

// ---------------------------------------------------------------- AC4

/// Exact success probability of one task under a rank profile, by
/// enumerating every rank sequence through the simulator.
fn exact_success(env: &SimEnv, task: &SimTask, profile: &[f64], pick_oracle: bool, turns_left: usize) -> f64 {
    if turns_left == 0 {
        return 0.0;
    }
    let policy = stochastic(profile);
    let screen = env.observe();
    let expert = env.expert_action();
    let gt = env.ground_truth();
    let cfg = MatchConfig::default();
    let mut total = 0.0;
    for (rank, p) in profile.iter().enumerate() {
        if *p == 0.0 {
            continue;
        }
        let cands = policy.candidates_with_rank(task.task.action_space, &screen, expert.as_ref(), Some(rank), 3);
        let chosen = if pick_oracle {
            gt.as_ref()
                .and_then(|g| cands.candidates().iter().position(|c| match_action(&c.action, g, &screen, &cfg)))
                .unwrap_or(0)
        } else {
            0
        };
        let action = &cands.candidates()[chosen].action;
        let mut next = env.clone();
        next.apply(action).unwrap();
        let v = if next.goal_reached() {
            1.0
        } else if action.action_type == ActionType::TaskComplete {
            0.0
        } else {
            exact_success(&next, task, profile, pick_oracle, turns_left - 1)
        };
        total += p * v;
    }
    total
}

fn ac4_strategy_gap() -> Check {
    let start = Instant::now();
    let profile = [0.5, 0.5];
    let script = fixture("gap_suite.json");
    let n = script.tasks.len();
    let mut exact = Vec::new();
    for t in &script.tasks {
        let mut env = script.env(t);
        env.reset();
        let g = exact_success(&env, t, &profile, true, t.task.max_turns);
        let k = exact_success(&env, t, &profile, false, t.task.max_turns);
        exact.push((g, k));
    }
    let episodes = 200usize;
    let (mut g_hits, mut k_hits) = (0usize, 0usize);
    let (mut g_exp, mut k_exp, mut var) = (0.0, 0.0, 0.0);
    for i in 0..episodes {
        let t = &script.tasks[i % n];
        let spec = |s: Strategy| SuiteSpec { strategy: s, mode: EvalMode::Dynamic, max_rounds: 1, seeds: vec![i as u64] };
        let g = run_task(&script, t, &mut stochastic(&profile), &OracleReward::default(), &spec(Strategy::guidnav(3)));
        let k = run_task(&script, t, &mut stochastic(&profile), &OracleReward::default(), &spec(Strategy::topk_first(3)));
        g_hits += g.record.outcome.is_success() as usize;
        k_hits += k.record.outcome.is_success() as usize;
        let (pg, pk) = exact[i % n];
        g_exp += pg;
        k_exp += pk;
        var += pg * (1.0 - pg) + pk * (1.0 - pk);
    }
    let m = episodes as f64;
    let (g_rate, k_rate) = (g_hits as f64 / m, k_hits as f64 / m);
    let (g_exp, k_exp) = (g_exp / m, k_exp / m);
    let sigma = var.sqrt() / m;
    let elapsed = start.elapsed().as_secs_f64();
    ensure(g_exp - k_exp >= 0.20, || format!("enumerated gap {:.3} < 0.20", g_exp - k_exp))?;
    ensure(g_rate - k_rate >= 0.20, || format!("observed gap {:.3} < 0.20 (guidnav {g_rate:.3}, topk {k_rate:.3})", g_rate - k_rate))?;
    ensure(((g_rate - k_rate) - (g_exp - k_exp)).abs() <= 4.0 * sigma + 1e-12, || {
        format!("observed gap {:.3} too far from enumerated {:.3} (sigma {sigma:.3})", g_rate - k_rate, g_exp - k_exp)
    })?;
    ensure(elapsed < 60.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "guidnav {g_rate:.3} vs topk_first {k_rate:.3} over {episodes} episodes (enumerated {g_exp:.3} vs {k_exp:.3}); gap {:.1}pp in {elapsed:.2}s",
        100.0 * (g_rate - k_rate)
    ))
}

// ---------------------------------------------------------------- AC5

fn ac5_pass_at_n() -> Check {
    let profile = [0.5, 0.5];
    let mut violations = 0;
    let mut reps = 0;
    let mut strict = 0;
    for name in ["suite.json", "gap_suite.json", "web_shop.json"] {
        let script = fixture(name);
        for r in 0..100u64 {
            let seeds = vec![3 * r, 3 * r + 1, 3 * r + 2];
            let mut pass3 = Strategy::topk_first(3);
            pass3.pass_n = Some(3);
            let spec1 = SuiteSpec { strategy: Strategy::topk_first(3), mode: EvalMode::Dynamic, max_rounds: 1, seeds: seeds[..1].to_vec() };
            let spec3 = SuiteSpec { strategy: pass3, mode: EvalMode::Dynamic, max_rounds: 1, seeds };
            let mut s1 = Vec::new();
            let mut s3 = Vec::new();
            for t in &script.tasks {
                let a = run_task(&script, t, &mut stochastic(&profile), &NoisyReward, &spec1);
                let b = run_task(&script, t, &mut stochastic(&profile), &NoisyReward, &spec3);
                ensure(a.trajectories[0] == b.trajectories[0], || format!("{name}: first trial differs for {}", t.task.id))?;
                s1.push(a.record.outcome.is_success());
                s3.push(b.record.outcome.is_success());
            }
            let (r1, r3) = (dynamic_success(&s1).unwrap(), dynamic_success(&s3).unwrap());
            violations += (r3 < r1) as usize;
            strict += (r3 > r1) as usize;
            reps += 1;
        }
    }
    ensure(violations == 0, || format!("{violations} violations in {reps} replications"))?;
    Ok(format!("0 violations in {reps} replications over 3 suites; Pass@3 strictly higher in {strict}"))
}

// ---------------------------------------------------------------- AC6

fn unlock_policy() -> ScriptedPolicy {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/unlock_script.json");
    ScriptedPolicy::load(&path).expect("unlock script")
}

fn ac6_retries() -> Check {
    let script = fixture("search_app.json");
    let mut rates = Vec::new();
    for m in 1..=3u32 {
        let spec = SuiteSpec { strategy: Strategy::topk_first(3), mode: EvalMode::Dynamic, max_rounds: m, seeds: vec![0] };
        let mut successes = Vec::new();
        for t in &script.tasks {
            let run = run_task(&script, t, &mut unlock_policy(), &NoisyReward, &spec);
            let outcomes: Vec<Outcome> = run.trajectories.iter().map(|t| t.outcome).collect();
            let want: Vec<Outcome> = match m {
                1 => vec![Outcome::Truncated],
                _ => vec![Outcome::Truncated, Outcome::Success],
            };
            ensure(outcomes == want, || format!("max_rounds {m}, task {}: rounds {outcomes:?}", t.task.id))?;
            ensure(m == 1 || run.entries[0].reflection.is_some(), || "no reflection after failed round 1".into())?;
            successes.push(run.record.outcome.is_success());
        }
        rates.push(dynamic_success(&successes).unwrap());
    }
    ensure(rates == [0.0, 1.0, 1.0], || format!("unlock success by max_rounds {rates:?}"))?;

    // stochastic policies: per-seed monotonicity in max_rounds
    let suite = fixture("gap_suite.json");
    let mut violations = 0;
    let mut curve = [0.0; 3];
    for seed in 0..100u64 {
        let mut prev = -1.0;
        for m in 1..=3u32 {
            let spec = SuiteSpec { strategy: Strategy::topk_first(3), mode: EvalMode::Dynamic, max_rounds: m, seeds: vec![seed] };
            let s: Vec<bool> =
                suite.tasks.iter().map(|t| run_task(&suite, t, &mut stochastic(&[0.5, 0.5]), &NoisyReward, &spec).record.outcome.is_success()).collect();
            let rate = dynamic_success(&s).unwrap();
            curve[m as usize - 1] += rate / 100.0;
            violations += (rate < prev) as usize;
            prev = rate;
        }
    }
    ensure(violations == 0, || format!("{violations} monotonicity violations"))?;
    Ok(format!(
        "unlock suite success by rounds 1/2/3 = {:?}, flips at round 2; stochastic suite mean {:.3}/{:.3}/{:.3}, 0 violations over 100 seeds",
        rates, curve[0], curve[1], curve[2]
    ))
}

// ---------------------------------------------------------------- AC7

fn ac7_training() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..8usize);
        let n = rng.random_range(1..12usize);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let mut p = SurrogateParams::zeros(dim);
        for w in &mut p.weights {
            *w = rng.random_range(-1.5..1.5);
        }
        p.bias = rng.random_range(-1.0..1.0);
        let (_, gw, gb) = mse_and_grad(&p, &xs, &ys);
        let h = 1e-5;
        let mut check = |analytic: f64, bump: &dyn Fn(&mut SurrogateParams, f64)| {
            let (mut a, mut b) = (p.clone(), p.clone());
            bump(&mut a, h);
            bump(&mut b, -h);
            let fd = (mse(&a, &xs, &ys) - mse(&b, &xs, &ys)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        for i in 0..dim {
            check(gw[i], &|q: &mut SurrogateParams, d| q.weights[i] += d);
        }
        check(gb, &|q: &mut SurrogateParams, d| q.bias += d);
    }
    ensure(worst <= 1e-5, || format!("worst relative gradient error {worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while xs.len() < 200 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = x[0] + 0.5 * x[1] - 0.25 * x[2];
        if s.abs() < 0.2 {
            continue;
        }
        ys.push(if s > 0.0 { 1.0 } else { 0.0 });
        xs.push(x);
    }
    let cfg = TrainConfig { lr: 2.0, epochs: 2000, seed: 3, init_scale: 0.01 };
    let a = train_on_features(&xs, &ys, &cfg).map_err(|e| e.to_string())?;
    let b = train_on_features(&xs, &ys, &cfg).map_err(|e| e.to_string())?;
    let last = *a.losses.last().unwrap();
    let rises = a.losses.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(last < 0.05, || format!("final MSE {last}"))?;
    ensure(rises == 0, || format!("loss increased {rises} times"))?;
    ensure(a == b, || "training is not deterministic".into())?;
    Ok(format!("worst gradient rel. error {worst:.1e} over 100 instances; toy set MSE {:.4} -> {last:.4}, monotone, deterministic", a.losses[0]))
}

// ---------------------------------------------------------------- AC8

fn ac8_metrics() -> Check {
    let screen = assign_labels(&[BBox::new(0., 0., 100., 100.).unwrap(), BBox::new(0., 200., 100., 300.).unwrap()], 1080., 1920.).unwrap();
    let task = prmnav_core::Task::new("m", "x", ActionSpace::Mind2Web, "g", 20).unwrap();
    let traj_of = |actions: Vec<Action>| {
        let mut t = Trajectory::new(task.clone(), 1, 0);
        for (i, a) in actions.into_iter().enumerate() {
            t.steps.push(prmnav_core::StepRecord {
                index: i,
                screen: screen.clone(),
                candidates: CandidateSet::new(1, vec![Candidate::new(a.clone(), 1.0)]).unwrap(),
                scores: vec![],
                chosen_index: 0,
                action: a,
                summary_before: String::new(),
                usage: Usage::default(),
                degraded: false,
                notes: vec![],
            });
        }
        t
    };
    let cfg = MatchConfig::default();
    let scroll = |d| GroundTruthAction { direction: Some(d), ..GroundTruthAction::new(ActionType::Scroll) };
    let gt: Vec<_> = (0..10).map(|i| scroll(if i < 7 { Direction::Up } else { Direction::Down })).collect();
    let s = static_score(&traj_of(vec![Action::scroll(Direction::Up); 10]), &gt, &cfg).map_err(|e| e.to_string())?;
    ensure(s == 0.7, || format!("7/10 gave {s}"))?;

    let type_gt = GroundTruthAction { text: Some("walmart".into()), ..GroundTruthAction::new(ActionType::Type).with_candidates([0]) };
    let (ele, sr) = element_and_step_sr(&traj_of(vec![Action::type_into(0, "target")]), std::slice::from_ref(&type_gt), &cfg).map_err(|e| e.to_string())?;
    ensure((ele, sr) == (1.0, 0.0), || format!("right element wrong payload gave {ele}/{sr}"))?;
    let (ele, sr) = element_and_step_sr(&traj_of(vec![Action::type_into(0, "walmart")]), &[type_gt], &cfg).map_err(|e| e.to_string())?;
    ensure((ele, sr) == (1.0, 1.0), || "perfect prediction not (1, 1)".into())?;

    let d = dynamic_success(&[true, false, true, true]).map_err(|e| e.to_string())?;
    ensure(d == 0.75, || format!("S,F,S,S gave {d}"))?;
    let five = Pricing::flat(5.0);
    ensure(five.cost(Usage { prompt_tokens: 1_000_000, completion_tokens: 0 }) == 5.0, || "1M tokens not $5".into())?;
    ensure(five.cost(Usage { prompt_tokens: 250_000, completion_tokens: 750_000 }) == 5.0, || "split 1M tokens not $5".into())?;
    ensure(five.cost(Usage::default()) == 0.0, || "zero tokens not $0".into())?;

    // retry rounds add their turns
    let app = fixture("search_app.json");
    let t = app.task("search_walmart").unwrap();
    let spec = SuiteSpec { strategy: Strategy::topk_first(3), mode: EvalMode::Dynamic, max_rounds: 3, seeds: vec![0] };
    let run = run_task(&app, t, &mut unlock_policy(), &NoisyReward, &spec);
    let per_round: Vec<usize> = run.trajectories.iter().map(Trajectory::turns).collect();
    ensure(per_round == [8, 4] && run.record.turns == 12, || format!("turns {per_round:?} -> {}", run.record.turns))?;
    let rec = |turns| TaskRecord {
        task_id: "a".into(),
        strategy: "s".into(),
        outcome: Outcome::Success,
        turns,
        tokens_prompt: 0,
        tokens_completion: 0,
        rounds_used: 2,
        static_score: None,
        element_accuracy: None,
        step_success_rate: None,
    };
    ensure(usage_report(&[rec(10 + 10)], &five).avg_turns == 20.0, || "two 10-turn rounds not 20".into())?;

    // step_sr <= ele_acc on every web-suite replay
    let web = fixture("web_shop.json");
    let mut checked = 0;
    for seed in 0..100u64 {
        for t in &web.tasks {
            for strategy in [Strategy::topk_first(3), Strategy::guidnav(3)] {
                let spec = SuiteSpec { strategy, mode: EvalMode::Static, max_rounds: 1, seeds: vec![seed] };
                let r = run_task(&web, t, &mut stochastic(&[0.4, 0.3]), &NoisyReward, &spec).record;
                let (e, s) = (r.element_accuracy.unwrap(), r.step_success_rate.unwrap());
                ensure(s <= e, || format!("step_sr {s} > ele_acc {e} for {} seed {seed}", t.task.id))?;
                checked += 1;
            }
        }
    }
    Ok(format!("7/10 -> 0.7, S/F/S/S -> 0.75, 1M tokens -> $5.00, 8+4 turns -> 12, step_sr <= ele_acc on {checked} replays"))
}

// ---------------------------------------------------------------- AC9

const WORDS: [&str; 8] = ["open", "the", "search", "bar", "first", "then", "scroll", "settings"];

fn random_action(rng: &mut ChaCha8Rng, space: ActionSpace) -> Action {
    let types = space.allowed_types();
    let t = types[rng.random_range(0..types.len())];
    let text = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(0..5);
        let mut s: String = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
        if rng.random_bool(0.3) {
            s.push_str(" \"q\" é\\ {x}");
        }
        s
    };
    match t {
        ActionType::Click => Action::click(rng.random_range(0..500)),
        ActionType::Longpress => Action::longpress(rng.random_range(0..500)),
        ActionType::Type if space.type_requires_target() => {
            let id = rng.random_range(0..50);
            Action::type_into(id, text(rng))
        }
        ActionType::Type => Action::type_text(text(rng)),
        ActionType::Scroll => Action::scroll(Direction::ALL[rng.random_range(0..4)]),
        other => Action::simple(other),
    }
}

fn run_suite_to_dir(root: &Path) -> Result<PathBuf, String> {
    let script = fixture("suite.json");
    let mut strategy = Strategy::guidnav(3);
    strategy.pass_n = Some(2);
    let spec = SuiteSpec { strategy, mode: EvalMode::Dynamic, max_rounds: 2, seeds: vec![5, 6] };
    let runs: Vec<TaskRun> =
        script.tasks.iter().map(|t| run_task(&script, t, &mut stochastic(&[0.3, 0.3, 0.2]), &NoisyReward, &spec)).collect();
    let tasks: Vec<_> = script.tasks.iter().map(|t| &t.task).collect();
    let sh = suite_hash(&tasks);
    let report = build_report(&spec, &sh, Pricing::default(), &runs);
    let manifest = Manifest::new(&spec, sha256_hex(b"acceptance"), sh, &runs);
    let dir = RunDir::create(root, "run").map_err(|e| e.to_string())?;
    dir.write_all(&manifest, &report, &runs).map_err(|e| e.to_string())?;
    Ok(dir.path().to_path_buf())
}

fn ac9_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut actions = 0;
    for space in ActionSpace::ALL {
        for _ in 0..1000 {
            let a = random_action(&mut rng, space);
            let back = parse_action(&serialize_action(&a), space).map_err(|e| format!("{a}: {e}"))?;
            ensure(back == a, || format!("{a} came back as {back}"))?;
            actions += 1;
        }
    }
    let mut sets = 0;
    for _ in 0..1000 {
        let space = ActionSpace::ALL[rng.random_range(0..3)];
        let k = rng.random_range(1..=3);
        let n = rng.random_range(1..=k);
        let cands: Vec<Candidate> = (0..n)
            .map(|_| {
                let words = rng.random_range(1..6);
                let mut c = Candidate::new(random_action(&mut rng, space), rng.random::<f64>());
                c.rationale = (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
                c
            })
            .collect();
        let cs = CandidateSet::new(k, cands).unwrap();
        let text = synthesize_response(&cs);
        let back = parse_topk_response(&text, space, k).map_err(|e| format!("{e} in {text:?}"))?;
        ensure(back == cs, || format!("candidate set changed through {text:?}"))?;
        sets += 1;
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_suite_to_dir(tmp.path())?;
    let b = run_suite_to_dir(tmp.path())?;
    let mut files = 0;
    let mut names: Vec<_> = fs::read_dir(a.join("trajectories")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        let (x, y) = (fs::read(a.join("trajectories").join(name)).unwrap(), fs::read(b.join("trajectories").join(name)).unwrap());
        ensure(x == y, || format!("{name:?} differs between runs"))?;
        files += 1;
    }
    for f in ["manifest.json", "report.json", "report.csv"] {
        ensure(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), || format!("{f} differs between runs"))?;
    }
    ensure(files > 0, || "no trajectories written".into())?;
    Ok(format!("{actions} action round-trips, {sets} Gk/Pk round-trips, {files} trajectory files byte-identical across two runs"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("AC1 matcher conformance", ac1_matcher),
        ("AC2 oracle dominance", ac2_oracle_dominance),
        ("AC3 guidnav+oracle reward == oracle_topk", ac3_guidnav_equals_oracle),
        ("AC4 strategy gap", ac4_strategy_gap),
        ("AC5 Pass@N monotonicity", ac5_pass_at_n),
        ("AC6 retry monotonicity", ac6_retries),
        ("AC7 surrogate training", ac7_training),
        ("AC8 metric arithmetic", ac8_metrics),
        ("AC9 round-trips and determinism", ac9_round_trips),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        match f() {
            Ok(detail) => println!("PASS {name}: {detail} [{:.2}s]", start.elapsed().as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{:.2}s]", start.elapsed().as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
