//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The two training-comparison criteria share a set of 5,000-episode runs that
//! are trained once per test process and take most of the wall time.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;

use domac::cdc::{batch_targets, quantile_critic_loss, CriticNet, CriticSample, QuantileLevels};
use domac::checkpoint::Checkpoint;
use domac::config::{AlgorithmVariant, OmFrozen, TrainConfig};
use domac::diffcore::{adam_step, AdamState, Init};
use domac::env::{transition, Action, GridConfig, GridState, PredatorPrey, Pos, SOLO_CATCH_PENALTY, STEP_COST, TEAM_CATCH_REWARD};
use domac::oma::{marginal_from_joints, marginal_policy_exact, marginal_policy_sampled, AggregationMode, ConditionalPolicy};
use domac::oppmodel::{enumerate_actions, OpponentModel};
use domac::rng::{stream, Purpose};
use domac::selftest::{gradient_checks, score_function_agreement, FD_TOLERANCE};
use domac::trainer::{build_agents, latest_checkpoint, train, RunSummary, TrainOptions, Trainer, METRICS_FILE, SUMMARY_FILE};

fn report(criterion: u32, passed: bool, detail: &str) {
    println!("criterion {criterion}: {} {detail}", if passed { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let r = gradient_checks(100, 2024).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let passed = r.worst() < FD_TOLERANCE && secs < 60.0;
    report(
        1,
        passed,
        &format!(
            "actor policy {:.2e}, actor models {:.2e}, quantile huber {:.2e}, scalar td {:.2e}, {secs:.1}s",
            r.actor_policy, r.actor_models, r.quantile_huber, r.scalar_td
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_2_surrogate_matches_score_function() {
    let worst = score_function_agreement(50, 7).unwrap();
    let passed = worst < 1e-6;
    report(2, passed, &format!("max abs difference {worst:.2e} over 50 toys"));
    assert!(passed);
}

#[test]
fn criterion_3_sampled_marginal_is_consistent() {
    let mut exact_match = true;
    let mut tv_sum = 0.0;
    let nets = 50;
    for n in 0..nets {
        let mut rng = stream(31, Purpose::Test, n);
        let obs_len = 6;
        let n_opp = rng.gen_range(1..=2);
        let dims = vec![5; n_opp];
        let policy = ConditionalPolicy::new(obs_len, &dims, 5, &[32, 32], Init::ScaledUniform, "pi", &mut rng).unwrap();
        let models: Vec<OpponentModel> =
            (0..n_opp).map(|k| OpponentModel::new(obs_len, n_opp, k, 5, &[32], Init::ScaledUniform, "om", &mut rng).unwrap()).collect();
        let obs: Vec<f64> = (0..obs_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exact = marginal_policy_exact(&policy, &models, &obs, 10_000).unwrap();
        let dists: Vec<_> = models.iter().map(|m| m.predict(&obs).unwrap()).collect();
        let hooked = marginal_from_joints(&policy, &dists, &obs, enumerate_actions(&dims, 10_000).unwrap(), AggregationMode::Sampled).unwrap();
        exact_match &= hooked.distribution == exact.distribution;
        let sampled = marginal_policy_sampled(&policy, &models, &obs, 1000, &mut rng).unwrap();
        let tv: f64 =
            0.5 * exact.distribution.probs().iter().zip(sampled.distribution.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        tv_sum += tv;
    }
    let tv = tv_sum / nets as f64;
    let passed = exact_match && tv < 0.02;
    report(3, passed, &format!("enumeration hook identical: {exact_match}, mean total variation at l=1000: {tv:.4}"));
    assert!(passed);
}

#[test]
fn criterion_4_quantile_recovery() {
    let start = Instant::now();
    let mut rng = stream(4, Purpose::Test, 0);
    let mut critic = CriticNet::new(1, 1, 1, 5, QuantileLevels::Midpoint, &[], Init::ScaledUniform, "critic", &mut rng).unwrap();
    let mut opt = AdamState::new(critic.net().params(), 1e-2);
    let obs = [1.0];
    let action = [0usize];
    let batch_size = 16;
    for _ in 0..50_000 {
        let rewards: Vec<f64> = (0..batch_size).map(|_| if rng.gen_bool(0.5) { 10.0 } else { 0.0 }).collect();
        let batch: Vec<CriticSample<'_>> = rewards
            .iter()
            .map(|&r| CriticSample { joint_obs: &obs, joint_actions: &action, reward: r, done: true, joint_obs_next: &obs })
            .collect();
        let targets = batch_targets(&critic, &batch, 0.0, 1).unwrap();
        quantile_critic_loss(&mut critic, &batch, &targets, 1.0).unwrap();
        adam_step(critic.net_mut().params_mut(), &mut opt).unwrap();
    }
    let learned = domac::cdc::critic_forward(&critic, &obs, &action).unwrap().values;
    // Quantile function of the two-point law at each level; the median is
    // any point of [0, 10], so either end counts.
    let truth: [&[f64]; 5] = [&[0.0], &[0.0], &[0.0, 10.0], &[10.0], &[10.0]];
    let passed = learned.iter().zip(truth).all(|(v, t)| t.iter().any(|q| (v - q).abs() <= 0.25));
    let secs = start.elapsed().as_secs_f64();
    report(4, passed && secs < 60.0, &format!("learned {learned:.3?} at levels {:?}, {secs:.1}s", critic.levels()));
    assert!(passed && secs < 60.0);
}

fn reward_of(predators: &[Pos], prey: Pos) -> (f64, bool, bool) {
    let cfg = GridConfig::pp2v1();
    let state = GridState { predators: predators.to_vec(), preys: vec![prey], prey_alive: vec![true], step_count: 0 };
    let t = transition(&cfg, &state, &[Action::Noop, Action::Noop], &[Some(Action::Noop)]).unwrap();
    (t.reward, t.state.prey_alive[0], t.done)
}

#[test]
fn criterion_5_environment_is_exact() {
    let mut ok = true;
    let (r, alive, done) = reward_of(&[Pos::new(0, 0), Pos::new(4, 4)], Pos::new(2, 2));
    ok &= r == -0.01 && r == STEP_COST && alive && !done;
    let (r, alive, done) = reward_of(&[Pos::new(2, 1), Pos::new(4, 4)], Pos::new(2, 2));
    ok &= r == -0.51 && r == STEP_COST + SOLO_CATCH_PENALTY && alive && !done;
    let (r, alive, done) = reward_of(&[Pos::new(2, 1), Pos::new(1, 2)], Pos::new(2, 2));
    ok &= r == 4.99 && r == STEP_COST + TEAM_CATCH_REWARD && !alive && done;

    // Moves off the grid leave the agent in place.
    let cfg = GridConfig::pp2v1();
    let corner = GridState { predators: vec![Pos::new(0, 0), Pos::new(4, 4)], preys: vec![Pos::new(0, 4)], prey_alive: vec![true], step_count: 0 };
    let t = transition(&cfg, &corner, &[Action::Up, Action::Down], &[Some(Action::Right)]).unwrap();
    ok &= t.state.predators == corner.predators && t.state.preys == corner.preys;
    let t = transition(&cfg, &corner, &[Action::Left, Action::Right], &[Some(Action::Up)]).unwrap();
    ok &= t.state.predators == corner.predators && t.state.preys == corner.preys;

    // Far-apart agents that never move cannot catch, so only the cap ends the episode.
    let mut env = PredatorPrey::new(cfg.clone()).unwrap();
    env.reset(5);
    let mut steps = 0;
    while !env.is_done() {
        let mut s = env.state().clone();
        s.predators = vec![Pos::new(0, 0), Pos::new(0, 1)];
        s.preys = vec![Pos::new(4, 4)];
        let rng = env.rng().clone();
        env.restore(s, rng, false);
        env.step(&[Action::Noop, Action::Noop]).unwrap();
        steps += 1;
        ok &= steps <= 100;
    }
    ok &= steps == 100;

    // Identical seeds and actions give identical trajectories.
    let run = |seed: u64| {
        let mut env = PredatorPrey::new(cfg.clone()).unwrap();
        let mut trace = vec![env.reset(seed)];
        let mut actions = stream(seed, Purpose::Test, 1);
        let mut rewards = Vec::new();
        while !env.is_done() {
            let a = [Action::ALL[actions.gen_range(0..5)], Action::ALL[actions.gen_range(0..5)]];
            let r = env.step(&a).unwrap();
            rewards.push(r.reward.to_bits());
            trace.push(r.observations);
        }
        (trace, rewards, env.state().clone())
    };
    ok &= (0..20).all(|s| run(s) == run(s));
    report(5, ok, "reward cases, boundary clipping, 100-step cap, seed determinism");
    assert!(ok);
}

fn read_metrics(dir: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(dir.join(METRICS_FILE)).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<Option<f64>> {
    let c = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"));
    rows.iter().map(|r| r[c].parse().ok()).collect()
}

/// Team average of a per-agent column at every row where it is present.
fn team_series(header: &[String], rows: &[Vec<String>], prefix: &str, n_agents: usize) -> Vec<f64> {
    let cols: Vec<Vec<Option<f64>>> = (0..n_agents).map(|i| column(header, rows, &format!("{prefix}_{i}"))).collect();
    (0..rows.len())
        .filter_map(|r| {
            let vals: Option<Vec<f64>> = cols.iter().map(|c| c[r]).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

struct ComparisonRun {
    variant: AlgorithmVariant,
    seed: u64,
    evals: Vec<f64>,
    kld: Vec<f64>,
    entropy: Vec<f64>,
}

fn comparison_config(variant: AlgorithmVariant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.episodes = 5000;
    cfg.eval.every_updates = 25;
    cfg
}

fn comparison_runs() -> &'static Vec<ComparisonRun> {
    static RUNS: OnceLock<Vec<ComparisonRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        for seed in [1, 2] {
            for variant in [AlgorithmVariant::Domac, AlgorithmVariant::Maac] {
                let dir = root.path().join(format!("{variant}_{seed}"));
                let cfg = comparison_config(variant, seed);
                train(&cfg, &dir, &TrainOptions::default()).unwrap();
                let (h, rows) = read_metrics(&dir);
                out.push(ComparisonRun {
                    variant,
                    seed,
                    evals: column(&h, &rows, "eval_mean_return").into_iter().flatten().collect(),
                    kld: team_series(&h, &rows, "om_kld", 2),
                    entropy: team_series(&h, &rows, "om_entropy", 2),
                });
            }
        }
        out
    })
}

fn final_ten(evals: &[f64]) -> f64 {
    let tail = &evals[evals.len().saturating_sub(10)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
fn criterion_6_domac_outperforms_maac() {
    let runs = comparison_runs();
    let mean_of = |v: AlgorithmVariant| {
        let scores: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| final_ten(&r.evals)).collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    for r in runs {
        println!("  {} seed {}: {} evaluations, final-10 mean {:.3}", r.variant, r.seed, r.evals.len(), final_ten(&r.evals));
    }
    let (domac, maac) = (mean_of(AlgorithmVariant::Domac), mean_of(AlgorithmVariant::Maac));
    let enough = runs.iter().all(|r| r.evals.len() >= 10);
    let passed = enough && domac >= maac && domac >= 0.0;
    report(6, passed, &format!("final-10 mean return: domac {domac:.3}, maac {maac:.3}"));
    assert!(passed);
}

#[test]
fn criterion_7_opponent_models_sharpen() {
    let runs = comparison_runs();
    let domac: Vec<&ComparisonRun> = runs.iter().filter(|r| r.variant == AlgorithmVariant::Domac).collect();
    let avg = |f: &dyn Fn(&ComparisonRun) -> f64| domac.iter().map(|r| f(r)).sum::<f64>() / domac.len() as f64;
    let (k0, k1) = (avg(&|r| r.kld[0]), avg(&|r| *r.kld.last().unwrap()));
    let (e0, e1) = (avg(&|r| r.entropy[0]), avg(&|r| *r.entropy.last().unwrap()));
    for r in &domac {
        println!(
            "  seed {}: kld {:.4} -> {:.4}, entropy {:.4} -> {:.4}",
            r.seed,
            r.kld[0],
            r.kld.last().unwrap(),
            r.entropy[0],
            r.entropy.last().unwrap()
        );
    }
    let passed = k1 < k0 && e1 < e0;
    report(7, passed, &format!("model kld {k0:.4} -> {k1:.4}, model entropy {e0:.4} -> {e1:.4}"));
    assert!(passed);
}

fn short_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.episodes = 40;
    cfg.eval.every_updates = 2;
    cfg.eval.episodes = 20;
    cfg.log.checkpoint_every = 2;
    cfg
}

fn run_short(cfg: &TrainConfig, dir: &Path) -> (RunSummary, Checkpoint, Vec<String>, Vec<Vec<String>>) {
    let summary = train(cfg, dir, &TrainOptions::default()).unwrap();
    let ck = Checkpoint::load(&latest_checkpoint(dir).unwrap().unwrap()).unwrap();
    let (h, rows) = read_metrics(dir);
    (summary, ck, h, rows)
}

fn filled(header: &[String], rows: &[Vec<String>], name: &str) -> bool {
    column(header, rows, name).iter().any(Option::is_some)
}

#[test]
fn criterion_8_ablations_are_isolated() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| -> PathBuf { root.path().join(name) };
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let base_cfg = short_config(11);
    let (base, base_ck, _, _) = run_short(&base_cfg, &dir("base"));
    let initial = build_agents(&base_cfg).unwrap();

    for d in [3usize, 8, 16] {
        let mut cfg = base_cfg.clone();
        cfg.ablation.om_dim = d;
        let (s, ck, h, rows) = run_short(&cfg, &dir(&format!("om{d}")));
        check(s.finished, "om-dim run finished");
        let out = ck.blocks.iter().rfind(|b| b.name.starts_with("agent0/om0/b")).unwrap();
        check(out.shape == vec![d], "om-dim output width");
        let pi_in = ck.block("agent0/pi/w0").unwrap();
        check(pi_in.shape[0] == cfg.grid().obs_len() + d, "om-dim policy input width");
        check(filled(&h, &rows, "om_entropy_0"), "om-dim entropy logged");
        check(!filled(&h, &rows, "om_kld_0") && !filled(&h, &rows, "om_accuracy_0"), "om-dim kld and accuracy not applicable");
        check(s.critic_hashes != base.critic_hashes, "om-dim run differs from base");
    }

    let mut masked = base_cfg.clone();
    masked.ablation.mask_opponent_obs = true;
    let (s, _, h, rows) = run_short(&masked, &dir("mask"));
    check(s.finished, "mask run finished");
    check(filled(&h, &rows, "om_kld_0"), "mask run logs kld");
    check(build_agents(&masked).unwrap()[0].policy_hash() == initial[0].policy_hash(), "mask run starts from the same parameters");
    check(s.policy_hashes != base.policy_hashes, "mask run diverges from base");

    let mut random = base_cfg.clone();
    random.ablation.om_frozen = OmFrozen::Random;
    let (s, _, h, rows) = run_short(&random, &dir("random"));
    check(s.finished, "frozen random run finished");
    let init_models: Vec<String> = initial.iter().map(|a| a.models_hash()).collect();
    check(s.model_hashes == init_models, "frozen random models untouched");
    check(s.policy_hashes != initial.iter().map(|a| a.policy_hash()).collect::<Vec<_>>(), "frozen random policy trained");
    check(filled(&h, &rows, "om_kld_0"), "frozen random logs kld");

    let source = latest_checkpoint(&dir("base")).unwrap().unwrap();
    let mut trained = base_cfg.clone();
    trained.seed = 12;
    trained.ablation.om_frozen = OmFrozen::Trained;
    trained.ablation.om_checkpoint = source.display().to_string();
    let (s, _, _, _) = run_short(&trained, &dir("trained"));
    check(s.finished, "frozen trained run finished");
    let source_models: Vec<String> = Trainer::from_checkpoint(&base_ck).unwrap().agents.iter().map(|a| a.models_hash()).collect();
    check(s.model_hashes == source_models, "frozen trained models equal the source run's");
    check(s.model_hashes != init_models, "trained models differ from initial ones");

    for k in [3usize, 5] {
        let mut cfg = base_cfg.clone();
        cfg.quantiles = k;
        let (s, ck, h, rows) = run_short(&cfg, &dir(&format!("k{k}")));
        check(s.finished, "quantile run finished");
        let out = ck.blocks.iter().rfind(|b| b.name.starts_with("agent0/critic/b")).unwrap();
        check(out.shape == vec![k], "critic output width");
        check(filled(&h, &rows, "critic_loss_0"), "critic loss logged");
        check((k == 5) == (s.critic_hashes == base.critic_hashes), "quantile count isolates the critic");
    }

    let passed = failures.is_empty();
    report(8, passed, &if passed { "om-dim 3/8/16, mask, frozen random/trained, quantiles 3/5".to_string() } else { failures.join("; ") });
    assert!(passed);
}

#[test]
fn criterion_9_identical_runs_give_identical_metrics() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = short_config(9);
    cfg.episodes = 100;
    cfg.eval.every_updates = 3;
    let a = root.path().join("a");
    let b = root.path().join("b");
    train(&cfg, &a, &TrainOptions::default()).unwrap();
    train(&cfg, &b, &TrainOptions::default()).unwrap();
    let ma = std::fs::read(a.join(METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.join(METRICS_FILE)).unwrap();
    let passed = ma == mb && !ma.is_empty();
    report(9, passed, &format!("metrics.csv {} bytes, identical: {}", ma.len(), ma == mb));
    assert!(passed);
}

#[test]
fn resumed_run_continues_the_metric_stream() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = short_config(21);
    cfg.episodes = 60;
    let whole = root.path().join("whole");
    let split = root.path().join("split");
    train(&cfg, &whole, &TrainOptions::default()).unwrap();
    train(&cfg, &split, &TrainOptions { resume: false, max_updates: Some(3) }).unwrap();
    train(&cfg, &split, &TrainOptions { resume: true, max_updates: None }).unwrap();
    assert_eq!(std::fs::read(whole.join(METRICS_FILE)).unwrap(), std::fs::read(split.join(METRICS_FILE)).unwrap());
    assert_eq!(std::fs::read(whole.join(SUMMARY_FILE)).unwrap(), std::fs::read(split.join(SUMMARY_FILE)).unwrap());
}
