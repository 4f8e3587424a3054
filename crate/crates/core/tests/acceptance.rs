//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. Exits
//! non-zero when a criterion fails that is not on the known-failure list.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdrl::augment::RolloutStats;
use tdrl::config::TrainConfig;
use tdrl::dataset::{label_goals, GoalLabelConfig, TransitionStore};
use tdrl::dynamics::{DynamicsConfig, DynamicsModel, StepPairs, Variance};
use tdrl::env::{generate_dataset, layouts, ActionSpace, EnvKind, MazeEnv, MazeLayout, State, UniformRandom};
use tdrl::nn::{central_differences, relative_error, Activation, Mlp};
use tdrl::oracle::{bfs_from, discounted_cost, expectile_closed_form};
use tdrl::pipeline::{self, PhaseSelection};
use tdrl::policy::{awr_weights, intrinsic_reward, td_loss_and_grad, PolicyBatch, PolicyConfig, PolicyNet, RewardSign};
use tdrl::repr::{expectile_loss, spearman, Autoencoder, FeatureMap, LossWeights, ReprBatch, ReprConfig, TranAnchor};

/// Criteria that are expected to fail at desk scale; see the decisions log.
const KNOWN_FAILURES: &[u32] = &[1, 6];

const FD_POINTS: u64 = 20;
const FD_TOL: f64 = 1e-4;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn grid(text: &str) -> MazeEnv {
    MazeEnv::grid(MazeLayout::parse(text).unwrap()).unwrap()
}

fn random_store(env: &MazeEnv, n: usize, horizon: usize, seed: u64) -> TransitionStore {
    let trajs = generate_dataset(env, &UniformRandom, n, horizon, seed).unwrap();
    TransitionStore::new(label_goals(env, &trajs, &GoalLabelConfig::default(), seed).unwrap())
}

/// Representation trained once on the 7×7 maze (τ = 0.95, γ = 0.99) and
/// shared by the distance-accuracy and heatmap criteria.
fn seven_by_seven_repr() -> (MazeEnv, Autoencoder) {
    let mut cfg = TrainConfig::default();
    cfg.env.maze = "maze-7x7".into();
    cfg.network.width_multiplier = 1.0;
    cfg.repr.hidden = vec![32; 3];
    cfg.repr.steps = 10_000;
    cfg.repr.lr = 1e-3;
    cfg.repr.tau = 0.95;
    cfg.repr.gamma = 0.99;
    let env = cfg.env.build().unwrap();
    let data = pipeline::load_data(&cfg, &env).unwrap();
    let ck = pipeline::repr_phase(&cfg, &env, &data, None).unwrap();
    (env, ck.repr().unwrap().clone())
}

fn criterion_1(env: &MazeEnv, ae: &Autoencoder) -> Outcome {
    let width = env.layout().width;
    let mut worst: f64 = 0.0;
    for &g in &env.layout().goals {
        let bfs = bfs_from(env.layout(), g).unwrap();
        for (c, d) in ae.distance_table(env, &State::from_cell(g)) {
            let n = bfs[c[1] * width + c[0]].unwrap();
            if n > 0 {
                let oracle = discounted_cost(n, 0.99);
                worst = worst.max((d - oracle).abs() / oracle);
            }
        }
    }
    outcome(worst < 0.05, format!("max relative error {:.1}% over {} goals (need < 5%)", 100.0 * worst, env.layout().goals.len()))
}

/// Minimises `sum_i L(x_i - m)` by plain gradient descent.
fn expectile_by_descent(xs: &[f64], tau: f64) -> f64 {
    let mut m = xs.iter().sum::<f64>() / xs.len() as f64;
    let lr = 0.4 / xs.len() as f64;
    for _ in 0..200_000 {
        let g: f64 = xs.iter().map(|&x| -expectile_loss(x - m, tau).1).sum();
        m -= lr * g;
        if g.abs() < 1e-12 {
            break;
        }
    }
    m
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..5.0)).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let max = xs.iter().copied().fold(f64::MIN, f64::max);
    let half = (expectile_closed_form(&xs, 0.5).unwrap() - mean).abs();
    let mut gd_gap: f64 = 0.0;
    for tau in [0.5, 0.7, 0.9, 0.95, 0.99] {
        gd_gap = gd_gap.max((expectile_by_descent(&xs, tau) - expectile_closed_form(&xs, tau).unwrap()).abs());
    }
    let taus = [0.5, 0.7, 0.9, 0.95, 0.99, 0.999, 0.9999, 0.99999, 1.0 - 1e-7, 1.0 - 1e-9];
    let path: Vec<f64> = taus.iter().map(|&t| expectile_closed_form(&xs, t).unwrap()).collect();
    let monotone = path.windows(2).all(|w| w[0] <= w[1]) && path.iter().all(|&e| e <= max);
    let limit_gap = max - path.last().unwrap();
    outcome(
        half < 1e-10 && gd_gap < 1e-6 && monotone && limit_gap < 1e-3,
        format!("|e(0.5)-mean| {half:.1e}, descent gap {gd_gap:.1e}, monotone {monotone}, max-e(1-1e-9) {limit_gap:.1e}"),
    )
}

fn repr_fd(env: &MazeEnv, seed: u64, w: LossWeights, anchor: TranAnchor) -> f64 {
    let cfg = ReprConfig { latent_dim: 4, hidden: vec![8, 8], tau: 0.9, tran_anchor: anchor, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ae = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, env), &mut rng);
    // random (not zero-initialised) output layers so every term is active
    ae.encoder = Mlp::new(ae.encoder.layer_dims(), Activation::Gelu, &mut rng);
    ae.decoder = Mlp::new(ae.decoder.layer_dims(), Activation::Gelu, &mut rng);
    ae.target_encoder = Mlp::new(ae.encoder.layer_dims(), Activation::Gelu, &mut rng);
    let data = random_store(env, 4, 30, seed);
    let items = data.sample_with_goal(12, &mut rng).unwrap();
    let batch = ReprBatch::new(env, &items, &ae.features);
    let (_, ge, gd) = ae.loss_and_grad(&batch, &cfg, w).unwrap();
    let ne = ae.encoder.weights().len();
    let params: Vec<f64> = ae.encoder.weights().iter().chain(ae.decoder.weights()).copied().collect();
    let numeric = central_differences(&params, 1e-6, |p| {
        let mut probe = ae.clone();
        probe.encoder.weights_mut().copy_from_slice(&p[..ne]);
        probe.decoder.weights_mut().copy_from_slice(&p[ne..]);
        probe.loss_and_grad(&batch, &cfg, w).unwrap().0.total
    });
    relative_error(&ge.into_iter().chain(gd).collect::<Vec<_>>(), &numeric)
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> StepPairs {
    let mut a = Array2::zeros((n, 5));
    for i in 0..n {
        a[[i, rng.gen_range(0..5)]] = 1.0;
    }
    StepPairs {
        z: Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0)),
        a,
        z_next: Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0)),
    }
}

fn dynamics_fd(seed: u64, variance: Variance) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DynamicsConfig { hidden: vec![8, 8], variance, ..Default::default() };
    let mut m = DynamicsModel::new(3, ActionSpace::Discrete, &cfg, &mut rng);
    m.net = Mlp::new(m.net.layer_dims(), m.net.activation(), &mut rng);
    let p = random_pairs(&mut rng, 10, 3);
    let (_, g) = m.nll_and_grad(&p).unwrap();
    let numeric = central_differences(m.net.weights(), 1e-6, |w| {
        let mut probe = m.clone();
        probe.net.weights_mut().copy_from_slice(w);
        probe.nll_and_grad(&p).unwrap().0
    });
    relative_error(&g, &numeric)
}

fn td_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Mlp::new(&[6, 8, 8, 1], Activation::Gelu, &mut rng);
    let x = Array2::from_shape_fn((10, 6), |_| rng.gen_range(-1.0..1.0));
    let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (_, g) = td_loss_and_grad(&q, x.view(), &y).unwrap();
    let numeric = central_differences(q.weights(), 1e-6, |w| {
        let probe = Mlp::from_weights(q.layer_dims(), q.activation(), w.to_vec()).unwrap();
        td_loss_and_grad(&probe, x.view(), &y).unwrap().0
    });
    relative_error(&g, &numeric)
}

fn awr_fd(env: &MazeEnv, seed: u64) -> f64 {
    let rcfg = ReprConfig { latent_dim: 4, hidden: vec![8], ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ae = Autoencoder::new(&rcfg, FeatureMap::for_env(rcfg.features, env), &mut rng);
    let pcfg = PolicyConfig { hidden: vec![8, 8], ..Default::default() };
    let mut net = PolicyNet::new(ae.features, 4, env.action_space(), &pcfg, &mut rng);
    net.net = Mlp::new(net.net.layer_dims(), net.net.activation(), &mut rng);
    net.log_std.iter_mut().for_each(|l| *l = rng.gen_range(-0.5..0.5));
    let data = random_store(env, 4, 30, seed);
    let items = data.sample_with_goal(12, &mut rng).unwrap();
    let pb = PolicyBatch::new(&ae, env.action_space(), &items, RewardSign::Progress).unwrap();
    let w = awr_weights(&pb.reward, 3.0, 100.0, false);
    let (_, g, gs) = net.weighted_nll_and_grad(pb.x.view(), &pb.actions, &w).unwrap();
    let nw = net.net.weights().len();
    let params: Vec<f64> = net.net.weights().iter().chain(&net.log_std).copied().collect();
    let numeric = central_differences(&params, 1e-6, |p| {
        let mut probe = net.clone();
        probe.net.weights_mut().copy_from_slice(&p[..nw]);
        probe.log_std.copy_from_slice(&p[nw..]);
        probe.weighted_nll_and_grad(pb.x.view(), &pb.actions, &w).unwrap().0
    });
    relative_error(&g.into_iter().chain(gs).collect::<Vec<_>>(), &numeric)
}

fn criterion_3() -> Outcome {
    let env = grid(layouts::MAZE_7X7);
    let point = MazeEnv::new(MazeLayout::parse(layouts::MAZE_7X7).unwrap(), EnvKind::DEFAULT_POINT).unwrap();
    let only = |rec, traj, tran| LossWeights { rec, traj, tran };
    let losses: Vec<(&str, Box<dyn Fn(u64) -> f64>)> = vec![
        ("rec", Box::new(|s| repr_fd(&env, s, only(1.0, 0.0, 0.0), TranAnchor::UnitStep))),
        ("traj", Box::new(|s| repr_fd(&env, s, only(0.0, 1.0, 0.0), TranAnchor::UnitStep))),
        ("tran", Box::new(|s| {
            let anchor = if s % 2 == 0 { TranAnchor::UnitStep } else { TranAnchor::GoalReward };
            repr_fd(&env, s, only(0.0, 0.0, 1.0), anchor)
        })),
        ("nll", Box::new(|s| dynamics_fd(s, if s % 2 == 0 { Variance::Learned } else { Variance::Unit }))),
        ("td", Box::new(td_fd)),
        ("awr", Box::new(|s| awr_fd(if s % 2 == 0 { &env } else { &point }, s))),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, check) in &losses {
        let worst = (0..FD_POINTS).map(|s| check(1000 + s)).fold(0.0, f64::max);
        passed &= worst < FD_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    outcome(passed, format!("worst rel. err over {FD_POINTS} points: {}", parts.join(", ")))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 4;
    let cfg = DynamicsConfig { hidden: vec![8, 8], variance: Variance::Unit, ..Default::default() };
    let mut m = DynamicsModel::new(dim, ActionSpace::Discrete, &cfg, &mut rng);
    m.net = Mlp::new(m.net.layer_dims(), m.net.activation(), &mut rng);
    let offsets: Vec<f64> = (0..100)
        .map(|_| {
            let p = random_pairs(&mut rng, 32, dim);
            m.nll_and_grad(&p).unwrap().0 - 0.5 * dim as f64 * m.evaluate(&p).unwrap().mse
        })
        .collect();
    let spread = offsets.iter().copied().fold(f64::MIN, f64::max) - offsets.iter().copied().fold(f64::MAX, f64::min);
    outcome(spread < 1e-9, format!("NLL - MSE spread {spread:.1e} over 100 batches (offset {:.6})", offsets[0]))
}

fn criterion_5() -> Outcome {
    let env = grid(layouts::MAZE_7X7);
    let rcfg = ReprConfig { latent_dim: 8, hidden: vec![16], ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ae = Autoencoder::new(&rcfg, FeatureMap::for_env(rcfg.features, &env), &mut rng);
    ae.encoder = Mlp::new(ae.encoder.layer_dims(), Activation::Gelu, &mut rng);
    let trajs = generate_dataset(&env, &UniformRandom, 1000, 30, 5).unwrap();
    let free = env.layout().free_cells();
    let mut worst: f64 = 0.0;
    for t in &trajs {
        let g = State::from_cell(free[rng.gen_range(0..free.len())]);
        let sum: f64 = t.states.windows(2).map(|w| intrinsic_reward(&ae, &w[0], &w[1], &g, RewardSign::AsPrinted)).sum();
        let direct = ae.distance(t.states.last().unwrap(), &g) - ae.distance(&t.states[0], &g);
        worst = worst.max((sum - direct).abs());
    }
    outcome(worst < 1e-10, format!("max |sum r - (d_H - d_0)| = {worst:.1e} over {} trajectories", trajs.len()))
}

/// Desk-scale ablation configuration on the 11×11 maze.
fn ablation_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.env.maze = "maze-11x11".into();
    cfg.network.width_multiplier = 1.0;
    cfg.repr.hidden = vec![32; 3];
    cfg.repr.steps = 5_000;
    cfg.repr.lr = 1e-3;
    cfg.dynamics.hidden = vec![64; 3];
    cfg.dynamics.steps = 15_000;
    cfg.dynamics.lr = 1e-3;
    cfg.policy.hidden = vec![32; 2];
    cfg.policy.steps = 8_000;
    cfg.policy.lr = 1e-3;
    cfg.policy.beta = 10.0;
    cfg.eval.episodes = 20;
    cfg.eval.curve_episodes = 0;
    cfg
}

fn criterion_6() -> Outcome {
    const SEEDS: u64 = 8;
    let arms = ["latent", "none", "naive-state"];
    let mut success = [0.0; 3];
    let mut leakage = [0.0; 3];
    for seed in 0..SEEDS {
        let cfg = ablation_config(seed);
        let env = cfg.env.build().unwrap();
        let data = pipeline::load_data(&cfg, &env).unwrap();
        let repr = pipeline::repr_phase(&cfg, &env, &data, None).unwrap();
        // the latent and none arms share one latent-space dynamics model
        let latent_dyn = pipeline::dynamics_phase(&cfg, &env, &data, &repr, None).unwrap();
        for (i, arm) in arms.iter().enumerate() {
            let mut c = cfg.clone();
            c.strategies.augmenter = arm.to_string();
            if *arm == "none" {
                c = c.without_rollouts();
            }
            let dynamics = if *arm == "naive-state" { pipeline::dynamics_phase(&c, &env, &data, &repr, None).unwrap() } else { latent_dyn.clone() };
            let out = pipeline::policy_phase(&c, &env, &data, &dynamics, None).unwrap();
            let doc = pipeline::evaluate_checkpoint(&c, &out.checkpoint, None).unwrap();
            success[i] += doc.summary.sweep.mean / SEEDS as f64;
            leakage[i] += out.mean_wall_leakage() / SEEDS as f64;
        }
    }
    let [latent, none, naive] = success.map(|s| 100.0 * s);
    let passed = latent >= none - 2.0 && latent >= naive + 5.0 && leakage[2] > leakage[0];
    outcome(
        passed,
        format!(
            "success latent {latent:.1}, none {none:.1}, naive {naive:.1} points; wall leakage latent {:.3}, naive {:.3}",
            leakage[0], leakage[2]
        ),
    )
}

fn criterion_7(env: &MazeEnv, ae: &Autoencoder) -> Outcome {
    let width = env.layout().width;
    let mut rhos = Vec::new();
    for g in pipeline::corner_goals(env) {
        let bfs = bfs_from(env.layout(), g.cell().unwrap()).unwrap();
        let table = ae.distance_table(env, &g);
        let learned: Vec<f64> = table.iter().map(|(_, d)| *d).collect();
        let steps: Vec<f64> = table.iter().map(|(c, _)| bfs[c[1] * width + c[0]].unwrap() as f64).collect();
        rhos.push(spearman(&learned, &steps));
    }
    let list: Vec<String> = rhos.iter().map(|r| format!("{r:.3}")).collect();
    outcome(rhos.iter().all(|&r| r >= 0.95), format!("Spearman per corner [{}] (need >= 0.95)", list.join(", ")))
}

fn small_run_config() -> TrainConfig {
    TrainConfig::from_toml_str(
        r#"
        seed = 8
        [data]
        n_trajectories = 20
        horizon = 40
        [network]
        width_multiplier = 1.0
        [repr]
        hidden = [16, 16]
        latent_dim = 8
        steps = 200
        batch_size = 64
        [dynamics]
        hidden = [16, 16]
        steps = 200
        batch_size = 64
        [policy]
        hidden = [16, 16]
        steps = 200
        batch_size = 64
        [eval]
        episodes = 5
        horizon = 30
        seeds = [0, 1]
        curve_episodes = 2
        "#,
    )
    .unwrap()
}

fn criterion_8_and_9() -> (Outcome, Outcome) {
    let cfg = small_run_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline::train(&cfg, a.path(), PhaseSelection::All).unwrap();
    let mb = pipeline::train(&cfg, b.path(), PhaseSelection::All).unwrap();
    let same = ma.checkpoints == mb.checkpoints && ma.checkpoints.len() == 3;
    let c8 = outcome(same, format!("{} checkpoint hashes identical across reruns: {same}", ma.checkpoints.len()));

    let log: Vec<RolloutStats> = std::fs::read_to_string(a.path().join(pipeline::ROLLOUT_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let total = cfg.policy.steps;
    let size = (0.5 * ma.n_transitions as f64).round() as usize;
    let first = log.first().map(|r| r.step);
    let passed = log.len() == 8 && first == Some((3 * total).div_ceil(10)) && log.iter().all(|r| r.count == size);
    let c9 = outcome(
        passed,
        format!("{} refreshes, first at step {first:?} of {total}, sizes {:?} (want {size})", log.len(), log.iter().map(|r| r.count).collect::<Vec<_>>()),
    );
    (c8, c9)
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome, t: Instant| {
        println!("criterion {n}: {} -- {} [{:.0}s]", if o.passed { "PASS" } else { "FAIL" }, o.detail, t.elapsed().as_secs_f64());
        results.push((n, o));
    };

    let t = Instant::now();
    let (env7, ae7) = seven_by_seven_repr();
    report(1, criterion_1(&env7, &ae7), t);
    let t = Instant::now();
    report(2, criterion_2(), t);
    let t = Instant::now();
    report(3, criterion_3(), t);
    let t = Instant::now();
    report(4, criterion_4(), t);
    let t = Instant::now();
    report(5, criterion_5(), t);
    let t = Instant::now();
    report(6, criterion_6(), t);
    let t = Instant::now();
    report(7, criterion_7(&env7, &ae7), t);
    let t = Instant::now();
    let (c8, c9) = criterion_8_and_9();
    report(8, c8, t);
    report(9, c9, t);

    let unexpected: Vec<u32> = results.iter().filter(|(n, o)| !o.passed && !KNOWN_FAILURES.contains(n)).map(|(n, _)| *n).collect();
    let fixed: Vec<u32> = results.iter().filter(|(n, o)| o.passed && KNOWN_FAILURES.contains(n)).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} passed in {:.0}s", results.iter().filter(|(_, o)| o.passed).count(), results.len(), start.elapsed().as_secs_f64());
    if !fixed.is_empty() {
        println!("note: known failures now passing: {fixed:?}");
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
