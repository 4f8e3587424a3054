//! End-to-end orchestration: data, representation, dynamics, then policy
//! training with scheduled rollouts, plus evaluation and heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{refresh, RolloutContext, RolloutSchedule, RolloutStats, ScheduleAction};
use crate::checkpoint::{Checkpoint, DynamicsPart, Phase, PolicyPart};
use crate::config::TrainConfig;
use crate::dataset::{label_goals, load_transitions, sample_batch, save_transitions, SyntheticBuffer, TransitionStore};
use crate::dynamics::{latent_pairs, state_pairs, train_dynamics};
use crate::env::{derive_seed, generate_dataset, MazeEnv, State};
use crate::error::{Error, Result};
use crate::policy::{evaluate, EvalReport, EvalSummary, LearnedPolicy, PolicyNet, PolicyStepStats};
use crate::registry::{self, BehaviorParams, ModelSpace};
use crate::repr::{train_repr, write_heatmap_csv, Autoencoder};

pub const REPR_CKPT: &str = "repr.ckpt";
pub const DYNAMICS_CKPT: &str = "dynamics.ckpt";
pub const POLICY_CKPT: &str = "policy.ckpt";
pub const ROLLOUT_LOG: &str = "rollouts.jsonl";

const SEED_REPR: usize = 1;
const SEED_DYNAMICS: usize = 2;
const SEED_POLICY: usize = 3;
const SEED_ROLLOUT: usize = 4;
const SEED_CURVE: usize = 5;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Description of a generated dataset, written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub maze: String,
    pub maze_hash: String,
    pub behavior: String,
    pub epsilon: f64,
    pub n_trajectories: usize,
    pub horizon: usize,
    pub n_transitions: usize,
    pub data_sha256: String,
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    data.with_file_name(name)
}

/// Rolls the behaviour policy and labels goals, fully determined by the config.
pub fn generate_data(cfg: &TrainConfig, env: &MazeEnv) -> Result<TransitionStore> {
    let behaviors = registry::behaviors();
    let behavior = (behaviors.get(&cfg.strategies.behavior)?)(&BehaviorParams { epsilon: cfg.data.epsilon });
    let seed = cfg.data_seed();
    let trajs = generate_dataset(env, behavior.as_ref(), cfg.data.n_trajectories, cfg.data.horizon, seed)?;
    Ok(TransitionStore::new(label_goals(env, &trajs, &cfg.data.labeling, seed)?))
}

/// Writes the dataset and its manifest; returns the manifest.
pub fn gen_data(cfg: &TrainConfig, out: &Path) -> Result<DataManifest> {
    let env = cfg.env.build()?;
    let data = generate_data(cfg, &env)?;
    save_transitions(out, data.as_slice(), env.action_space())?;
    let manifest = DataManifest {
        format_version: 1,
        config_hash: cfg.hash(),
        seed: cfg.data_seed(),
        maze: cfg.env.maze.clone(),
        maze_hash: env.layout().hash(),
        behavior: cfg.strategies.behavior.clone(),
        epsilon: cfg.data.epsilon,
        n_trajectories: cfg.data.n_trajectories,
        horizon: cfg.data.horizon,
        n_transitions: data.len(),
        data_sha256: sha256_file(out)?,
    };
    std::fs::write(manifest_path(out), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// The configured dataset file if there is one, otherwise freshly generated.
pub fn load_data(cfg: &TrainConfig, env: &MazeEnv) -> Result<TransitionStore> {
    let Some(path) = &cfg.data.path else {
        return generate_data(cfg, env);
    };
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("dataset {} does not exist", path.display())));
    }
    let items = load_transitions(path, env.action_space())?;
    for t in &items {
        for s in [&t.s, &t.s_next, &t.g] {
            if !env.is_valid(s) {
                return Err(Error::InvalidState(s.0));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(TransitionStore::new(items))
}

fn stamp(cfg: &TrainConfig, phase: Phase, step: usize) -> Checkpoint {
    Checkpoint { phase, config_hash: cfg.hash(), seed: cfg.seed, step, repr: None, dynamics: None, policy: None }
}

fn save(ck: &Checkpoint, out: Option<&Path>, name: &str) -> Result<()> {
    if let Some(dir) = out {
        ck.save(&dir.join(name))?;
    }
    Ok(())
}

pub fn repr_phase(cfg: &TrainConfig, env: &MazeEnv, data: &TransitionStore, out: Option<&Path>) -> Result<Checkpoint> {
    let rcfg = cfg.repr_config();
    log::info!("repr: {} steps, hidden {:?}", rcfg.steps, rcfg.hidden);
    let (ae, history) = train_repr(env, data, &rcfg, derive_seed(cfg.seed, SEED_REPR))?;
    if let Some(dir) = out {
        let mut w = create(dir, "repr_losses.csv")?;
        writeln!(w, "step,rec,traj,tran,total")?;
        for (i, l) in history.iter().enumerate() {
            if i % cfg.log_every == 0 || i + 1 == history.len() {
                writeln!(w, "{i},{},{},{},{}", l.rec, l.traj, l.tran, l.total)?;
            }
        }
        w.flush()?;
    }
    let ck = Checkpoint { repr: Some(ae), ..stamp(cfg, Phase::Repr, rcfg.steps) };
    save(&ck, out, REPR_CKPT)?;
    Ok(ck)
}

pub fn dynamics_phase(cfg: &TrainConfig, env: &MazeEnv, data: &TransitionStore, repr: &Checkpoint, out: Option<&Path>) -> Result<Checkpoint> {
    let ae = repr.repr()?;
    let dcfg = cfg.dynamics_config();
    let space = registry::augmenters().get(&cfg.strategies.augmenter)?.space;
    log::info!("dynamics: {} steps in {space:?} space", dcfg.steps);
    let pairs = match space {
        ModelSpace::Latent => latent_pairs(ae, data, env.action_space())?,
        ModelSpace::State => state_pairs(data, env.scale(), env.action_space())?,
    };
    let (model, history) = train_dynamics(&pairs, env.action_space(), &dcfg, derive_seed(cfg.seed, SEED_DYNAMICS))?;
    if let Some(dir) = out {
        let mut w = create(dir, "dynamics_losses.csv")?;
        writeln!(w, "step,nll")?;
        for (i, l) in history.iter().enumerate() {
            if i % cfg.log_every == 0 || i + 1 == history.len() {
                writeln!(w, "{i},{l}")?;
            }
        }
        w.flush()?;
    }
    let ck = Checkpoint {
        repr: Some(ae.clone()),
        dynamics: Some(DynamicsPart { space, model }),
        ..stamp(cfg, Phase::Dynamics, dcfg.steps)
    };
    save(&ck, out, DYNAMICS_CKPT)?;
    Ok(ck)
}

#[derive(Debug, Clone)]
pub struct PolicyOutcome {
    pub checkpoint: Checkpoint,
    pub refreshes: Vec<RolloutStats>,
    /// `(step, mean success)` every evaluation interval.
    pub curve: Vec<(usize, f64)>,
    pub history: Vec<PolicyStepStats>,
}

impl PolicyOutcome {
    pub fn mean_wall_leakage(&self) -> f64 {
        let n: usize = self.refreshes.iter().map(|r| r.count).sum();
        if n == 0 {
            return 0.0;
        }
        self.refreshes.iter().map(|r| r.wall_leakage * r.count as f64).sum::<f64>() / n as f64
    }
}

pub fn policy_phase(cfg: &TrainConfig, env: &MazeEnv, data: &TransitionStore, dynamics: &Checkpoint, out: Option<&Path>) -> Result<PolicyOutcome> {
    let ae = dynamics.repr()?;
    let dyn_part = dynamics.dynamics()?;
    let augmenters = registry::augmenters();
    let entry = augmenters.get(&cfg.strategies.augmenter)?;
    if entry.space != dyn_part.space {
        return Err(Error::MissingPrerequisite(format!(
            "augmenter {} needs {:?}-space dynamics, checkpoint has {:?}",
            cfg.strategies.augmenter, entry.space, dyn_part.space
        )));
    }
    let augmenter = (entry.build)(ae.clone(), dyn_part.model.clone(), env.scale());
    let rollouts_on = augmenter.name() != "none";

    let pcfg = cfg.policy_config();
    let total = pcfg.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_POLICY));
    let net = PolicyNet::new(ae.features, ae.latent_dim(), env.action_space(), &pcfg, &mut rng);
    let mut learner = (registry::learners().get(&cfg.strategies.learner)?)(net, pcfg.clone(), &mut rng);
    log::info!("policy: {total} steps, learner {}, augmenter {}", learner.name(), augmenter.name());

    let schedule = RolloutSchedule::new(total, &cfg.rollout);
    let mut buffer = SyntheticBuffer::new(cfg.rollout.buffer_capacity(data.len()));
    let goals = cfg.eval.goal_states(env)?;
    let curve_every = ((total as f64 * cfg.eval.curve_every_fraction).ceil() as usize).max(1);

    let mut losses = match out {
        Some(dir) => {
            let mut w = create(dir, "policy_losses.csv")?;
            writeln!(w, "step,actor_loss,q_loss,v_loss,mean_advantage,synthetic_in_batch")?;
            Some(w)
        }
        None => None,
    };
    let mut rollout_log = match out {
        Some(dir) if rollouts_on => Some(create(dir, ROLLOUT_LOG)?),
        _ => None,
    };

    let mut refreshes = Vec::new();
    let mut curve = Vec::new();
    let mut history = Vec::with_capacity(total);
    for step in 0..=total {
        if rollouts_on && schedule.action(step) == ScheduleAction::Refresh {
            let ctx = RolloutContext { env, data, ae, policy: learner.policy(), cfg: &cfg.rollout };
            let seed = derive_seed(derive_seed(cfg.seed, SEED_ROLLOUT), refreshes.len());
            let stats = refresh(augmenter.as_ref(), &ctx, &mut buffer, refreshes.len(), step, seed)?;
            log::info!("refresh {} at step {step}: {} transitions, wall leakage {:.3}", stats.refresh, stats.count, stats.wall_leakage);
            if let Some(w) = rollout_log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&stats)?)?;
            }
            refreshes.push(stats);
        }
        if cfg.eval.curve_episodes > 0 && (step % curve_every == 0 || step == total) {
            let policy = LearnedPolicy { ae, net: learner.policy() };
            let r = evaluate(&policy, env, &goals, cfg.eval.curve_episodes, cfg.eval.horizon, derive_seed(cfg.seed, SEED_CURVE))?;
            log::info!("step {step}/{total}: success {:.3}", r.mean_success);
            curve.push((step, r.mean_success));
        }
        if step == total {
            break;
        }
        let sigma = if buffer.is_empty() { 0.0 } else { cfg.rollout.sigma };
        let batch = sample_batch(data, &buffer, pcfg.batch_size, sigma, &mut rng)?;
        let stats = learner.update(ae, &batch)?;
        if let Some(w) = losses.as_mut() {
            if step % cfg.log_every == 0 || step + 1 == total {
                let n_syn = batch.iter().filter(|t| t.source == crate::dataset::Source::Synthetic).count();
                writeln!(w, "{step},{},{},{},{},{n_syn}", stats.actor_loss, stats.q_loss, stats.v_loss, stats.mean_advantage)?;
            }
        }
        history.push(stats);
    }
    if let Some(w) = losses.as_mut() {
        w.flush()?;
    }
    if let Some(w) = rollout_log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out {
        let mut w = create(dir, "eval_curve.csv")?;
        writeln!(w, "step,mean_success")?;
        for (s, m) in &curve {
            writeln!(w, "{s},{m}")?;
        }
        w.flush()?;
    }

    let critics = learner.networks().into_iter().skip(1).map(|(n, m)| (n.to_string(), m.clone())).collect();
    let checkpoint = Checkpoint {
        repr: Some(ae.clone()),
        dynamics: Some(dyn_part.clone()),
        policy: Some(PolicyPart { learner: learner.name().to_string(), net: learner.policy().clone(), critics }),
        ..stamp(cfg, Phase::Policy, total)
    };
    save(&checkpoint, out, POLICY_CKPT)?;
    Ok(PolicyOutcome { checkpoint, refreshes, curve, history })
}

/// Which phases `train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSelection {
    All,
    Only(Phase),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub n_transitions: usize,
    /// `(file, sha256)` for every checkpoint written by this run.
    pub checkpoints: Vec<(String, String)>,
    pub refreshes: usize,
    pub final_success: Option<f64>,
}

fn load_prerequisite(dir: &Path, name: &str, needed_by: &str) -> Result<Checkpoint> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{needed_by} phase needs {} (run the earlier phases first)", path.display())));
    }
    Checkpoint::load(&path)
}

/// Runs the selected phases, writing every artifact into `out`.
pub fn train(cfg: &TrainConfig, out: &Path, phases: PhaseSelection) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let env = cfg.env.build()?;
    let data = load_data(cfg, &env)?;
    let run = |p: Phase| phases == PhaseSelection::All || phases == PhaseSelection::Only(p);

    let mut written = Vec::new();
    let repr = if run(Phase::Repr) {
        written.push(REPR_CKPT);
        repr_phase(cfg, &env, &data, Some(out))?
    } else {
        load_prerequisite(out, REPR_CKPT, "dynamics and policy")?
    };
    let dynamics = if run(Phase::Dynamics) {
        written.push(DYNAMICS_CKPT);
        Some(dynamics_phase(cfg, &env, &data, &repr, Some(out))?)
    } else if run(Phase::Policy) {
        Some(load_prerequisite(out, DYNAMICS_CKPT, "policy")?)
    } else {
        None
    };
    let mut refreshes = 0;
    let mut final_success = None;
    if run(Phase::Policy) {
        let outcome = policy_phase(cfg, &env, &data, dynamics.as_ref().expect("loaded above"), Some(out))?;
        written.push(POLICY_CKPT);
        refreshes = outcome.refreshes.len();
        final_success = outcome.curve.last().map(|c| c.1);
    }
    let checkpoints = written
        .iter()
        .map(|name| Ok((name.to_string(), sha256_file(&out.join(name))?)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest { config_hash: cfg.hash(), seed: cfg.seed, n_transitions: data.len(), checkpoints, refreshes, final_success };
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// The JSON document produced by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub format_version: u32,
    pub checkpoint_sha256: String,
    pub goals: Vec<[f64; 2]>,
    pub summary: EvalSummary,
}

/// Evaluates the checkpoint's policy once per configured seed.
pub fn evaluate_checkpoint(cfg: &TrainConfig, ck: &Checkpoint, goals: Option<Vec<State>>) -> Result<EvalDocument> {
    let env = cfg.env.build()?;
    let ae = ck.repr()?;
    let policy = ck.policy()?;
    let goals = match goals {
        Some(g) => {
            if let Some(bad) = g.iter().find(|s| !env.is_valid(s)) {
                return Err(Error::InvalidState(bad.0));
            }
            g
        }
        None => cfg.eval.goal_states(&env)?,
    };
    let learned = LearnedPolicy { ae, net: &policy.net };
    let reports = cfg
        .eval
        .seeds
        .iter()
        .map(|&s| evaluate(&learned, &env, &goals, cfg.eval.episodes, cfg.eval.horizon, s))
        .collect::<Result<Vec<EvalReport>>>()?;
    Ok(EvalDocument {
        format_version: 1,
        checkpoint_sha256: ck.sha256(),
        goals: goals.iter().map(|g| g.0).collect(),
        summary: EvalSummary::new(ck.config_hash.clone(), reports),
    })
}

/// The free cell nearest to each corner of the maze, in the order
/// top-left, top-right, bottom-left, bottom-right.
pub fn corner_goals(env: &MazeEnv) -> Vec<State> {
    let l = env.layout();
    let (w, h) = (l.width as i64 - 1, l.height as i64 - 1);
    let free = l.free_cells();
    [[0, 0], [w, 0], [0, h], [w, h]]
        .iter()
        .map(|c| {
            let best = free
                .iter()
                .min_by_key(|f| (f[0] as i64 - c[0]).abs() + (f[1] as i64 - c[1]).abs())
                .expect("maze has free cells");
            State::from_cell(*best)
        })
        .collect()
}

/// Writes one `x,y,d` CSV per goal into `out` (a file for one goal, a
/// directory for several). Returns the written paths.
pub fn heatmaps(ae: &Autoencoder, env: &MazeEnv, goals: &[State], out: &Path) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = if goals.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        std::fs::create_dir_all(out)?;
        goals.iter().map(|g| out.join(format!("heatmap_{}_{}.csv", g.0[0], g.0[1]))).collect()
    };
    for (g, p) in goals.iter().zip(&paths) {
        let mut w = BufWriter::new(File::create(p)?);
        write_heatmap_csv(ae, env, g, &mut w)?;
        w.flush()?;
    }
    Ok(paths)
}
