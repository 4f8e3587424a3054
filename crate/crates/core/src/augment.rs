//! Scheduled model rollouts: short policy-driven rollouts through a learned
//! dynamics model, decoded back to states and tagged as synthetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Source, SyntheticBuffer, Transition, TransitionStore};
use crate::dynamics::DynamicsModel;
use crate::env::{derive_seed, EnvKind, MazeEnv, State};
use crate::error::{Error, Result};
use crate::policy::PolicyNet;
use crate::repr::{latent_distance, Autoencoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub k_steps: usize,
    /// Fraction of policy training with no rollouts.
    pub warmup_fraction: f64,
    pub refresh_every_fraction: f64,
    /// Each refresh generates this fraction of `|D|` transitions.
    pub refresh_size_fraction: f64,
    /// Share of each policy batch drawn from the synthetic buffer.
    pub sigma: f64,
    pub action_noise_std: f64,
    /// Synthetic buffer capacity as a multiple of `|D|`.
    pub buffer_cap_multiplier: f64,
    /// Sample `z' ~ N(mu, std)` instead of taking the predictive mean.
    pub sample_dynamics: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k_steps: 3,
            warmup_fraction: 0.3,
            refresh_every_fraction: 0.1,
            refresh_size_fraction: 0.5,
            sigma: 0.25,
            action_noise_std: 0.1,
            buffer_cap_multiplier: 2.0,
            sample_dynamics: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k_steps == 0 {
            return bad("k_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.refresh_every_fraction > 0.0) {
            return bad("refresh_every_fraction must be positive".into());
        }
        // sigma = 0 is the no-rollout ablation, so it is allowed here.
        if !(0.0..1.0).contains(&self.sigma) {
            return bad(format!("sigma {} outside [0, 1)", self.sigma));
        }
        if !(self.refresh_size_fraction >= 0.0) || !(self.action_noise_std >= 0.0) || !(self.buffer_cap_multiplier >= 0.0) {
            return bad("refresh size, noise and buffer multiplier must be non-negative".into());
        }
        Ok(())
    }

    pub fn refresh_size(&self, data_len: usize) -> usize {
        (self.refresh_size_fraction * data_len as f64).round() as usize
    }

    pub fn buffer_capacity(&self, data_len: usize) -> usize {
        (self.buffer_cap_multiplier * data_len as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleAction {
    None,
    Refresh,
}

/// Refresh steps `ceil((warmup + j * every) * total)` for every `j` with
/// `warmup + j * every <= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutSchedule {
    steps: Vec<usize>,
}

impl RolloutSchedule {
    pub fn new(total_steps: usize, cfg: &RolloutConfig) -> Self {
        // Fractions like 0.3 + 0.1 * 4 are not exact in binary; a small slack
        // keeps 0.7 * 10 at 7 rather than 8.
        const SLACK: f64 = 1e-9;
        let mut steps = Vec::new();
        for j in 0.. {
            let frac = cfg.warmup_fraction + j as f64 * cfg.refresh_every_fraction;
            if frac > 1.0 + SLACK {
                break;
            }
            let step = ((frac * total_steps as f64) - SLACK).ceil().max(0.0) as usize;
            if steps.last() != Some(&step) {
                steps.push(step.min(total_steps));
            }
        }
        Self { steps }
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn action(&self, step: usize) -> ScheduleAction {
        if self.steps.binary_search(&step).is_ok() {
            ScheduleAction::Refresh
        } else {
            ScheduleAction::None
        }
    }
}

/// Per-refresh statistics, one JSON line each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub refresh: usize,
    pub step: usize,
    pub count: usize,
    pub requested: usize,
    /// Fraction of decoded next states inside a wall or outside the maze.
    pub wall_leakage: f64,
    /// Mean norm of one model step in the model's own space.
    pub mean_step_norm: f64,
    pub truncated: usize,
    pub buffer_len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub step_norms: Vec<f64>,
    pub truncated: usize,
}

/// Read-only inputs shared by every augmenter.
pub struct RolloutContext<'a> {
    pub env: &'a MazeEnv,
    pub data: &'a TransitionStore,
    pub ae: &'a Autoencoder,
    pub policy: &'a PolicyNet,
    pub cfg: &'a RolloutConfig,
}

/// A source of synthetic transitions.
pub trait Augmenter {
    fn name(&self) -> &'static str;
    /// Up to `n_starts * k_steps` transitions from starts drawn uniformly
    /// from the real data.
    fn rollout(&self, ctx: &RolloutContext<'_>, n_starts: usize, seed: u64) -> Result<RolloutBatch>;
}

/// Disabled augmentation.
pub struct NoAugmentation;

impl Augmenter for NoAugmentation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn rollout(&self, _ctx: &RolloutContext<'_>, _n_starts: usize, _seed: u64) -> Result<RolloutBatch> {
        Ok(RolloutBatch::default())
    }
}

/// Moves a decoded state onto the environment's state space: grid mazes only
/// have integer states.
pub fn project(env: &MazeEnv, s: State) -> State {
    match env.kind() {
        EnvKind::Grid => State([s.0[0].round(), s.0[1].round()]),
        EnvKind::Point { .. } => s,
    }
}

/// How a model space maps to and from states.
trait ModelSpace {
    fn model(&self) -> &DynamicsModel;
    fn lift(&self, s: &State) -> Vec<f64>;
    fn lower(&self, z: &[f64]) -> Result<State>;
}

fn run_rollouts(space: &dyn ModelSpace, ctx: &RolloutContext<'_>, n_starts: usize, seed: u64) -> Result<RolloutBatch> {
    if ctx.data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = ctx.cfg.k_steps;
    let model = space.model();
    let mut out = RolloutBatch { transitions: Vec::with_capacity(n_starts * k), ..Default::default() };
    for i in 0..n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
        let origin = rng.gen_range(0..ctx.data.len());
        let start = ctx.data.get(origin);
        let zg = ctx.ae.encode(&start.g);
        let mut s = start.s;
        let mut z = space.lift(&s);
        for depth in 1..=k {
            let x = ctx.policy.input_from_latent(&s, &ctx.ae.encode(&s), &zg);
            let a = ctx.policy.noisy_action(&x, ctx.cfg.action_noise_std, &mut rng)?;
            let (mean, std) = model.predict(&z, &a)?;
            let z_next: Vec<f64> = if ctx.cfg.sample_dynamics {
                mean.iter().zip(&std).map(|(m, sd)| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()
            } else {
                mean
            };
            if z_next.iter().any(|v| !v.is_finite()) {
                out.truncated += 1;
                break;
            }
            let s_next = project(ctx.env, space.lower(&z_next)?);
            if s_next.0.iter().any(|v| !v.is_finite()) {
                out.truncated += 1;
                break;
            }
            out.step_norms.push(latent_distance(&z, &z_next));
            out.transitions.push(Transition {
                s,
                a,
                s_next,
                g: start.g,
                terminal: ctx.env.reached(&s_next, &start.g),
                source: Source::Synthetic,
                traj_id: start.traj_id,
                t: start.t,
                origin,
                depth,
            });
            s = s_next;
            z = z_next;
        }
    }
    Ok(out)
}

/// Rollouts in the learned latent space, decoded by the autoencoder.
pub struct LatentRollout {
    pub ae: Autoencoder,
    pub dynamics: DynamicsModel,
}

impl ModelSpace for LatentRollout {
    fn model(&self) -> &DynamicsModel {
        &self.dynamics
    }

    fn lift(&self, s: &State) -> Vec<f64> {
        self.ae.encode(s)
    }

    fn lower(&self, z: &[f64]) -> Result<State> {
        self.ae.decode(z)
    }
}

impl Augmenter for LatentRollout {
    fn name(&self) -> &'static str {
        "latent"
    }

    fn rollout(&self, ctx: &RolloutContext<'_>, n_starts: usize, seed: u64) -> Result<RolloutBatch> {
        run_rollouts(self, ctx, n_starts, seed)
    }
}

/// Baseline: dynamics fitted on scaled raw coordinates, "decoded" by undoing
/// the scaling.
pub struct NaiveStateRollout {
    pub scale: f64,
    pub dynamics: DynamicsModel,
}

impl ModelSpace for NaiveStateRollout {
    fn model(&self) -> &DynamicsModel {
        &self.dynamics
    }

    fn lift(&self, s: &State) -> Vec<f64> {
        vec![s.0[0] / self.scale, s.0[1] / self.scale]
    }

    fn lower(&self, z: &[f64]) -> Result<State> {
        match z {
            [x, y] => Ok(State([x * self.scale, y * self.scale])),
            _ => Err(Error::DimensionMismatch { expected: 2, got: z.len() }),
        }
    }
}

impl Augmenter for NaiveStateRollout {
    fn name(&self) -> &'static str {
        "naive-state"
    }

    fn rollout(&self, ctx: &RolloutContext<'_>, n_starts: usize, seed: u64) -> Result<RolloutBatch> {
        run_rollouts(self, ctx, n_starts, seed)
    }
}

/// Fraction of decoded next states that land in a wall or off the maze.
pub fn wall_leakage(env: &MazeEnv, items: &[Transition]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().filter(|t| env.in_wall(&t.s_next)).count() as f64 / items.len() as f64
}

/// Generates one refresh worth of synthetic data (`round(fraction * |D|)`
/// transitions, fewer only after NaN truncation) and appends it to `buffer`.
pub fn refresh(
    augmenter: &dyn Augmenter,
    ctx: &RolloutContext<'_>,
    buffer: &mut SyntheticBuffer,
    refresh_index: usize,
    step: usize,
    seed: u64,
) -> Result<RolloutStats> {
    let requested = ctx.cfg.refresh_size(ctx.data.len());
    let n_starts = requested.div_ceil(ctx.cfg.k_steps);
    let mut batch = augmenter.rollout(ctx, n_starts, seed)?;
    batch.transitions.truncate(requested);
    batch.step_norms.truncate(requested);
    let stats = RolloutStats {
        refresh: refresh_index,
        step,
        count: batch.transitions.len(),
        requested,
        wall_leakage: wall_leakage(ctx.env, &batch.transitions),
        mean_step_norm: if batch.step_norms.is_empty() {
            0.0
        } else {
            batch.step_norms.iter().sum::<f64>() / batch.step_norms.len() as f64
        },
        truncated: batch.truncated,
        buffer_len: 0,
    };
    buffer.extend(batch.transitions)?;
    Ok(RolloutStats { buffer_len: buffer.len(), ..stats })
}

/// Checks that every synthetic transition traces back to a real one within
/// `k` steps and carries that transition's goal.
pub fn check_provenance(data: &TransitionStore, synthetic: &[Transition], k: usize) -> Result<()> {
    for (i, t) in synthetic.iter().enumerate() {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("synthetic transition {i}: {m}")));
        if t.source != Source::Synthetic {
            return fail("not tagged synthetic");
        }
        if t.origin >= data.len() {
            return fail("origin outside the real data");
        }
        let o = data.get(t.origin);
        if o.source != Source::Real {
            return fail("origin is not real");
        }
        if !(1..=k).contains(&t.depth) {
            return fail("depth outside 1..=k");
        }
        if o.g != t.g {
            return fail("goal differs from its origin");
        }
    }
    Ok(())
}
