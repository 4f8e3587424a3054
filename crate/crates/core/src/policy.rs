//! Policy extraction from latent distances: intrinsic reward, skill vectors,
//! advantage-weighted regression, the optional Q/V critic, and evaluation.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Transition;
use crate::env::{derive_seed, Action, ActionSpace, Cell, GridAction, MazeEnv, State};
use crate::error::{Error, Result};
use crate::nn::{polyak_update, Activation, Adam, Mlp};
use crate::oracle::bfs_from;
use crate::repr::{expectile_loss, Autoencoder, FeatureMap};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

/// Orientation of the intrinsic reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSign {
    /// `d(f(s), f(g)) - d(f(s'), f(g))`: moving closer earns reward.
    Progress,
    /// `d(f(s'), f(g)) - d(f(s), f(g))`.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub beta: f64,
    pub gamma_rl: f64,
    pub expectile_rl: f64,
    pub reward_sign: RewardSign,
    pub exp_clip: f64,
    /// Divide AWR weights by their batch mean.
    pub normalize_weights: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub target_rho: f64,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            gamma_rl: 0.99,
            expectile_rl: 0.9,
            reward_sign: RewardSign::Progress,
            exp_clip: 100.0,
            normalize_weights: false,
            hidden: vec![128, 128, 128],
            activation: Activation::Gelu,
            lr: 3e-4,
            batch_size: 256,
            steps: 20_000,
            target_rho: 5e-3,
            init_log_std: 0.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.gamma_rl > 0.0 && self.gamma_rl < 1.0) {
            return bad(format!("gamma_rl {} outside (0, 1)", self.gamma_rl));
        }
        if !(0.5..1.0).contains(&self.expectile_rl) {
            return bad(format!("expectile_rl {} outside [0.5, 1)", self.expectile_rl));
        }
        if !(self.exp_clip > 0.0) || self.batch_size == 0 || self.lr <= 0.0 || self.hidden.contains(&0) {
            return bad("exp_clip, batch_size, lr and widths must be positive".into());
        }
        Ok(())
    }
}

/// `r~(s, s')` for one transition.
pub fn intrinsic_reward(ae: &Autoencoder, s: &State, s_next: &State, g: &State, sign: RewardSign) -> f64 {
    let zg = ae.encode(g);
    let d = crate::repr::latent_distance(&ae.encode(s), &zg);
    let dn = crate::repr::latent_distance(&ae.encode(s_next), &zg);
    match sign {
        RewardSign::Progress => d - dn,
        RewardSign::AsPrinted => dn - d,
    }
}

/// Unit latent direction from `z` toward `z_goal`.
pub fn skill_vector(z: &[f64], z_goal: &[f64]) -> Result<Vec<f64>> {
    let diff: Vec<f64> = z_goal.iter().zip(z).map(|(g, s)| g - s).collect();
    let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::ZeroDirection);
    }
    Ok(diff.into_iter().map(|v| v / n).collect())
}

/// `min(exp(beta * A), clip)`, optionally divided by the batch mean.
pub fn awr_weights(adv: &[f64], beta: f64, clip: f64, normalize: bool) -> Vec<f64> {
    let mut w: Vec<f64> = adv.iter().map(|a| (beta * a).exp().min(clip)).collect();
    if normalize && !w.is_empty() {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        if mean > 0.0 {
            w.iter_mut().for_each(|x| *x /= mean);
        }
    }
    w
}

/// Everything the policy losses need about a batch, computed through the
/// frozen encoder.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    /// `features(s) ++ w(s, g)`.
    pub x: Array2<f64>,
    /// `features(s') ++ w(s', g)`.
    pub x_next: Array2<f64>,
    pub actions: Vec<Action>,
    pub a_enc: Array2<f64>,
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
}

/// Concatenates state features with skill vectors toward each goal. Rows whose
/// state already sits on the goal in latent space get a zero skill.
fn skill_inputs(features: &FeatureMap, states: &[State], z: ArrayView2<'_, f64>, zg: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let feat = features.apply(states.iter().copied());
    let mut w = &zg - &z;
    let mut dist = Vec::with_capacity(states.len());
    for mut row in w.rows_mut() {
        let n = row.dot(&row).sqrt();
        dist.push(n);
        if n < 1e-12 {
            row.fill(0.0);
        } else {
            row /= n;
        }
    }
    (concatenate(Axis(1), &[feat.view(), w.view()]).unwrap(), dist)
}

impl PolicyBatch {
    pub fn new(ae: &Autoencoder, space: ActionSpace, items: &[Transition], sign: RewardSign) -> Result<Self> {
        let s: Vec<State> = items.iter().map(|t| t.s).collect();
        let sn: Vec<State> = items.iter().map(|t| t.s_next).collect();
        let g: Vec<State> = items.iter().map(|t| t.g).collect();
        let (z, zn, zg) = (ae.encode_many(&s), ae.encode_many(&sn), ae.encode_many(&g));
        let (x, d) = skill_inputs(&ae.features, &s, z.view(), zg.view());
        let (x_next, dn) = skill_inputs(&ae.features, &sn, zn.view(), zg.view());
        let reward = d
            .iter()
            .zip(&dn)
            .map(|(a, b)| match sign {
                RewardSign::Progress => a - b,
                RewardSign::AsPrinted => b - a,
            })
            .collect();
        let mut a_enc = Array2::zeros((items.len(), space.encoding_dim()));
        for (i, t) in items.iter().enumerate() {
            space.encode_into(&t.a, a_enc.row_mut(i).as_slice_mut().unwrap())?;
        }
        Ok(Self {
            x,
            x_next,
            actions: items.iter().map(|t| t.a).collect(),
            a_enc,
            reward,
            terminal: items.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Goal-conditioned actor: categorical over grid moves, or a Gaussian with a
/// state-dependent mean and one learned log-std per action dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub net: Mlp,
    pub log_std: Vec<f64>,
    pub space: ActionSpace,
    pub features: FeatureMap,
    pub latent_dim: usize,
}

impl PolicyNet {
    pub fn new(features: FeatureMap, latent_dim: usize, space: ActionSpace, cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let dims: Vec<usize> = std::iter::once(features.dim() + latent_dim)
            .chain(cfg.hidden.iter().copied())
            .chain([space.encoding_dim()])
            .collect();
        let log_std = match space {
            ActionSpace::Discrete => vec![],
            ActionSpace::Continuous => vec![cfg.init_log_std; 2],
        };
        Self { net: Mlp::new(&dims, cfg.activation, rng), log_std, space, features, latent_dim }
    }

    /// Number of trainable parameters (network plus log-std).
    pub fn param_count(&self) -> usize {
        self.net.weights().len() + self.log_std.len()
    }

    /// Weighted negative log-likelihood `-(1/B) sum_i w_i log pi(a_i | x_i)`
    /// with gradients for the network and the log-std vector.
    pub fn weighted_nll_and_grad(&self, x: ArrayView2<'_, f64>, actions: &[Action], weights: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let n = x.nrows() as f64;
        let space = self.space;
        let log_std: Vec<f64> = self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let mut g_log_std = vec![0.0; self.log_std.len()];
        let mut err = None;
        let (loss, g_net) = self.net.value_and_grad(x, |out| {
            let mut dout = Array2::zeros(out.raw_dim());
            let mut loss = 0.0;
            for i in 0..out.nrows() {
                let w = weights[i];
                match (space, actions[i]) {
                    (ActionSpace::Discrete, Action::Grid(a)) => {
                        let row = out.row(i);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let lse = max + z.ln();
                        loss -= w * (row[a.index()] - lse) / n;
                        for k in 0..row.len() {
                            let p = (row[k] - lse).exp();
                            let y = if k == a.index() { 1.0 } else { 0.0 };
                            dout[[i, k]] = w * (p - y) / n;
                        }
                    }
                    (ActionSpace::Continuous, Action::Point(a)) => {
                        for k in 0..2 {
                            let inv_var = (-2.0 * log_std[k]).exp();
                            let diff = a[k] - out[[i, k]];
                            let lp = -0.5 * diff * diff * inv_var - log_std[k] - 0.5 * LOG_2PI;
                            loss -= w * lp / n;
                            dout[[i, k]] = -w * diff * inv_var / n;
                            g_log_std[k] += w * (1.0 - diff * diff * inv_var) / n;
                        }
                    }
                    (_, a) => err = Some(Error::InvalidAction(format!("{a:?} for {space:?}"))),
                }
            }
            (loss, dout)
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        for (g, l) in g_log_std.iter_mut().zip(&self.log_std) {
            if !(LOG_STD_MIN..=LOG_STD_MAX).contains(l) {
                *g = 0.0;
            }
        }
        Ok((loss, g_net, g_log_std))
    }

    /// Most likely action for each row.
    pub fn mode_many(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Action>> {
        let out = self.net.forward(x)?;
        Ok(out.rows().into_iter().map(|r| self.row_mode(r.as_slice().unwrap())).collect())
    }

    fn row_mode(&self, out: &[f64]) -> Action {
        match self.space {
            ActionSpace::Discrete => {
                let best = out.iter().enumerate().fold(0, |b, (k, v)| if *v > out[b] { k } else { b });
                Action::Grid(GridAction::from_index(best).unwrap())
            }
            ActionSpace::Continuous => Action::Point([out[0].clamp(-1.0, 1.0), out[1].clamp(-1.0, 1.0)]),
        }
    }

    /// Mode plus Gaussian perturbation of std `noise` (on logits for grid
    /// moves, on the mean for continuous actions).
    pub fn noisy_action(&self, x: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Result<Action> {
        let mut out = self.net.forward_one(x)?;
        if noise > 0.0 {
            let n = Normal::new(0.0, noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            out.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        Ok(self.row_mode(&out))
    }

    /// Policy input for a single `(s, g)` pair through the encoder.
    pub fn input(&self, ae: &Autoencoder, s: &State, g: &State) -> Vec<f64> {
        let z = ae.encode(s);
        let zg = ae.encode(g);
        self.input_from_latent(s, &z, &zg)
    }

    pub fn input_from_latent(&self, s: &State, z: &[f64], zg: &[f64]) -> Vec<f64> {
        let mut x = self.features.apply(std::iter::once(*s)).into_raw_vec_and_offset().0;
        match skill_vector(z, zg) {
            Ok(w) => x.extend(w),
            Err(_) => x.extend(std::iter::repeat_n(0.0, z.len())),
        }
        x
    }
}

/// Mean squared TD error `(1/B) sum (Q(x, a) - y)^2` and its gradient.
pub fn td_loss_and_grad(q: &Mlp, xa: ArrayView2<'_, f64>, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = xa.nrows() as f64;
    q.value_and_grad(xa, |out| {
        let mut dout = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..out.nrows() {
            let e = out[[i, 0]] - targets[i];
            loss += e * e / n;
            dout[[i, 0]] = 2.0 * e / n;
        }
        (loss, dout)
    })
}

/// Expectile regression of `V(x)` onto fixed `targets` (upper expectile for
/// `tau > 0.5`).
pub fn value_expectile_loss_and_grad(v: &Mlp, x: ArrayView2<'_, f64>, targets: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows() as f64;
    v.value_and_grad(x, |out| {
        let mut dout = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..out.nrows() {
            let (l, dl) = expectile_loss(targets[i] - out[[i, 0]], tau);
            loss += l / n;
            dout[[i, 0]] = -dl / n;
        }
        (loss, dout)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyStepStats {
    pub actor_loss: f64,
    pub q_loss: f64,
    pub v_loss: f64,
    pub mean_advantage: f64,
}

/// A policy-extraction algorithm updated one batch at a time.
pub trait PolicyLearner {
    fn name(&self) -> &'static str;
    fn update(&mut self, ae: &Autoencoder, batch: &[Transition]) -> Result<PolicyStepStats>;
    fn policy(&self) -> &PolicyNet;
    /// Named networks for checkpointing.
    fn networks(&self) -> Vec<(&'static str, &Mlp)>;
}

fn actor_step(
    policy: &mut PolicyNet,
    opt: &mut Adam,
    opt_std: &mut Adam,
    pb: &PolicyBatch,
    adv: &[f64],
    cfg: &PolicyConfig,
) -> Result<f64> {
    let w = awr_weights(adv, cfg.beta, cfg.exp_clip, cfg.normalize_weights);
    let (loss, g, g_std) = policy.weighted_nll_and_grad(pb.x.view(), &pb.actions, &w)?;
    if !loss.is_finite() {
        return Err(Error::non_finite("policy", format!("actor loss {loss}")));
    }
    opt.step(policy.net.weights_mut(), &g).map_err(|_| Error::non_finite("policy", "actor gradient"))?;
    if !policy.log_std.is_empty() {
        opt_std.step(&mut policy.log_std, &g_std).map_err(|_| Error::non_finite("policy", "log-std gradient"))?;
    }
    Ok(loss)
}

/// AWR with the intrinsic reward itself as the advantage.
pub struct WeightedSl {
    pub cfg: PolicyConfig,
    policy: PolicyNet,
    opt: Adam,
    opt_std: Adam,
}

impl WeightedSl {
    pub fn new(policy: PolicyNet, cfg: PolicyConfig) -> Self {
        let opt = Adam::for_net(&policy.net, cfg.lr);
        let opt_std = Adam::new(policy.log_std.len(), cfg.lr);
        Self { cfg, policy, opt, opt_std }
    }
}

impl PolicyLearner for WeightedSl {
    fn name(&self) -> &'static str {
        "weighted-sl"
    }

    fn update(&mut self, ae: &Autoencoder, batch: &[Transition]) -> Result<PolicyStepStats> {
        let pb = PolicyBatch::new(ae, self.policy.space, batch, self.cfg.reward_sign)?;
        let loss = actor_step(&mut self.policy, &mut self.opt, &mut self.opt_std, &pb, &pb.reward, &self.cfg)?;
        let mean_advantage = pb.reward.iter().sum::<f64>() / pb.len() as f64;
        Ok(PolicyStepStats { actor_loss: loss, mean_advantage, ..Default::default() })
    }

    fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        vec![("policy", &self.policy.net)]
    }
}

/// AWR with `A = Q(s, a) - V(s)`: Q by TD on the intrinsic reward with a
/// Polyak target and the policy's own next action, V by expectile regression
/// on the target Q.
pub struct ActorCritic {
    pub cfg: PolicyConfig,
    policy: PolicyNet,
    opt: Adam,
    opt_std: Adam,
    pub q: Mlp,
    pub q_target: Mlp,
    pub v: Mlp,
    opt_q: Adam,
    opt_v: Adam,
}

impl ActorCritic {
    pub fn new(policy: PolicyNet, cfg: PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let x_dim = policy.net.input_dim();
        let a_dim = policy.space.encoding_dim();
        let q_dims: Vec<usize> = std::iter::once(x_dim + a_dim).chain(cfg.hidden.iter().copied()).chain([1]).collect();
        let v_dims: Vec<usize> = std::iter::once(x_dim).chain(cfg.hidden.iter().copied()).chain([1]).collect();
        let q = Mlp::new(&q_dims, cfg.activation, rng);
        let v = Mlp::new(&v_dims, cfg.activation, rng);
        Self {
            opt: Adam::for_net(&policy.net, cfg.lr),
            opt_std: Adam::new(policy.log_std.len(), cfg.lr),
            opt_q: Adam::for_net(&q, cfg.lr),
            opt_v: Adam::for_net(&v, cfg.lr),
            q_target: q.clone(),
            q,
            v,
            policy,
            cfg,
        }
    }
}

impl PolicyLearner for ActorCritic {
    fn name(&self) -> &'static str {
        "actor-critic"
    }

    fn update(&mut self, ae: &Autoencoder, batch: &[Transition]) -> Result<PolicyStepStats> {
        let space = self.policy.space;
        let pb = PolicyBatch::new(ae, space, batch, self.cfg.reward_sign)?;
        let n = pb.len();

        let next_actions = self.policy.mode_many(pb.x_next.view())?;
        let mut next_enc = Array2::zeros((n, space.encoding_dim()));
        for (i, a) in next_actions.iter().enumerate() {
            space.encode_into(a, next_enc.row_mut(i).as_slice_mut().unwrap())?;
        }
        let xa_next = concatenate(Axis(1), &[pb.x_next.view(), next_enc.view()]).unwrap();
        let q_next = self.q_target.forward(xa_next.view())?;
        let targets: Vec<f64> = (0..n)
            .map(|i| pb.reward[i] + if pb.terminal[i] { 0.0 } else { self.cfg.gamma_rl * q_next[[i, 0]] })
            .collect();
        let xa = concatenate(Axis(1), &[pb.x.view(), pb.a_enc.view()]).unwrap();
        let (q_loss, gq) = td_loss_and_grad(&self.q, xa.view(), &targets)?;
        if !q_loss.is_finite() {
            return Err(Error::non_finite("policy", format!("Q loss {q_loss}")));
        }
        self.opt_q.step(self.q.weights_mut(), &gq).map_err(|_| Error::non_finite("policy", "Q gradient"))?;

        let q_data: Vec<f64> = self.q_target.forward(xa.view())?.column(0).to_vec();
        let (v_loss, gv) = value_expectile_loss_and_grad(&self.v, pb.x.view(), &q_data, self.cfg.expectile_rl)?;
        self.opt_v.step(self.v.weights_mut(), &gv).map_err(|_| Error::non_finite("policy", "V gradient"))?;

        let v_now = self.v.forward(pb.x.view())?;
        let adv: Vec<f64> = (0..n).map(|i| q_data[i] - v_now[[i, 0]]).collect();
        let actor_loss = actor_step(&mut self.policy, &mut self.opt, &mut self.opt_std, &pb, &adv, &self.cfg)?;
        polyak_update(&mut self.q_target, &self.q, self.cfg.target_rho)?;
        Ok(PolicyStepStats { actor_loss, q_loss, v_loss, mean_advantage: adv.iter().sum::<f64>() / n as f64 })
    }

    fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        vec![("policy", &self.policy.net), ("q", &self.q), ("q_target", &self.q_target), ("v", &self.v)]
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Anything that can pick an action toward a goal at evaluation time.
pub trait GoalPolicy {
    fn name(&self) -> &str;
    fn act(&self, env: &MazeEnv, s: &State, g: &State, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// The trained actor, conditioned on a skill vector recomputed every step.
pub struct LearnedPolicy<'a> {
    pub ae: &'a Autoencoder,
    pub net: &'a PolicyNet,
}

impl GoalPolicy for LearnedPolicy<'_> {
    fn name(&self) -> &str {
        "learned"
    }

    fn act(&self, env: &MazeEnv, s: &State, g: &State, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let z = self.ae.encode(s);
        let zg = self.ae.encode(g);
        if skill_vector(&z, &zg).is_err() {
            return Ok(stay(env.action_space()));
        }
        let x = self.net.input_from_latent(s, &z, &zg);
        self.net.noisy_action(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

fn stay(space: ActionSpace) -> Action {
    match space {
        ActionSpace::Discrete => Action::Grid(GridAction::Stay),
        ActionSpace::Continuous => Action::Point([0.0, 0.0]),
    }
}

fn move_toward(env: &MazeEnv, s: &State, here: Cell, next: Cell) -> Action {
    match env.action_space() {
        ActionSpace::Discrete => {
            let mv = GridAction::ALL
                .iter()
                .copied()
                .find(|a| env.step(s, &Action::Grid(*a)).ok().and_then(|n| n.cell()) == Some(next) && next != here)
                .unwrap_or(GridAction::Stay);
            Action::Grid(mv)
        }
        ActionSpace::Continuous => {
            let dx = next[0] as f64 - s.0[0];
            let dy = next[1] as f64 - s.0[1];
            let n = (dx * dx + dy * dy).sqrt().max(1e-9);
            Action::Point([dx / n, dy / n])
        }
    }
}

/// Shortest-path oracle policy.
pub struct BfsPolicy;

impl GoalPolicy for BfsPolicy {
    fn name(&self) -> &str {
        "bfs"
    }

    fn act(&self, env: &MazeEnv, s: &State, g: &State, rng: &mut ChaCha8Rng) -> Result<Action> {
        let here = s.cell().ok_or(Error::InvalidState(s.0))?;
        let goal = g.cell().ok_or(Error::InvalidState(g.0))?;
        let dist = bfs_from(env.layout(), goal)?;
        let w = env.layout().width;
        let d = dist[here[1] * w + here[0]].ok_or(Error::Unreachable { from: here, to: goal })?;
        if d == 0 {
            return Ok(move_toward(env, s, here, here));
        }
        let options: Vec<Cell> = env.layout().neighbours(here).filter(|n| dist[n[1] * w + n[0]] == Some(d - 1)).collect();
        let next = options[rng.gen_range(0..options.len())];
        Ok(move_toward(env, s, here, next))
    }
}

/// Uniform random actions.
pub struct RandomPolicy;

impl GoalPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&self, env: &MazeEnv, _s: &State, _g: &State, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(env.action_space().random(rng))
    }
}

/// Policy-free check of the representation: step to the neighbouring cell with
/// the smallest learned distance to the goal (grid mazes).
pub struct LatentGreedy<'a> {
    pub ae: &'a Autoencoder,
}

impl GoalPolicy for LatentGreedy<'_> {
    fn name(&self) -> &str {
        "latent-greedy"
    }

    fn act(&self, env: &MazeEnv, s: &State, g: &State, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let here = s.cell().ok_or(Error::InvalidState(s.0))?;
        let zg = self.ae.encode(g);
        let mut best = (crate::repr::latent_distance(&self.ae.encode(s), &zg), here);
        for n in env.layout().neighbours(here) {
            let d = crate::repr::latent_distance(&self.ae.encode(&State::from_cell(n)), &zg);
            if d < best.0 {
                best = (d, n);
            }
        }
        Ok(move_toward(env, s, here, best.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResult {
    pub goal: [f64; 2],
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub seed: u64,
    pub horizon: usize,
    pub episodes_per_goal: usize,
    pub per_goal: Vec<GoalResult>,
    pub mean_success: f64,
}

/// Runs `n_episodes` episodes per goal from the env's start distribution.
/// Reaching the goal at any step (including the start) counts as success.
pub fn evaluate(policy: &dyn GoalPolicy, env: &MazeEnv, goals: &[State], n_episodes: usize, horizon: usize, seed: u64) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
    }
    if goals.is_empty() {
        return Err(Error::InvalidConfig("no evaluation goals".into()));
    }
    let mut per_goal = Vec::with_capacity(goals.len());
    for (gi, g) in goals.iter().enumerate() {
        if !env.is_valid(g) {
            return Err(Error::InvalidState(g.0));
        }
        let mut successes = 0;
        for ep in 0..n_episodes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, gi), ep));
            let mut s = env.sample_start(&mut rng);
            let mut done = env.reached(&s, g);
            for _ in 0..horizon {
                if done {
                    break;
                }
                let a = policy.act(env, &s, g, &mut rng)?;
                s = env.step(&s, &a)?;
                done = env.reached(&s, g);
            }
            successes += usize::from(done);
        }
        per_goal.push(GoalResult { goal: g.0, episodes: n_episodes, successes, success_rate: successes as f64 / n_episodes as f64 });
    }
    let mean_success = per_goal.iter().map(|r| r.success_rate).sum::<f64>() / per_goal.len() as f64;
    Ok(EvalReport { policy: policy.name().to_string(), seed, horizon, episodes_per_goal: n_episodes, per_goal, mean_success })
}

/// Mean and two-standard-deviation band of a metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub band: [f64; 2],
}

impl SeedSweep {
    pub fn new(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = if per_seed.len() > 1 {
            per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        Self { per_seed, mean, std, band: [mean - 2.0 * std, mean + 2.0 * std] }
    }
}

/// Bundles the reports of one evaluation call, with the sweep across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
    pub per_goal_mean: Vec<GoalResult>,
    pub sweep: SeedSweep,
}

impl EvalSummary {
    pub fn new(config_hash: String, reports: Vec<EvalReport>) -> Self {
        let sweep = SeedSweep::new(reports.iter().map(|r| r.mean_success).collect());
        let mut per_goal_mean: Vec<GoalResult> = Vec::new();
        for r in &reports {
            for (i, g) in r.per_goal.iter().enumerate() {
                match per_goal_mean.get_mut(i) {
                    Some(acc) => {
                        acc.episodes += g.episodes;
                        acc.successes += g.successes;
                    }
                    None => per_goal_mean.push(g.clone()),
                }
            }
        }
        for g in &mut per_goal_mean {
            g.success_rate = g.successes as f64 / g.episodes as f64;
        }
        Self { config_hash, reports, per_goal_mean, sweep }
    }
}
