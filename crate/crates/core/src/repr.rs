//! Temporal-distance autoencoder: encoder `f`, decoder `h` and latent distance.
//!
//! The objective is `L_rec + eta1 * L_traj + eta2 * L_tran`:
//!
//! * `L_rec`  — mean `||s - h(f(s))||`.
//! * `L_traj` — expectile regression of `d(f(s), f(g))` onto the backup
//!   `1 + gamma * d_target(f(s'), f(g))` (zero when `s` already satisfies `g`,
//!   no bootstrap when `s'` does). The residual is taken as estimate minus
//!   target, so `tau > 0.5` tracks the *lower* expectile of the cost backups,
//!   i.e. the shortest path.
//! * `L_tran` — one-sided penalty on `d(f(s), f(s'))` exceeding the step cost.
//!
//! Targets use a Polyak-averaged copy of the encoder and are not
//! differentiated.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Transition, TransitionStore};
use crate::env::{Cell, MazeEnv, State};
use crate::error::{Error, Result};
use crate::nn::{polyak_update, Activation, Adam, Mlp};

pub type LatentPoint = Vec<f64>;

/// Euclidean latent distance.
pub fn latent_distance(z1: &[f64], z2: &[f64]) -> f64 {
    assert_eq!(z1.len(), z2.len(), "latent dims differ");
    z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Asymmetric squared loss `|tau - 1(x < 0)| x^2` and its derivative.
pub fn expectile_loss(x: f64, tau: f64) -> (f64, f64) {
    let w = if x < 0.0 { 1.0 - tau } else { tau };
    (w * x * x, 2.0 * w * x)
}

/// Fixed input featurisation in front of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateFeatures {
    /// Coordinates divided by the maze scale.
    Coordinates,
    /// Gaussian bumps centred on every cell of the maze's bounding box.
    CellRbf { bandwidth: f64 },
}

/// [`StateFeatures`] bound to a particular maze size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: StateFeatures,
    pub width: usize,
    pub height: usize,
    /// Divisor for coordinates (also the decoder's output units).
    pub scale: f64,
}

impl FeatureMap {
    pub fn for_env(kind: StateFeatures, env: &MazeEnv) -> Self {
        Self { kind, width: env.layout().width, height: env.layout().height, scale: env.scale() }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            StateFeatures::Coordinates => 2,
            StateFeatures::CellRbf { .. } => self.width * self.height,
        }
    }

    pub fn apply(&self, states: impl ExactSizeIterator<Item = State>) -> Array2<f64> {
        match self.kind {
            StateFeatures::Coordinates => states_to_array(states, self.scale),
            StateFeatures::CellRbf { bandwidth } => {
                let mut out = Array2::zeros((states.len(), self.dim()));
                let k = -0.5 / (bandwidth * bandwidth);
                for (i, st) in states.enumerate() {
                    for y in 0..self.height {
                        for x in 0..self.width {
                            let dx = st.0[0] - x as f64;
                            let dy = st.0[1] - y as f64;
                            out[[i, y * self.width + x]] = (k * (dx * dx + dy * dy)).exp();
                        }
                    }
                }
                out
            }
        }
    }
}

/// How `L_tran` sets the allowed step length `d0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranAnchor {
    /// `d0 = |r_g(s) - 1|`: zero when `s` satisfies its goal, one otherwise.
    GoalReward,
    /// `d0 = 1` for every transition; transitions out of a satisfied goal are
    /// not pulled together.
    UnitStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprConfig {
    pub latent_dim: usize,
    pub features: StateFeatures,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub eta1: f64,
    pub eta2: f64,
    pub tau: f64,
    pub gamma: f64,
    pub target_rho: f64,
    pub tran_anchor: TranAnchor,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            features: StateFeatures::CellRbf { bandwidth: 0.5 },
            hidden: vec![128, 128, 128],
            activation: Activation::Gelu,
            eta1: 1.0,
            eta2: 1.0,
            tau: 0.95,
            gamma: 0.99,
            target_rho: 5e-3,
            tran_anchor: TranAnchor::UnitStep,
            lr: 3e-4,
            batch_size: 256,
            steps: 20_000,
        }
    }
}

impl ReprConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if !(0.5..1.0).contains(&self.tau) {
            return bad(format!("repr tau {} outside [0.5, 1)", self.tau));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("repr gamma {} outside (0, 1)", self.gamma));
        }
        if self.eta1 < 0.0 || self.eta2 < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.target_rho) {
            return bad(format!("target_rho {} outside [0, 1]", self.target_rho));
        }
        if let StateFeatures::CellRbf { bandwidth } = self.features {
            if !(bandwidth > 0.0) {
                return bad(format!("feature bandwidth {bandwidth} must be positive"));
            }
        }
        if self.batch_size == 0 || self.lr <= 0.0 || self.hidden.contains(&0) {
            return bad("batch_size, lr and hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Normalised arrays for one representation minibatch.
#[derive(Debug, Clone)]
pub struct ReprBatch {
    /// Normalised coordinates of `s` (the reconstruction target).
    pub s: Array2<f64>,
    pub s_feat: Array2<f64>,
    pub s_next_feat: Array2<f64>,
    pub g_feat: Array2<f64>,
    /// `r_g(s) = 1`.
    pub at_goal: Vec<bool>,
    /// `r_g(s') = 1`.
    pub terminal: Vec<bool>,
}

pub(crate) fn states_to_array(states: impl ExactSizeIterator<Item = State>, scale: f64) -> Array2<f64> {
    let n = states.len();
    let mut out = Array2::zeros((n, 2));
    for (i, st) in states.enumerate() {
        out[[i, 0]] = st.0[0] / scale;
        out[[i, 1]] = st.0[1] / scale;
    }
    out
}

impl ReprBatch {
    pub fn new(env: &MazeEnv, items: &[Transition], features: &FeatureMap) -> Self {
        Self {
            s: states_to_array(items.iter().map(|t| t.s), features.scale),
            s_feat: features.apply(items.iter().map(|t| t.s)),
            s_next_feat: features.apply(items.iter().map(|t| t.s_next)),
            g_feat: features.apply(items.iter().map(|t| t.g)),
            at_goal: items.iter().map(|t| env.reached(&t.s, &t.g)).collect(),
            terminal: items.iter().map(|t| t.terminal).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReprLosses {
    pub rec: f64,
    pub traj: f64,
    pub tran: f64,
    pub total: f64,
}

/// Weights on the three loss terms (used for the total and its gradient).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub traj: f64,
    pub tran: f64,
}

/// Encoder, decoder and the encoder's Polyak target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub target_encoder: Mlp,
    pub features: FeatureMap,
}

impl Autoencoder {
    pub fn new(cfg: &ReprConfig, features: FeatureMap, rng: &mut ChaCha8Rng) -> Self {
        let enc_dims: Vec<usize> =
            std::iter::once(features.dim()).chain(cfg.hidden.iter().copied()).chain([cfg.latent_dim]).collect();
        let mut dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        *dec_dims.last_mut().unwrap() = 2;
        let encoder = Mlp::new(&enc_dims, cfg.activation, rng);
        let decoder = Mlp::new(&dec_dims, cfg.activation, rng);
        Self { target_encoder: encoder.clone(), encoder, decoder, features }
    }

    pub fn scale(&self) -> f64 {
        self.features.scale
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, s: &State) -> LatentPoint {
        self.encode_many(std::slice::from_ref(s)).into_raw_vec_and_offset().0
    }

    pub fn encode_many(&self, states: &[State]) -> Array2<f64> {
        self.encoder.forward(self.features.apply(states.iter().copied()).view()).expect("feature map matches encoder")
    }

    pub fn decode(&self, z: &[f64]) -> Result<State> {
        if z.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch { expected: self.latent_dim(), got: z.len() });
        }
        let out = self.decoder.forward_one(z)?;
        Ok(State([out[0] * self.scale(), out[1] * self.scale()]))
    }

    /// Decodes a batch of latents (one per row) back to states.
    pub fn decode_many(&self, z: ArrayView2<'_, f64>) -> Result<Vec<State>> {
        let out = self.decoder.forward(z)?;
        let k = self.scale();
        Ok(out.rows().into_iter().map(|r| State([r[0] * k, r[1] * k])).collect())
    }

    pub fn distance(&self, s: &State, g: &State) -> f64 {
        latent_distance(&self.encode(s), &self.encode(g))
    }

    /// Loss terms plus gradients with respect to encoder and decoder weights.
    pub fn loss_and_grad(
        &self,
        batch: &ReprBatch,
        cfg: &ReprConfig,
        w: LossWeights,
    ) -> Result<(ReprLosses, Vec<f64>, Vec<f64>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyDataset);
        }
        let bf = b as f64;
        let x = concatenate(Axis(0), &[batch.s_feat.view(), batch.s_next_feat.view(), batch.g_feat.view()]).unwrap();
        let (z, tape) = self.encoder.forward_tape(x.view())?;
        let zs = z.slice(s![0..b, ..]);
        let zn = z.slice(s![b..2 * b, ..]);
        let zg = z.slice(s![2 * b..3 * b, ..]);
        let mut dz = Array2::<f64>::zeros(z.raw_dim());

        // reconstruction
        let (recon, dec_tape) = self.decoder.forward_tape(zs)?;
        let mut drecon = Array2::<f64>::zeros(recon.raw_dim());
        let mut rec = 0.0;
        for i in 0..b {
            let diff = [recon[[i, 0]] - batch.s[[i, 0]], recon[[i, 1]] - batch.s[[i, 1]]];
            let n = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
            rec += n / bf;
            if n > 0.0 {
                drecon[[i, 0]] = w.rec * diff[0] / (n * bf);
                drecon[[i, 1]] = w.rec * diff[1] / (n * bf);
            }
        }
        let mut grad_dec = vec![0.0; self.decoder.weights().len()];
        let dzs_rec = self.decoder.backward(&dec_tape, drecon.view(), &mut grad_dec);
        dz.slice_mut(s![0..b, ..]).assign(&dzs_rec);

        // Bellman targets from the frozen copy
        let traj_targets = if w.traj != 0.0 {
            let xt = concatenate(Axis(0), &[batch.s_next_feat.view(), batch.g_feat.view()]).unwrap();
            let zt = self.target_encoder.forward(xt.view())?;
            (0..b)
                .map(|i| {
                    if batch.at_goal[i] {
                        0.0
                    } else if batch.terminal[i] {
                        1.0
                    } else {
                        let dn = row_distance(zt.row(i), zt.row(b + i));
                        (1.0 + cfg.gamma * dn).max(0.0)
                    }
                })
                .collect()
        } else {
            vec![0.0; b]
        };

        let mut traj = 0.0;
        let mut tran = 0.0;
        for i in 0..b {
            let d = row_distance(zs.row(i), zg.row(i));
            let (l, dl) = expectile_loss(d - traj_targets[i], cfg.tau);
            traj += l / bf;
            if d > 0.0 && w.traj != 0.0 {
                let c = w.traj * dl / (bf * d);
                for k in 0..zs.ncols() {
                    let v = c * (zs[[i, k]] - zg[[i, k]]);
                    dz[[i, k]] += v;
                    dz[[2 * b + i, k]] -= v;
                }
            }

            let d0 = match cfg.tran_anchor {
                TranAnchor::GoalReward if batch.at_goal[i] => 0.0,
                _ => 1.0,
            };
            let dt = row_distance(zs.row(i), zn.row(i));
            let r = dt - d0;
            if r > 0.0 {
                tran += r * r / bf;
                if dt > 0.0 && w.tran != 0.0 {
                    let c = w.tran * 2.0 * r / (bf * dt);
                    for k in 0..zs.ncols() {
                        let v = c * (zs[[i, k]] - zn[[i, k]]);
                        dz[[i, k]] += v;
                        dz[[b + i, k]] -= v;
                    }
                }
            }
        }

        let mut grad_enc = vec![0.0; self.encoder.weights().len()];
        self.encoder.backward(&tape, dz.view(), &mut grad_enc);
        let total = w.rec * rec + w.traj * traj + w.tran * tran;
        Ok((ReprLosses { rec, traj, tran, total }, grad_enc, grad_dec))
    }

    /// Learned distance from every free cell to `goal`.
    pub fn distance_table(&self, env: &MazeEnv, goal: &State) -> Vec<(Cell, f64)> {
        let cells = env.layout().free_cells();
        let states: Vec<State> = cells.iter().map(|c| State::from_cell(*c)).collect();
        let z = self.encode_many(&states);
        let zg = self.encode(goal);
        cells.iter().enumerate().map(|(i, c)| (*c, row_distance(z.row(i), ndarray::ArrayView1::from(&zg[..])))).collect()
    }

    /// Mean reconstruction error over `states`, in state units.
    pub fn reconstruction_error(&self, states: &[State]) -> Result<f64> {
        if states.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let z = self.encode_many(states);
        let back = self.decode_many(z.view())?;
        Ok(states.iter().zip(&back).map(|(a, b)| a.distance(b)).sum::<f64>() / states.len() as f64)
    }
}

fn row_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Trains the autoencoder on the real store. Returns the model and the
/// per-step loss history.
pub fn train_repr(
    env: &MazeEnv,
    data: &TransitionStore,
    cfg: &ReprConfig,
    seed: u64,
) -> Result<(Autoencoder, Vec<ReprLosses>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ae = Autoencoder::new(cfg, FeatureMap::for_env(cfg.features, env), &mut rng);
    let mut opt_enc = Adam::for_net(&ae.encoder, cfg.lr);
    let mut opt_dec = Adam::for_net(&ae.decoder, cfg.lr);
    let weights = LossWeights { rec: 1.0, traj: cfg.eta1, tran: cfg.eta2 };
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let items = data.sample_with_goal(cfg.batch_size, &mut rng)?;
        let batch = ReprBatch::new(env, &items, &ae.features);
        let (losses, g_enc, g_dec) = ae.loss_and_grad(&batch, cfg, weights)?;
        if !losses.total.is_finite() {
            return Err(Error::non_finite("representation", format!("loss {} at step {step}", losses.total)));
        }
        opt_enc.step(ae.encoder.weights_mut(), &g_enc).map_err(|_| Error::non_finite("representation", format!("encoder gradient at step {step}")))?;
        opt_dec.step(ae.decoder.weights_mut(), &g_dec).map_err(|_| Error::non_finite("representation", format!("decoder gradient at step {step}")))?;
        polyak_update(&mut ae.target_encoder, &ae.encoder, cfg.target_rho)?;
        history.push(losses);
        if step % 1000 == 0 {
            log::debug!("repr step {step}: {losses:?}");
        }
    }
    Ok((ae, history))
}

/// Heatmap rows `(x, y, d)` over all free cells.
pub fn write_heatmap_csv<W: std::io::Write>(ae: &Autoencoder, env: &MazeEnv, goal: &State, mut out: W) -> Result<()> {
    if !env.is_valid(goal) {
        return Err(Error::InvalidState(goal.0));
    }
    writeln!(out, "x,y,d")?;
    for (c, d) in ae.distance_table(env, goal) {
        writeln!(out, "{},{},{}", c[0], c[1], d)?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{label_goals, GoalLabelConfig};
    use crate::env::{generate_dataset, layouts, MazeLayout, UniformRandom};
    use crate::nn::{central_differences, relative_error};
    use proptest::prelude::*;

    fn small_cfg() -> ReprConfig {
        ReprConfig { latent_dim: 4, hidden: vec![8, 8], batch_size: 16, steps: 10, ..Default::default() }
    }

    fn env7() -> MazeEnv {
        MazeEnv::grid(MazeLayout::parse(layouts::MAZE_7X7).unwrap()).unwrap()
    }

    fn store(env: &MazeEnv, seed: u64) -> TransitionStore {
        let trajs = generate_dataset(env, &UniformRandom, 10, 40, seed).unwrap();
        TransitionStore::new(label_goals(env, &trajs, &GoalLabelConfig::default(), seed).unwrap())
    }

    #[test]
    fn distance_examples() {
        let z = [1.0, -2.0, 0.5];
        assert_eq!(latent_distance(&z, &z), 0.0);
        assert_eq!(latent_distance(&[0.0, 0.0, 0.0], &[3.0, 4.0, 0.0]), 5.0);
        assert_eq!(latent_distance(&[1.0, 2.0], &[0.0, 7.0]), latent_distance(&[0.0, 7.0], &[1.0, 2.0]));
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), c in prop::collection::vec(-5.0f64..5.0, 3)) {
            prop_assert!(latent_distance(&a, &b) >= 0.0);
            prop_assert_eq!(latent_distance(&a, &b), latent_distance(&b, &a));
            prop_assert!(latent_distance(&a, &c) <= latent_distance(&a, &b) + latent_distance(&b, &c) + 1e-12);
        }
    }

    #[test]
    fn expectile_half_is_half_squared_error() {
        for x in [-2.0, -0.1, 0.0, 0.3, 4.0] {
            let (l, dl) = expectile_loss(x, 0.5);
            assert_eq!(l, 0.5 * x * x);
            assert_eq!(dl, x);
        }
    }

    #[test]
    fn zero_encoder_maps_to_origin() {
        let cfg = small_cfg();
        let mut ae = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, &env7()), &mut ChaCha8Rng::seed_from_u64(0));
        ae.encoder.weights_mut().fill(0.0);
        assert_eq!(ae.encode(&State([3.0, 2.0])), vec![0.0; 4]);
        let ae2 = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, &env7()), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ae2.encode(&State([1.0, 2.0])), ae2.encode(&State([1.0, 2.0])));
        assert!(matches!(ae2.decode(&[0.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_decoder_reconstruction_loss_is_mean_norm() {
        let env = env7();
        let cfg = small_cfg();
        let mut ae = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, &env), &mut ChaCha8Rng::seed_from_u64(1));
        ae.decoder.weights_mut().fill(0.0);
        let data = store(&env, 1);
        let batch = ReprBatch::new(&env, &data.as_slice()[..20], &ae.features);
        let (l, _, _) = ae.loss_and_grad(&batch, &cfg, LossWeights { rec: 1.0, traj: 0.0, tran: 0.0 }).unwrap();
        let expected: f64 = batch.s.rows().into_iter().map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt()).sum::<f64>() / 20.0;
        assert!((l.rec - expected).abs() < 1e-12);
    }

    #[test]
    fn goal_states_have_zero_traj_loss_at_fixed_point() {
        let env = env7();
        let cfg = small_cfg();
        let ae = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, &env), &mut ChaCha8Rng::seed_from_u64(2));
        let data = store(&env, 2);
        let items: Vec<Transition> = data.as_slice().iter().filter(|t| env.reached(&t.s, &t.g)).copied().take(8).collect();
        assert!(!items.is_empty());
        let batch = ReprBatch::new(&env, &items, &ae.features);
        let (l, _, _) = ae.loss_and_grad(&batch, &cfg, LossWeights { rec: 0.0, traj: 1.0, tran: 0.0 }).unwrap();
        assert_eq!(l.traj, 0.0);
    }

    #[test]
    fn tran_anchor_rules() {
        let env = env7();
        let data = store(&env, 3);
        let mut cfg = small_cfg();
        let mut ae = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, &env), &mut ChaCha8Rng::seed_from_u64(3));
        // scale the output layer so every step is far longer than one unit
        let n = ae.encoder.weights().len();
        let last = 8 * 4 + 4;
        for w in &mut ae.encoder.weights_mut()[n - last..] {
            *w *= 50.0;
        }
        let goal_items: Vec<Transition> =
            data.as_slice().iter().filter(|t| env.reached(&t.s, &t.g) && t.s != t.s_next).copied().take(4).collect();
        let batch = ReprBatch::new(&env, &goal_items, &ae.features);
        let w = LossWeights { rec: 0.0, traj: 0.0, tran: 1.0 };
        cfg.tran_anchor = TranAnchor::GoalReward;
        let (reward_based, _, _) = ae.loss_and_grad(&batch, &cfg, w).unwrap();
        cfg.tran_anchor = TranAnchor::UnitStep;
        let (unit, _, _) = ae.loss_and_grad(&batch, &cfg, w).unwrap();
        // d0 = 0 penalises the full step, d0 = 1 only the excess
        assert!(reward_based.tran > unit.tran && unit.tran > 0.0);

        // all steps exactly at d0 cost nothing
        let stays: Vec<Transition> = data.as_slice().iter().filter(|t| t.s == t.s_next).copied().take(4).collect();
        let (l, _, _) = ae.loss_and_grad(&ReprBatch::new(&env, &stays, &ae.features), &cfg, w).unwrap();
        assert_eq!(l.tran, 0.0);
    }

    fn check_gradients(w: LossWeights, anchor: TranAnchor, seed: u64) {
        let env = env7();
        let data = store(&env, seed);
        let cfg = ReprConfig { tran_anchor: anchor, tau: 0.9, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ae = Autoencoder::new(&cfg, FeatureMap::for_env(cfg.features, &env), &mut rng);
        ae.encoder = Mlp::new(ae.encoder.layer_dims(), Activation::Gelu, &mut rng);
        ae.target_encoder = Mlp::new(ae.encoder.layer_dims(), Activation::Gelu, &mut rng);
        let items = data.sample_with_goal(12, &mut rng).unwrap();
        let batch = ReprBatch::new(&env, &items, &ae.features);
        let (_, ge, gd) = ae.loss_and_grad(&batch, &cfg, w).unwrap();
        let ne = ae.encoder.weights().len();
        let params: Vec<f64> = ae.encoder.weights().iter().chain(ae.decoder.weights()).copied().collect();
        let numeric = central_differences(&params, 1e-6, |p| {
            let mut probe = ae.clone();
            probe.encoder.weights_mut().copy_from_slice(&p[..ne]);
            probe.decoder.weights_mut().copy_from_slice(&p[ne..]);
            probe.loss_and_grad(&batch, &cfg, w).unwrap().0.total
        });
        let analytic: Vec<f64> = ge.into_iter().chain(gd).collect();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rec_gradient_matches_finite_differences() {
        check_gradients(LossWeights { rec: 1.0, traj: 0.0, tran: 0.0 }, TranAnchor::UnitStep, 11);
    }

    #[test]
    fn traj_gradient_matches_finite_differences() {
        check_gradients(LossWeights { rec: 0.0, traj: 1.0, tran: 0.0 }, TranAnchor::UnitStep, 12);
    }

    #[test]
    fn tran_gradient_matches_finite_differences() {
        check_gradients(LossWeights { rec: 0.0, traj: 0.0, tran: 1.0 }, TranAnchor::GoalReward, 13);
        check_gradients(LossWeights { rec: 0.0, traj: 0.0, tran: 1.0 }, TranAnchor::UnitStep, 14);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        check_gradients(LossWeights { rec: 1.0, traj: 0.7, tran: 0.4 }, TranAnchor::UnitStep, 15);
    }

    #[test]
    fn plain_autoencoder_reduces_reconstruction() {
        let env = env7();
        let data = store(&env, 4);
        let cfg = ReprConfig { eta1: 0.0, eta2: 0.0, steps: 600, lr: 1e-3, ..small_cfg() };
        let (_, hist) = train_repr(&env, &data, &cfg, 4).unwrap();
        let early: f64 = hist[..50].iter().map(|l| l.rec).sum::<f64>() / 50.0;
        let late: f64 = hist[hist.len() - 50..].iter().map(|l| l.rec).sum::<f64>() / 50.0;
        assert!(late < 0.5 * early, "{early} -> {late}");
    }

    #[test]
    fn training_is_deterministic() {
        let env = env7();
        let data = store(&env, 5);
        let cfg = small_cfg();
        let (a, ha) = train_repr(&env, &data, &cfg, 9).unwrap();
        let (b, hb) = train_repr(&env, &data, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(ReprConfig { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(ReprConfig { tau: 0.4, ..Default::default() }.validate().is_err());
        assert!(ReprConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(ReprConfig { eta1: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
