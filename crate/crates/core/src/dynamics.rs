//! One-step Gaussian forward model `zeta(z' | z, a)` trained by NLL.
//!
//! The same model type serves the naive baseline, where "latents" are simply
//! normalised states.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionStore;
use crate::env::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::repr::{states_to_array, Autoencoder};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variance {
    /// Input-dependent `log_std` head, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    Learned,
    /// Fixed `std = 1`; the NLL is then MSE/2 plus a constant.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub variance: Variance,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Gelu,
            variance: Variance::Learned,
            lr: 3e-4,
            batch_size: 256,
            steps: 20_000,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("dynamics batch_size, lr and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian one-step predictor over a `dim`-dimensional space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub dim: usize,
    pub action_space: ActionSpace,
    pub variance: Variance,
}

/// Inputs and targets of the one-step regression, one transition per row.
#[derive(Debug, Clone)]
pub struct StepPairs {
    pub z: Array2<f64>,
    pub a: Array2<f64>,
    pub z_next: Array2<f64>,
}

impl StepPairs {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> StepPairs {
        StepPairs {
            z: self.z.select(Axis(0), rows),
            a: self.a.select(Axis(0), rows),
            z_next: self.z_next.select(Axis(0), rows),
        }
    }

    /// Splits off the last `fraction` of rows.
    pub fn split(&self, fraction: f64) -> (StepPairs, StepPairs) {
        let n_test = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_test;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

fn encode_actions(space: ActionSpace, actions: impl Iterator<Item = Action>) -> Result<Array2<f64>> {
    let acts: Vec<Action> = actions.collect();
    let mut out = Array2::zeros((acts.len(), space.encoding_dim()));
    for (i, a) in acts.iter().enumerate() {
        space.encode_into(a, out.row_mut(i).as_slice_mut().unwrap())?;
    }
    Ok(out)
}

/// `(f(s), a, f(s'))` for every real transition, with the encoder frozen.
pub fn latent_pairs(ae: &Autoencoder, data: &TransitionStore, space: ActionSpace) -> Result<StepPairs> {
    let items = data.as_slice();
    let s: Vec<_> = items.iter().map(|t| t.s).collect();
    let sn: Vec<_> = items.iter().map(|t| t.s_next).collect();
    Ok(StepPairs { z: ae.encode_many(&s), a: encode_actions(space, items.iter().map(|t| t.a))?, z_next: ae.encode_many(&sn) })
}

/// `(s / scale, a, s' / scale)`: the naive state-space baseline's data.
pub fn state_pairs(data: &TransitionStore, scale: f64, space: ActionSpace) -> Result<StepPairs> {
    let items = data.as_slice();
    Ok(StepPairs {
        z: states_to_array(items.iter().map(|t| t.s), scale),
        a: encode_actions(space, items.iter().map(|t| t.a))?,
        z_next: states_to_array(items.iter().map(|t| t.s_next), scale),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub nll: f64,
    pub mse: f64,
    pub mean_error: f64,
    pub samples: usize,
}

impl DynamicsModel {
    pub fn new(dim: usize, space: ActionSpace, cfg: &DynamicsConfig, rng: &mut ChaCha8Rng) -> Self {
        let out = match cfg.variance {
            Variance::Learned => 2 * dim,
            Variance::Unit => dim,
        };
        let dims: Vec<usize> =
            std::iter::once(dim + space.encoding_dim()).chain(cfg.hidden.iter().copied()).chain([out]).collect();
        Self { net: Mlp::new(&dims, cfg.activation, rng), dim, action_space: space, variance: cfg.variance }
    }

    fn inputs<'a>(&self, z: ArrayView2<'a, f64>, a: ArrayView2<'a, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: z.ncols() });
        }
        if a.ncols() != self.action_space.encoding_dim() {
            return Err(Error::DimensionMismatch { expected: self.action_space.encoding_dim(), got: a.ncols() });
        }
        Ok(concatenate(Axis(1), &[z, a]).unwrap())
    }

    /// Predictive mean and standard deviation, one row per input.
    pub fn predict_many<'a>(&self, z: ArrayView2<'a, f64>, a: ArrayView2<'a, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(self.inputs(z, a)?.view())?;
        let mean = out.slice(s![.., 0..self.dim]).to_owned();
        let std = match self.variance {
            Variance::Learned => out.slice(s![.., self.dim..]).mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()),
            Variance::Unit => Array2::ones(mean.raw_dim()),
        };
        Ok((mean, std))
    }

    pub fn predict(&self, z: &[f64], a: &Action) -> Result<(Vec<f64>, Vec<f64>)> {
        let zv = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let enc = self.action_space.encode(a)?;
        let av = ArrayView2::from_shape((1, enc.len()), &enc).unwrap();
        let (m, s) = self.predict_many(zv, av)?;
        Ok((m.into_raw_vec_and_offset().0, s.into_raw_vec_and_offset().0))
    }

    /// Mean Gaussian NLL (summed over dimensions) and its weight gradient.
    pub fn nll_and_grad(&self, pairs: &StepPairs) -> Result<(f64, Vec<f64>)> {
        let x = self.inputs(pairs.z.view(), pairs.a.view())?;
        let n = pairs.len() as f64;
        let dim = self.dim;
        let variance = self.variance;
        let target = &pairs.z_next;
        self.net.value_and_grad(x.view(), |out| {
            let mut dout = Array2::zeros(out.raw_dim());
            let mut loss = 0.0;
            for i in 0..out.nrows() {
                for k in 0..dim {
                    let mu = out[[i, k]];
                    let diff = target[[i, k]] - mu;
                    match variance {
                        Variance::Unit => {
                            loss += 0.5 * diff * diff + HALF_LN_2PI;
                            dout[[i, k]] = -diff / n;
                        }
                        Variance::Learned => {
                            let raw = out[[i, dim + k]];
                            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                            let inv_var = (-2.0 * ls).exp();
                            loss += 0.5 * diff * diff * inv_var + ls + HALF_LN_2PI;
                            dout[[i, k]] = -diff * inv_var / n;
                            if raw > LOG_STD_MIN && raw < LOG_STD_MAX {
                                dout[[i, dim + k]] = (1.0 - diff * diff * inv_var) / n;
                            }
                        }
                    }
                }
            }
            (loss / n, dout)
        })
    }

    pub fn evaluate(&self, pairs: &StepPairs) -> Result<DynamicsReport> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (nll, _) = self.nll_and_grad(pairs)?;
        let (mean, _) = self.predict_many(pairs.z.view(), pairs.a.view())?;
        let diff = &mean - &pairs.z_next;
        let mse = diff.mapv(|v| v * v).mean().unwrap();
        let mean_error = diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / pairs.len() as f64;
        Ok(DynamicsReport { nll, mse, mean_error, samples: pairs.len() })
    }
}

pub fn train_dynamics(
    pairs: &StepPairs,
    space: ActionSpace,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<(DynamicsModel, Vec<f64>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DynamicsModel::new(pairs.z.ncols(), space, cfg, &mut rng);
    let mut opt = Adam::for_net(&model.net, cfg.lr);
    let batch = cfg.batch_size.min(pairs.len());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let rows = index::sample(&mut rng, pairs.len(), batch).into_vec();
        let (loss, grad) = model.nll_and_grad(&pairs.select(&rows))?;
        if !loss.is_finite() {
            return Err(Error::non_finite("dynamics", format!("loss {loss} at step {step}")));
        }
        opt.step(model.net.weights_mut(), &grad).map_err(|_| Error::non_finite("dynamics", format!("gradient at step {step}")))?;
        history.push(loss);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{label_goals, GoalLabelConfig};
    use crate::env::{generate_dataset, GridAction, MazeEnv, MazeLayout, UniformRandom};
    use crate::nn::{central_differences, relative_error};
    use rand::Rng;

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

    fn small(variance: Variance) -> DynamicsConfig {
        DynamicsConfig { hidden: vec![16, 16], variance, batch_size: 64, ..Default::default() }
    }

    #[test]
    fn zero_net_predicts_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = DynamicsModel::new(3, ActionSpace::Discrete, &small(Variance::Learned), &mut rng);
        m.net.weights_mut().fill(0.0);
        let (mean, std) = m.predict(&[0.3, -1.0, 2.0], &Action::Grid(GridAction::East)).unwrap();
        assert_eq!(mean, vec![0.0; 3]);
        assert_eq!(std, vec![1.0; 3]);
        assert!(matches!(m.predict(&[0.0; 2], &Action::Grid(GridAction::East)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn predict_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DynamicsModel::new(3, ActionSpace::Discrete, &small(Variance::Learned), &mut rng);
        let a = Action::Grid(GridAction::North);
        assert_eq!(m.predict(&[0.1, 0.2, 0.3], &a).unwrap(), m.predict(&[0.1, 0.2, 0.3], &a).unwrap());
    }

    #[test]
    fn log_std_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = DynamicsModel::new(2, ActionSpace::Discrete, &small(Variance::Learned), &mut rng);
        let n = m.net.weights().len();
        // push the output biases of the log-std head far out of range
        m.net.weights_mut()[n - 2] = 50.0;
        m.net.weights_mut()[n - 1] = -50.0;
        let (_, std) = m.predict(&[0.0, 0.0], &Action::Grid(GridAction::Stay)).unwrap();
        assert!((std[0] - LOG_STD_MAX.exp()).abs() < 1e-12);
        assert!((std[1] - LOG_STD_MIN.exp()).abs() < 1e-12);
    }

    #[test]
    fn unit_variance_nll_is_mse_plus_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let m = DynamicsModel::new(dim, ActionSpace::Discrete, &small(Variance::Unit), &mut rng);
        let mut offsets = Vec::new();
        for _ in 0..100 {
            let p = random_pairs(&mut rng, 32, dim);
            let (nll, _) = m.nll_and_grad(&p).unwrap();
            let mse = m.evaluate(&p).unwrap().mse;
            offsets.push(nll - 0.5 * dim as f64 * mse);
        }
        let (lo, hi) = offsets.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(hi - lo < 1e-9);
        assert!((offsets[0] - dim as f64 * HALF_LN_2PI).abs() < 1e-9);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for variance in [Variance::Learned, Variance::Unit] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let m = DynamicsModel::new(3, ActionSpace::Discrete, &small(variance), &mut rng);
            let p = random_pairs(&mut rng, 10, 3);
            let (_, g) = m.nll_and_grad(&p).unwrap();
            let numeric = central_differences(m.net.weights(), 1e-6, |w| {
                let mut probe = m.clone();
                probe.net.weights_mut().copy_from_slice(w);
                probe.nll_and_grad(&p).unwrap().0
            });
            assert!(relative_error(&g, &numeric) < 1e-4);
        }
    }

    #[test]
    fn identity_dynamics_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_pairs(&mut rng, 512, 2);
        p.z_next = p.z.clone();
        let cfg = DynamicsConfig { steps: 3000, lr: 1e-3, ..small(Variance::Unit) };
        let (m, hist) = train_dynamics(&p, ActionSpace::Discrete, &cfg, 5).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        assert!(m.evaluate(&p).unwrap().mean_error < 0.05);
    }

    #[test]
    fn learns_grid_moves_in_state_space() {
        let env = MazeEnv::grid(MazeLayout::open(5, 5)).unwrap();
        let trajs = generate_dataset(&env, &UniformRandom, 40, 50, 6).unwrap();
        let store = TransitionStore::new(label_goals(&env, &trajs, &GoalLabelConfig::default(), 6).unwrap());
        let pairs = state_pairs(&store, env.scale(), env.action_space()).unwrap();
        let (train, test) = pairs.split(0.1);
        let cfg = DynamicsConfig { steps: 3000, lr: 1e-3, ..small(Variance::Learned) };
        let (m, _) = train_dynamics(&train, env.action_space(), &cfg, 6).unwrap();
        let report = m.evaluate(&test).unwrap();
        // one cell is 0.2 in normalised units
        assert!(report.mean_error < 0.05, "{report:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_pairs(&mut rng, 100, 2);
        let cfg = DynamicsConfig { steps: 20, ..small(Variance::Learned) };
        let a = train_dynamics(&p, ActionSpace::Discrete, &cfg, 1).unwrap();
        let b = train_dynamics(&p, ActionSpace::Discrete, &cfg, 1).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
