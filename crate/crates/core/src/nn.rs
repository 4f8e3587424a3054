//! Small dense networks with hand-written reverse mode.
//!
//! An [`Mlp`] keeps all of its weights in one flat vector so optimizers, target
//! averaging and checkpoints can treat every network uniformly. Each layer `l`
//! occupies `dims[l] * dims[l + 1]` weights (row-major, input-major) followed by
//! `dims[l + 1]` biases. Hidden layers apply the activation; the output layer is
//! linear.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Multilayer perceptron over a flat weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<f64>,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct Tape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    preacts: Vec<Array2<f64>>,
}

/// Number of weights implied by `layer_dims`.
pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// He-style uniform fan-in initialisation with zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(layer_dims, activation);
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut net.weights[offset..offset + fan_in * fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Self {
        assert!(layer_dims.len() >= 2, "an MLP needs at least input and output dims");
        Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights: vec![0.0; param_count(layer_dims)],
        }
    }

    pub fn from_weights(layer_dims: &[usize], activation: Activation, weights: Vec<f64>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::ArchitectureMismatch("fewer than two layer dims".into()));
        }
        let expected = param_count(layer_dims);
        if weights.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: weights.len() });
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), activation, weights })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.layer_dims == other.layer_dims && self.activation == other.activation
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.layer_dims[..=layer])
    }

    fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (n_in, n_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let off = self.layer_offset(layer);
        let w = ArrayView2::from_shape((n_in, n_out), &self.weights[off..off + n_in * n_out]).unwrap();
        let b = ArrayView1::from(&self.weights[off + n_in * n_out..off + n_in * n_out + n_out]);
        (w, b)
    }

    /// Copies `layer`'s weight matrix into a square identity (or rectangular
    /// identity-like) pattern. Used to build pass-through networks.
    pub fn set_layer_identity(&mut self, layer: usize) {
        let (n_in, n_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let off = self.layer_offset(layer);
        for i in 0..n_in {
            for j in 0..n_out {
                self.weights[off + i * n_out + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..n_out {
            self.weights[off + n_in * n_out + j] = 0.0;
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    /// Batched forward pass; one sample per row.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut pre = h.dot(&w);
            pre += &b;
            if l + 1 < self.num_layers() {
                let act = self.activation;
                pre.mapv_inplace(|v| act.apply(v));
            }
            h = pre;
        }
        Ok(h)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let mut tape = Tape { inputs: Vec::with_capacity(self.num_layers()), preacts: Vec::new() };
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut pre = h.dot(&w);
            pre += &b;
            tape.inputs.push(h);
            if l + 1 < self.num_layers() {
                let act = self.activation;
                let out = pre.mapv(|v| act.apply(v));
                tape.preacts.push(pre);
                h = out;
            } else {
                h = pre;
            }
        }
        Ok((h, tape))
    }

    /// Reverse pass. Accumulates `dL/dweights` into `grad` and returns `dL/dx`.
    pub fn backward(&self, tape: &Tape, dout: ArrayView2<'_, f64>, grad: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad.len(), self.weights.len());
        let mut delta = dout.to_owned();
        for l in (0..self.num_layers()).rev() {
            if l + 1 < self.num_layers() {
                let act = self.activation;
                ndarray::Zip::from(&mut delta)
                    .and(&tape.preacts[l])
                    .for_each(|d, &p| *d *= act.derivative(p));
            }
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let off = self.layer_offset(l);
            let (gw, rest) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let mut gw = ArrayViewMut2::from_shape((n_in, n_out), gw).unwrap();
            let mut gb = ArrayViewMut1::from(rest);
            gw += &tape.inputs[l].t().dot(&delta);
            gb += &delta.sum_axis(Axis(0));
            let (w, _) = self.layer(l);
            delta = delta.dot(&w.t());
        }
        delta
    }

    /// Loss value and exact weight gradient for a scalar loss head over the
    /// batch outputs. The head returns `(loss, dloss/doutputs)`.
    pub fn value_and_grad<F>(&self, x: ArrayView2<'_, f64>, loss_head: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>) -> (f64, Array2<f64>),
    {
        let (out, tape) = self.forward_tape(x)?;
        let (loss, dout) = loss_head(out.view());
        let mut grad = vec![0.0; self.weights.len()];
        self.backward(&tape, dout.view(), &mut grad);
        Ok((loss, grad))
    }
}

/// Adam optimizer state for one flat weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

pub const DEFAULT_LR: f64 = 3e-4;

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.weights().len(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one bias-corrected Adam update. A non-finite gradient aborts
    /// without touching the weights.
    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != weights.len() || grad.len() != self.first_moment.len() {
            return Err(Error::DimensionMismatch { expected: self.first_moment.len(), got: grad.len() });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite("adam", format!("gradient entry {i} is {}", grad[i])));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..weights.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            weights[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `target <- (1 - rho) * target + rho * online`, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, rho: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(Error::ArchitectureMismatch(format!(
            "target {:?} vs online {:?}",
            target.layer_dims, online.layer_dims
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("polyak rho {rho} outside [0, 1]")));
    }
    for (t, &o) in target.weights.iter_mut().zip(&online.weights) {
        *t = (1.0 - rho) * *t + rho * o;
    }
    Ok(())
}

/// Central finite differences of `f` around `x`.
pub fn central_differences<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Stacks row vectors into a matrix.
pub fn rows_to_array(rows: &[Vec<f64>], ncols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), ncols));
    for (i, r) in rows.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&ArrayView1::from(&r[..]));
    }
    out
}
