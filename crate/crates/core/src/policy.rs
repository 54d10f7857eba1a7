//! Latent-conditioned policy decoder.
//!
//! A small dense network maps `(observation, z)` to an action. Hidden layers
//! use `tanh`; the output layer is linear and is interpreted by the head
//! (argmax over logits for discrete primitives, identity for continuous
//! displacements). After cloning the weights are frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub sensor: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proprioceptive: Vec<f64>,
}

impl Observation {
    pub fn new(sensor: Vec<f64>) -> Self {
        Self {
            sensor,
            proprioceptive: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.sensor.len() + self.proprioceptive.len()
    }

    pub fn features(&self) -> impl Iterator<Item = f64> + '_ {
        self.sensor.iter().chain(&self.proprioceptive).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionHead {
    /// Argmax over `n` logits, ties to the lowest index.
    Discrete { n: usize },
    Continuous { dim: usize },
}

impl ActionHead {
    pub fn output_dim(&self) -> usize {
        match *self {
            ActionHead::Discrete { n } => n,
            ActionHead::Continuous { dim } => dim,
        }
    }

    pub fn apply(&self, output: &[f64]) -> Action {
        match self {
            ActionHead::Discrete { .. } => Action::Discrete(argmax(output)),
            ActionHead::Continuous { .. } => Action::Continuous(output.to_vec()),
        }
    }

    /// Dimension of the action when fed to the encoder (one-hot for discrete).
    pub fn feature_dim(&self) -> usize {
        self.output_dim()
    }

    pub fn action_features(&self, action: &Action) -> Result<Vec<f64>> {
        match (self, action) {
            (ActionHead::Discrete { n }, Action::Discrete(a)) => {
                if a >= n {
                    return Err(Error::DimensionMismatch {
                        context: "discrete action index",
                        expected: *n,
                        actual: *a,
                    });
                }
                let mut v = vec![0.0; *n];
                v[*a] = 1.0;
                Ok(v)
            }
            (ActionHead::Continuous { dim }, Action::Continuous(a)) => {
                check_dim("continuous action", *dim, a.len())?;
                Ok(a.clone())
            }
            (ActionHead::Discrete { n }, Action::Continuous(a)) => Err(Error::DimensionMismatch {
                context: "continuous action for a discrete head",
                expected: *n,
                actual: a.len(),
            }),
            (ActionHead::Continuous { dim }, Action::Discrete(_)) => Err(Error::DimensionMismatch {
                context: "discrete action for a continuous head",
                expected: *dim,
                actual: 1,
            }),
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-layer values recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace always holds the input")
    }
}

/// Fully connected network: `tanh` on hidden layers, linear output.
///
/// Parameters are stored flat, layer by layer, each as a row-major
/// `out x in` weight matrix followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn param_count(layer_dims: &[usize]) -> usize {
        layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn from_params(layer_dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer dims must list at least input and output, all positive: {layer_dims:?}"
            )));
        }
        check_dim("mlp parameters", Self::param_count(&layer_dims), params.len())?;
        Ok(Self { layer_dims, params })
    }

    pub fn zeros(layer_dims: Vec<usize>) -> Result<Self> {
        let n = Self::param_count(&layer_dims);
        Self::from_params(layer_dims, vec![0.0; n])
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: Vec<usize>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        let mut offset = 0;
        for l in 0..net.n_layers() {
            let (fan_in, fan_out) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-scale..scale);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_dims.windows(2).scan(0, |off, w| {
            let start = *off;
            *off += w[0] * w[1] + w[1];
            Some((start, w[0], w[1]))
        })
    }

    fn affine(&self, start: usize, n_in: usize, n_out: usize, x: &[f64], out: &mut Vec<f64>) {
        let w = &self.params[start..start + n_in * n_out];
        let b = &self.params[start + n_in * n_out..start + n_in * n_out + n_out];
        out.clear();
        out.extend(
            w.chunks_exact(n_in)
                .zip(b)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()),
        );
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.input_dim(), x.len())?;
        let last = self.n_layers() - 1;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (l, (start, n_in, n_out)) in self.layer_offsets().enumerate() {
            self.affine(start, n_in, n_out, &cur, &mut next);
            if l != last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        check_dim("mlp input", self.input_dim(), x.len())?;
        let last = self.n_layers() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut pre_activations = Vec::with_capacity(self.n_layers());
        for (l, (start, n_in, n_out)) in self.layer_offsets().enumerate() {
            let mut pre = Vec::new();
            self.affine(start, n_in, n_out, inputs.last().unwrap(), &mut pre);
            let post = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|v| v.tanh()).collect()
            };
            pre_activations.push(pre);
            inputs.push(post);
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
        })
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` and returns
    /// the gradient with respect to the network input.
    pub fn backward(&self, trace: &ForwardTrace, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        let offsets: Vec<_> = self.layer_offsets().collect();
        let last = self.n_layers() - 1;
        let mut delta = d_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (start, n_in, n_out) = offsets[l];
            if l != last {
                // d tanh(a) = 1 - tanh(a)^2, and trace.inputs[l + 1] holds tanh(a)
                for (d, y) in delta.iter_mut().zip(&trace.inputs[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let x = &trace.inputs[l];
            let (gw, rest) = grad[start..].split_at_mut(n_in * n_out);
            for (o, d) in delta.iter().enumerate() {
                for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                    *g += d * xi;
                }
                rest[o] += d;
            }
            let w = &self.params[start..start + n_in * n_out];
            let mut d_in = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                for (di, wi) in d_in.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *di += d * wi;
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Frobenius norms of each layer's weight matrix, restricted to input
    /// columns `[col_start, input_dim)` for the first layer.
    fn weight_norms(&self, col_start: usize) -> Vec<f64> {
        self.layer_offsets()
            .enumerate()
            .map(|(l, (start, n_in, n_out))| {
                let w = &self.params[start..start + n_in * n_out];
                let from = if l == 0 { col_start } else { 0 };
                w.chunks_exact(n_in)
                    .flat_map(|row| &row[from..])
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecoder {
    obs_dim: usize,
    latent_dim: usize,
    head: ActionHead,
    net: Mlp,
}

impl PolicyDecoder {
    pub fn new(obs_dim: usize, latent_dim: usize, head: ActionHead, net: Mlp) -> Result<Self> {
        check_dim("decoder input", obs_dim + latent_dim, net.input_dim())?;
        check_dim("decoder output", head.output_dim(), net.output_dim())?;
        Ok(Self {
            obs_dim,
            latent_dim,
            head,
            net,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        head: ActionHead,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = decoder_layer_dims(obs_dim, latent_dim, hidden, head);
        let net = Mlp::init(dims, rng)?;
        Self::new(obs_dim, latent_dim, head, net)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn head(&self) -> ActionHead {
        self.head
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input(&self, z: &[f64], obs: &Observation) -> Result<Vec<f64>> {
        check_dim("decoder observation", self.obs_dim, obs.dim())?;
        check_dim("decoder latent", self.latent_dim, z.len())?;
        Ok(obs.features().chain(z.iter().copied()).collect())
    }

    pub fn decode(&self, z: &[f64], obs: &Observation) -> Result<Action> {
        let out = self.net.forward(&self.input(z, obs)?)?;
        Ok(self.head.apply(&out))
    }

    pub fn forward_with_intermediates(
        &self,
        z: &[f64],
        obs: &Observation,
    ) -> Result<(Action, ForwardTrace)> {
        let trace = self.net.forward_trace(&self.input(z, obs)?)?;
        Ok((self.head.apply(trace.output()), trace))
    }

    /// Upper bound on the Lipschitz constant of the raw network output with
    /// respect to `z` (product of Frobenius norms; `tanh` is 1-Lipschitz).
    pub fn latent_lipschitz_bound(&self) -> f64 {
        self.net.weight_norms(self.obs_dim).iter().product()
    }
}

pub fn decoder_layer_dims(
    obs_dim: usize,
    latent_dim: usize,
    hidden: &[usize],
    head: ActionHead,
) -> Vec<usize> {
    let mut dims = vec![obs_dim + latent_dim];
    dims.extend_from_slice(hidden);
    dims.push(head.output_dim());
    dims
}
