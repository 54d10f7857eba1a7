//! Multi-modal behavioral cloning with a conditional VAE.
//!
//! The encoder reads a short window of `(observation, action)` pairs and
//! emits the mean and log-variance of `q(z | window)`. The decoder is the
//! [`PolicyDecoder`] applied to every step of the window with the same `z`.
//! Demonstrations are cut into consecutive non-overlapping windows of
//! `window` steps; the last one is zero-padded and only its real steps
//! contribute reconstruction loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::optim::{AdamHyper, AdamState};
use crate::policy::{decoder_layer_dims, Action, ActionHead, Mlp, Observation, PolicyDecoder};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub obs: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task_tag: String,
    /// Expert mode label, informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn check(&self, obs_dim: usize, head: ActionHead) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidConfig("demonstration has no steps".into()));
        }
        for step in &self.steps {
            check_dim("demonstration observation", obs_dim, step.obs.dim())?;
            head.action_features(&step.action)?;
        }
        Ok(())
    }
}

/// Parses one demonstration per non-empty line.
pub fn parse_demos(text: &str) -> Result<Vec<Demonstration>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedDemo {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn demos_to_jsonl(demos: &[Demonstration]) -> Result<String> {
    let mut out = String::new();
    for d in demos {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    window: usize,
    obs_dim: usize,
    latent_dim: usize,
    head: ActionHead,
    net: Mlp,
}

impl Encoder {
    pub fn input_dim(window: usize, obs_dim: usize, head: ActionHead) -> usize {
        window * (obs_dim + head.feature_dim())
    }

    pub fn new(window: usize, obs_dim: usize, latent_dim: usize, head: ActionHead, net: Mlp) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("encoder window must be positive".into()));
        }
        check_dim("encoder input", Self::input_dim(window, obs_dim, head), net.input_dim())?;
        check_dim("encoder output", 2 * latent_dim, net.output_dim())?;
        Ok(Self {
            window,
            obs_dim,
            latent_dim,
            head,
            net,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        window: usize,
        obs_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        head: ActionHead,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![Self::input_dim(window, obs_dim, head)];
        dims.extend_from_slice(hidden);
        dims.push(2 * latent_dim);
        let net = Mlp::init(dims, rng)?;
        Self::new(window, obs_dim, latent_dim, head, net)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Flattened, zero-padded features of up to `window` steps.
    pub fn features(&self, steps: &[DemoStep]) -> Result<Vec<f64>> {
        let slot = self.obs_dim + self.head.feature_dim();
        let mut x = vec![0.0; self.window * slot];
        for (k, step) in steps.iter().take(self.window).enumerate() {
            check_dim("encoder observation", self.obs_dim, step.obs.dim())?;
            let dst = &mut x[k * slot..(k + 1) * slot];
            for (d, v) in dst.iter_mut().zip(step.obs.features()) {
                *d = v;
            }
            dst[self.obs_dim..].copy_from_slice(&self.head.action_features(&step.action)?);
        }
        Ok(x)
    }

    /// `(mean, log_var)` of `q(z | steps)`.
    pub fn encode(&self, steps: &[DemoStep]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(&self.features(steps)?)?;
        let (m, v) = out.split_at(self.latent_dim);
        Ok((m.to_vec(), v.to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    /// Unweighted KL(q || N(0, I)), summed over windows.
    pub kl: f64,
    /// `0.5 * weight_decay * |params|^2`.
    pub weight_decay: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl Gradients {
    fn zeros(enc: &Encoder, dec: &PolicyDecoder) -> Self {
        Self {
            encoder: vec![0.0; enc.net.params().len()],
            decoder: vec![0.0; dec.net().params().len()],
        }
    }
}

pub fn kl_to_standard_normal(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, v)| v.exp() + m * m - 1.0 - v)
        .sum::<f64>()
}

fn check_pair(enc: &Encoder, dec: &PolicyDecoder) -> Result<()> {
    check_dim("encoder/decoder latent", dec.latent_dim(), enc.latent_dim)?;
    check_dim("encoder/decoder observation", dec.obs_dim(), enc.obs_dim)?;
    if enc.head != dec.head() {
        return Err(Error::InvalidConfig("encoder and decoder action heads differ".into()));
    }
    Ok(())
}

/// Loss of one step's raw decoder output and its gradient.
fn step_reconstruction(head: ActionHead, out: &[f64], action: &Action) -> Result<(f64, Vec<f64>)> {
    match (head, action) {
        (ActionHead::Continuous { dim }, Action::Continuous(a)) => {
            check_dim("continuous action", dim, a.len())?;
            let d: Vec<f64> = out.iter().zip(a).map(|(o, a)| o - a).collect();
            let loss = d.iter().map(|v| v * v).sum();
            Ok((loss, d.into_iter().map(|v| 2.0 * v).collect()))
        }
        (ActionHead::Discrete { n }, Action::Discrete(a)) => {
            if *a >= n {
                return Err(Error::DimensionMismatch {
                    context: "discrete action index",
                    expected: n,
                    actual: *a,
                });
            }
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|o| (o - max).exp()).sum();
            let log_z = max + sum.ln();
            let grad = out
                .iter()
                .enumerate()
                .map(|(i, o)| (o - log_z).exp() - if i == *a { 1.0 } else { 0.0 })
                .collect();
            Ok((log_z - out[*a], grad))
        }
        _ => head.action_features(action).map(|_| unreachable!()),
    }
}

/// Forward and (optionally) reverse pass over one window with noise `u`.
/// Returns `(reconstruction, kl)`; gradients of `rec + lambda * kl` are
/// accumulated into `grads` when given.
fn window_pass(
    enc: &Encoder,
    dec: &PolicyDecoder,
    steps: &[DemoStep],
    u: &[f64],
    lambda: f64,
    grads: Option<&mut Gradients>,
) -> Result<(f64, f64)> {
    let n_z = enc.latent_dim;
    let enc_trace = enc.net.forward_trace(&enc.features(steps)?)?;
    let (mean, log_var) = enc_trace.output().split_at(n_z);
    let std: Vec<f64> = log_var.iter().map(|v| (0.5 * v).exp()).collect();
    let z: Vec<f64> = (0..n_z).map(|i| mean[i] + std[i] * u[i]).collect();
    let kl = kl_to_standard_normal(mean, log_var);

    let mut rec = 0.0;
    let mut dz = vec![0.0; n_z];
    let mut grads = grads;
    for step in steps.iter().take(enc.window) {
        let (_, trace) = dec.forward_with_intermediates(&z, &step.obs)?;
        let (loss, d_out) = step_reconstruction(dec.head(), trace.output(), &step.action)?;
        rec += loss;
        if let Some(g) = grads.as_deref_mut() {
            let d_in = dec.net().backward(&trace, &d_out, &mut g.decoder);
            for (a, b) in dz.iter_mut().zip(&d_in[dec.obs_dim()..]) {
                *a += b;
            }
        }
    }

    if let Some(g) = grads {
        let mut d_enc = vec![0.0; 2 * n_z];
        for i in 0..n_z {
            d_enc[i] = dz[i] + lambda * mean[i];
            d_enc[n_z + i] = dz[i] * u[i] * std[i] * 0.5 + lambda * (log_var[i].exp() - 1.0) * 0.5;
        }
        enc.net.backward(&enc_trace, &d_enc, &mut g.encoder);
    }
    Ok((rec, kl))
}

fn window_noise(seed: u64, index: usize, n_z: usize) -> Vec<f64> {
    let mut r = rng::substream(seed, &[index as u64]);
    (0..n_z).map(|_| r.sample(StandardNormal)).collect()
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn evaluate(
    enc: &Encoder,
    dec: &PolicyDecoder,
    demo: &Demonstration,
    weights: LossWeights,
    seed: u64,
    mut grads: Option<&mut Gradients>,
) -> Result<LossTerms> {
    check_pair(enc, dec)?;
    demo.check(dec.obs_dim(), dec.head())?;
    let mut terms = LossTerms::default();
    for (k, chunk) in demo.steps.chunks(enc.window).enumerate() {
        let u = window_noise(seed, k, enc.latent_dim);
        let (rec, kl) = window_pass(enc, dec, chunk, &u, weights.lambda, grads.as_deref_mut())?;
        terms.reconstruction += rec;
        terms.kl += kl;
    }
    let sq = squared_norm(enc.net.params()) + squared_norm(dec.net().params());
    terms.weight_decay = 0.5 * weights.weight_decay * sq;
    terms.total = terms.reconstruction + weights.lambda * terms.kl + terms.weight_decay;
    if let Some(g) = grads {
        add_weight_decay(g, enc, dec, weights.weight_decay);
    }
    Ok(terms)
}

fn add_weight_decay(g: &mut Gradients, enc: &Encoder, dec: &PolicyDecoder, wd: f64) {
    for (gi, p) in g.encoder.iter_mut().zip(enc.net.params()) {
        *gi += wd * p;
    }
    for (gi, p) in g.decoder.iter_mut().zip(dec.net().params()) {
        *gi += wd * p;
    }
}

/// Single-sample reparameterized cVAE loss of one demonstration.
pub fn cvae_loss(
    enc: &Encoder,
    dec: &PolicyDecoder,
    demo: &Demonstration,
    weights: LossWeights,
    seed: u64,
) -> Result<LossTerms> {
    evaluate(enc, dec, demo, weights, seed, None)
}

/// Exact gradient of [`cvae_loss`] (same seed) with respect to encoder and decoder weights.
pub fn backprop(
    enc: &Encoder,
    dec: &PolicyDecoder,
    demo: &Demonstration,
    weights: LossWeights,
    seed: u64,
) -> Result<(LossTerms, Gradients)> {
    let mut g = Gradients::zeros(enc, dec);
    let terms = evaluate(enc, dec, demo, weights, seed, Some(&mut g))?;
    Ok((terms, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneArch {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub head: ActionHead,
    pub decoder_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub window: usize,
}

impl CloneArch {
    pub fn new(obs_dim: usize, head: ActionHead) -> Self {
        Self {
            latent_dim: 5,
            obs_dim,
            head,
            decoder_hidden: vec![32, 32],
            encoder_hidden: vec![32, 32],
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloneConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            n_iters: 4000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl CloneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("clone lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "clone learning_rate > 0, weight_decay >= 0 and batch_size >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloneLogEntry {
    pub iter: usize,
    /// Per-window batch means.
    pub reconstruction: f64,
    pub kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct CloneOutput {
    pub decoder: PolicyDecoder,
    pub encoder: Encoder,
    pub prior: DiagonalGaussian,
    pub log: Vec<CloneLogEntry>,
}

/// Trains encoder and decoder with Adam on minibatches of windows. Each
/// batch entry picks a demonstration uniformly, then one of its windows, so
/// long demonstrations do not outweigh short ones. The batch objective is the mean window loss
/// plus the weight-decay penalty.
pub fn train_clone(demos: &[Demonstration], arch: &CloneArch, cfg: &CloneConfig) -> Result<CloneOutput> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::InvalidConfig("no demonstrations to clone".into()));
    }
    for d in demos {
        d.check(arch.obs_dim, arch.head)?;
    }
    let mut init_rng = rng::substream(cfg.seed, &[0]);
    let mut dec = PolicyDecoder::init(
        arch.obs_dim,
        arch.latent_dim,
        &arch.decoder_hidden,
        arch.head,
        &mut init_rng,
    )?;
    let mut enc = Encoder::init(
        arch.window,
        arch.obs_dim,
        arch.latent_dim,
        &arch.encoder_hidden,
        arch.head,
        &mut init_rng,
    )?;
    debug_assert_eq!(
        dec.net().layer_dims(),
        decoder_layer_dims(arch.obs_dim, arch.latent_dim, &arch.decoder_hidden, arch.head)
    );

    let windows: Vec<Vec<&[DemoStep]>> = demos
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| d.steps.chunks(arch.window).collect())
        .collect();
    if windows.is_empty() {
        return Err(Error::InvalidConfig("all demonstrations are empty".into()));
    }
    let hyper = AdamHyper {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    let mut enc_adam = AdamState::new(enc.net.params().len());
    let mut dec_adam = AdamState::new(dec.net().params().len());
    let mut log = Vec::with_capacity(cfg.n_iters);
    let scale = 1.0 / cfg.batch_size as f64;

    for iter in 0..cfg.n_iters {
        let mut r = rng::substream(cfg.seed, &[1, iter as u64]);
        let mut g = Gradients::zeros(&enc, &dec);
        let mut g_batch = Gradients::zeros(&enc, &dec);
        let (mut rec_sum, mut kl_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let demo = &windows[r.random_range(0..windows.len())];
            let w = demo[r.random_range(0..demo.len())];
            let u: Vec<f64> = (0..arch.latent_dim).map(|_| r.sample(StandardNormal)).collect();
            let (rec, kl) = window_pass(&enc, &dec, w, &u, cfg.lambda, Some(&mut g_batch))?;
            rec_sum += rec;
            kl_sum += kl;
        }
        for (a, b) in g.encoder.iter_mut().zip(&g_batch.encoder) {
            *a = b * scale;
        }
        for (a, b) in g.decoder.iter_mut().zip(&g_batch.decoder) {
            *a = b * scale;
        }
        add_weight_decay(&mut g, &enc, &dec, cfg.weight_decay);
        let (rec, kl) = (rec_sum * scale, kl_sum * scale);
        log.push(CloneLogEntry {
            iter,
            reconstruction: rec,
            kl,
            loss: rec + cfg.lambda * kl,
        });
        enc_adam.update(enc.net.params_mut(), &g.encoder, &hyper);
        dec_adam.update(dec.net_mut().params_mut(), &g.decoder, &hyper);
    }

    Ok(CloneOutput {
        decoder: dec,
        encoder: enc,
        prior: DiagonalGaussian::standard(arch.latent_dim),
        log,
    })
}
