//! Natural evolution strategies on the PAC-Bayes objective.
//!
//! Each epoch draws `m` latents per training environment from the current
//! posterior together with their reflections about the mean, rolls all of
//! them out, and forms the score-function estimate of the gradient of
//! `C_S(P) + sqrt(R(P, P0))`. The regularizer gradient is estimated the same
//! way through the log-density ratio. The estimate is preconditioned by the
//! inverse Fisher diagonal and fed to Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{pac_bound, regularizer, BoundInputs};
use crate::envs::{rollout, Environment};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{DiagonalGaussian, PsiVector, LOGVAR_MAX, LOGVAR_MIN};
use crate::optim::AdamHyper;
use crate::policy::PolicyDecoder;
use crate::rng;

pub use crate::optim::AdamState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NesConfig {
    /// `m`; each sample is paired with its mirror image, giving `2m` rollouts per environment.
    pub samples_per_env: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_epochs: usize,
    pub seed: u64,
}

impl Default for NesConfig {
    fn default() -> Self {
        Self {
            samples_per_env: 4,
            learning_rate: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_epochs: 500,
            seed: 0,
        }
    }
}

impl NesConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.samples_per_env >= 1
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid NES settings: {self:?}")))
        }
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Anything that assigns a cost to a latent in one of `n_envs` environments.
pub trait CostOracle: Sync {
    fn n_envs(&self) -> usize;
    fn cost(&self, env: usize, z: &[f64]) -> Result<f64>;
}

/// Rollout costs of a frozen decoder on a fixed environment set.
pub struct RolloutOracle<'a> {
    pub envs: &'a [Environment],
    pub policy: &'a PolicyDecoder,
}

impl CostOracle for RolloutOracle<'_> {
    fn n_envs(&self) -> usize {
        self.envs.len()
    }

    fn cost(&self, env: usize, z: &[f64]) -> Result<f64> {
        Ok(rollout(&self.envs[env], self.policy, z)?.cost)
    }
}

/// Synthetic cost `clip(|z - centre|^2 / scale, 0, 1)`, identical in every environment.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub centre: Vec<f64>,
    pub scale: f64,
    pub n_envs: usize,
}

impl CostOracle for QuadraticCost {
    fn n_envs(&self) -> usize {
        self.n_envs
    }

    fn cost(&self, _env: usize, z: &[f64]) -> Result<f64> {
        check_dim("quadratic cost latent", self.centre.len(), z.len())?;
        let d: f64 = z.iter().zip(&self.centre).map(|(a, b)| (a - b).powi(2)).sum();
        Ok((d / self.scale).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub empirical_term: PsiVector,
    pub regularizer_term: PsiVector,
    pub combined: PsiVector,
    pub mean_cost: f64,
}

/// Weight of the log-density ratio inside the combined integrand.
fn ratio_weight(sqrt_reg: f64, n_envs: usize) -> f64 {
    1.0 / (4.0 * n_envs as f64 * sqrt_reg)
}

/// `(cost + ln(N_psi(z) / N_psi0(z)) / (4 N sqrt(R))) * score(z)`.
pub fn es_cost_term(
    cost: f64,
    z: &[f64],
    posterior: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    sqrt_reg: f64,
    n_envs: usize,
) -> Result<PsiVector> {
    let ratio = posterior.log_density(z)? - prior.log_density(z)?;
    let w = cost + ratio_weight(sqrt_reg, n_envs) * ratio;
    Ok(posterior.score(z)?.scaled(w))
}

/// The reflection of `z` about `mean`.
pub fn antithetic_mate(z: &[f64], mean: &[f64]) -> Vec<f64> {
    z.iter().zip(mean).map(|(z, m)| m - (z - m)).collect()
}

/// Antithetic score-function estimate of the gradient of the square-root
/// PAC-Bayes bound. Environment `j` draws its samples from the `(seed, j)` substream.
pub fn estimate_gradient<O: CostOracle + ?Sized>(
    posterior: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    oracle: &O,
    cfg: &NesConfig,
    bound_inputs: &BoundInputs,
    seed: u64,
) -> Result<GradientEstimate> {
    cfg.validate()?;
    check_dim("posterior/prior latent", prior.latent_dim(), posterior.latent_dim())?;
    let n_envs = oracle.n_envs();
    if n_envs == 0 {
        return Err(Error::InvalidConfig("no training environments".into()));
    }
    let m = cfg.samples_per_env;
    let kl = posterior.kl_divergence(prior)?;
    let sqrt_reg = regularizer(kl, bound_inputs.n_envs, bound_inputs.delta).sqrt();

    let latents: Vec<(usize, Vec<f64>)> = (0..n_envs)
        .flat_map(|j| {
            let draws = posterior.sample_with(&mut rng::substream(seed, &[j as u64]), m);
            let mean = posterior.mean().to_vec();
            draws.into_iter().flat_map(move |z| {
                let mate = antithetic_mate(&z, &mean);
                [(j, z), (j, mate)]
            })
        })
        .collect();

    let costs: Vec<f64> = latents
        .par_iter()
        .enumerate()
        .map(|(k, (j, z))| {
            oracle
                .cost(*j, z)
                .map(|c| c.clamp(0.0, 1.0))
                .map_err(|e| Error::RolloutFailure {
                    env: *j,
                    latent: k % (2 * m),
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let n_z = posterior.latent_dim();
    let mut empirical = PsiVector::zeros(n_z);
    let mut reg = PsiVector::zeros(n_z);
    let rw = ratio_weight(sqrt_reg, bound_inputs.n_envs);
    for ((_, z), cost) in latents.iter().zip(&costs) {
        let score = posterior.score(z)?;
        let ratio = posterior.log_density(z)? - prior.log_density(z)?;
        empirical.add_scaled(&score, *cost);
        reg.add_scaled(&score, rw * ratio);
    }
    let norm = 1.0 / (2 * m * n_envs) as f64;
    let empirical = empirical.scaled(norm);
    let reg = reg.scaled(norm);
    let mut combined = empirical.clone();
    combined.add_scaled(&reg, 1.0);
    Ok(GradientEstimate {
        empirical_term: empirical,
        regularizer_term: reg,
        combined,
        mean_cost: costs.iter().sum::<f64>() * norm,
    })
}

/// Preconditions by the inverse Fisher diagonal: `mu` entries times `sigma^2`, `log_var` entries times 2.
pub fn natural_gradient(grad: &PsiVector, posterior: &DiagonalGaussian) -> PsiVector {
    let fisher = posterior.fisher_diagonal();
    PsiVector {
        mu: grad.mu.iter().zip(&fisher.mu).map(|(g, f)| g / f).collect(),
        log_var: grad.log_var.iter().zip(&fisher.log_var).map(|(g, f)| g / f).collect(),
    }
}

/// One Adam step on `psi`; the new `log_var` is re-clamped.
pub fn adam_step(state: &AdamState, psi: &PsiVector, grad: &PsiVector, cfg: &NesConfig) -> (AdamState, PsiVector) {
    let mut state = state.clone();
    let mut flat = psi.to_flat();
    state.update(&mut flat, &grad.to_flat(), &cfg.adam());
    let n = psi.latent_dim();
    let mut out = PsiVector {
        mu: flat[..n].to_vec(),
        log_var: flat[n..].to_vec(),
    };
    for v in &mut out.log_var {
        *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX);
    }
    (state, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean rollout cost of the epoch's samples, drawn before the update.
    pub mean_cost: f64,
    pub kl: f64,
    /// `mean_cost + sqrt(R)` at the pre-update posterior.
    pub pac_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub posterior: DiagonalGaussian,
    pub history: Vec<EpochRecord>,
}

/// Runs `cfg.n_epochs` of estimate, precondition, Adam, starting from the prior.
/// Epoch `e` samples from the `(cfg.seed, e)` substream.
pub fn finetune<O: CostOracle + ?Sized>(
    prior: &DiagonalGaussian,
    oracle: &O,
    cfg: &NesConfig,
    bound_inputs: &BoundInputs,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let mut posterior = prior.clone();
    let mut psi = posterior.psi();
    let mut state = AdamState::new(2 * prior.latent_dim());
    let mut history = Vec::with_capacity(cfg.n_epochs);
    for epoch in 0..cfg.n_epochs {
        let est = estimate_gradient(
            &posterior,
            prior,
            oracle,
            cfg,
            bound_inputs,
            rng::derive(cfg.seed, &[epoch as u64]),
        )?;
        let kl = posterior.kl_divergence(prior)?;
        let record = EpochRecord {
            epoch,
            mean_cost: est.mean_cost,
            kl,
            pac_estimate: pac_bound(est.mean_cost, kl, bound_inputs.n_envs, bound_inputs.delta),
        };
        if epoch % 25 == 0 || epoch + 1 == cfg.n_epochs {
            log::info!(
                "epoch {epoch}: mean cost {:.4}, kl {:.4}, pac estimate {:.4}",
                record.mean_cost,
                record.kl,
                record.pac_estimate
            );
        }
        history.push(record);
        let nat = natural_gradient(&est.combined, &posterior);
        let (s, p) = adam_step(&state, &psi, &nat, cfg);
        state = s;
        psi = p;
        posterior = DiagonalGaussian::from_psi(&psi)?;
    }
    Ok(FinetuneOutput { posterior, history })
}
