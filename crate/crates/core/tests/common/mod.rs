//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct BoundsCase {
    pub kl: f64,
    pub n_envs: usize,
    pub delta: f64,
    pub cost: f64,
    pub n_cost_samples: usize,
    pub delta_prime: f64,
    pub sample_bound: f64,
    pub regularizer: f64,
    pub pac_bound: f64,
    pub sample_convergence_bound: f64,
    pub final_bound: f64,
}

#[derive(Debug, Deserialize)]
pub struct EsCase {
    pub cost: f64,
    pub z: Vec<f64>,
    pub posterior_mu: Vec<f64>,
    pub posterior_log_var: Vec<f64>,
    pub prior_mu: Vec<f64>,
    pub prior_log_var: Vec<f64>,
    pub sqrt_reg: f64,
    pub n_envs: usize,
    pub expected_mu: Vec<f64>,
    pub expected_log_var: Vec<f64>,
}

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn load_fixture<T: serde::de::DeserializeOwned>(name: &str) -> Vec<T> {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture file");
    serde_json::from_str(&text).expect("fixture json")
}

pub fn rel_err(actual: f64, expected: f64) -> f64 {
    if actual == expected {
        0.0
    } else {
        (actual - expected).abs() / expected.abs().max(f64::MIN_POSITIVE)
    }
}

use pac_imitation::cloning::{backprop, cvae_loss, DemoStep, Demonstration, Encoder, LossWeights};
use pac_imitation::policy::{Action, ActionHead, Mlp, Observation, PolicyDecoder};
use rand::Rng;

/// A random encoder/decoder pair (under 200 weights each) with a random demo.
pub fn random_cvae(seed: u64) -> (Encoder, PolicyDecoder, Demonstration, LossWeights) {
    let mut r = pac_imitation::rng::substream(seed, &[]);
    let obs_dim = r.random_range(1..=3);
    let latent = r.random_range(1..=3);
    let window = r.random_range(1..=3);
    let head = if r.random_bool(0.5) {
        ActionHead::Discrete { n: r.random_range(2..=4) }
    } else {
        ActionHead::Continuous { dim: r.random_range(1..=2) }
    };
    let hidden = vec![r.random_range(2..=5)];
    let enc = Encoder::init(window, obs_dim, latent, &hidden, head, &mut r).unwrap();
    let dec = PolicyDecoder::init(obs_dim, latent, &hidden, head, &mut r).unwrap();
    assert!(enc.net().params().len() <= 200 && dec.net().params().len() <= 200);
    let len = r.random_range(1..=7);
    let steps = (0..len)
        .map(|_| DemoStep {
            obs: Observation::new((0..obs_dim).map(|_| r.random_range(-1.0..1.0)).collect()),
            action: match head {
                ActionHead::Discrete { n } => Action::Discrete(r.random_range(0..n)),
                ActionHead::Continuous { dim } => Action::Continuous((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()),
            },
        })
        .collect();
    let demo = Demonstration {
        task_tag: "random".into(),
        mode: None,
        steps,
    };
    let weights = LossWeights {
        lambda: r.random_range(0.01..1.0),
        weight_decay: r.random_range(0.0..0.01),
    };
    (enc, dec, demo, weights)
}

/// Largest relative disagreement between backprop and central differences,
/// with relative error measured against `max(|fd|, |analytic|, 1e-3)`.
pub fn worst_gradient_error(seed: u64) -> f64 {
    let (enc, dec, demo, weights) = random_cvae(seed);
    let noise_seed = seed ^ 0xABCD;
    let (_, g) = backprop(&enc, &dec, &demo, weights, noise_seed).unwrap();
    let loss = |e: &Encoder, d: &PolicyDecoder| cvae_loss(e, d, &demo, weights, noise_seed).unwrap().total;
    let h = 1e-5;
    let err = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
    let mut worst = 0.0_f64;
    for i in 0..g.encoder.len() {
        let (mut up, mut dn) = (enc.clone(), enc.clone());
        up.net_mut().params_mut()[i] += h;
        dn.net_mut().params_mut()[i] -= h;
        worst = worst.max(err((loss(&up, &dec) - loss(&dn, &dec)) / (2.0 * h), g.encoder[i]));
    }
    let shifted = |i: usize, by: f64| {
        let mut params = dec.net().params().to_vec();
        params[i] += by;
        let net = Mlp::from_params(dec.net().layer_dims().to_vec(), params).unwrap();
        PolicyDecoder::new(dec.obs_dim(), dec.latent_dim(), dec.head(), net).unwrap()
    };
    for i in 0..g.decoder.len() {
        let (up, dn) = (shifted(i, h), shifted(i, -h));
        worst = worst.max(err((loss(&enc, &up) - loss(&enc, &dn)) / (2.0 * h), g.decoder[i]));
    }
    worst
}
