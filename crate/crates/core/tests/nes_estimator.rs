mod common;

use common::{load_fixture, EsCase};
use pac_imitation::bounds::{regularizer, BoundInputs};
use pac_imitation::gaussian::{DiagonalGaussian, PsiVector};
use pac_imitation::nes::{antithetic_mate, es_cost_term, estimate_gradient, natural_gradient, CostOracle, NesConfig, QuadraticCost};
use pac_imitation::rng;
use pac_imitation::Result;
use proptest::prelude::*;

fn quadratic_gradient(post: &DiagonalGaussian, centre: &[f64], scale: f64) -> PsiVector {
    PsiVector {
        mu: post.mean().iter().zip(centre).map(|(m, c)| 2.0 * (m - c) / scale).collect(),
        log_var: post.variance().iter().map(|v| v / scale).collect(),
    }
}

fn kl_gradient_to_standard(post: &DiagonalGaussian) -> PsiVector {
    PsiVector {
        mu: post.mean().to_vec(),
        log_var: post.variance().iter().map(|v| 0.5 * (v - 1.0)).collect(),
    }
}

struct ZeroCost(usize);

impl CostOracle for ZeroCost {
    fn n_envs(&self) -> usize {
        self.0
    }
    fn cost(&self, _: usize, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

#[test]
fn es_cost_term_matches_extended_precision() {
    let cases: Vec<EsCase> = load_fixture("es_cost_term.json");
    for (i, c) in cases.iter().enumerate() {
        let post = DiagonalGaussian::new(c.posterior_mu.clone(), c.posterior_log_var.clone()).unwrap();
        let prior = DiagonalGaussian::new(c.prior_mu.clone(), c.prior_log_var.clone()).unwrap();
        let got = es_cost_term(c.cost, &c.z, &post, &prior, c.sqrt_reg, c.n_envs).unwrap();
        let scale = c
            .expected_mu
            .iter()
            .chain(&c.expected_log_var)
            .fold(0.0_f64, |a, v| a.max(v.abs()));
        for (g, w) in got.to_flat().iter().zip(c.expected_mu.iter().chain(&c.expected_log_var)) {
            assert!((g - w).abs() <= 1e-12 * scale.max(1e-300), "case {i}: {g} vs {w}");
        }
    }
}

#[test]
fn quadratic_estimate_matches_closed_form() {
    let post = DiagonalGaussian::new(vec![0.5, -0.5], vec![0.0, 0.2]).unwrap();
    let oracle = QuadraticCost {
        centre: vec![0.2, -0.3],
        scale: 100.0,
        n_envs: 100,
    };
    let cfg = NesConfig { samples_per_env: 2000, ..Default::default() };
    let inputs = BoundInputs::new(0.0, oracle.n_envs, 0.009, 0.001, 1).unwrap();
    let est = estimate_gradient(&post, &post, &oracle, &cfg, &inputs, 11).unwrap();
    let want = quadratic_gradient(&post, &oracle.centre, oracle.scale);
    assert_eq!(est.regularizer_term, PsiVector::zeros(2));
    for (g, w) in est.empirical_term.to_flat().iter().zip(want.to_flat()) {
        assert!((g - w).abs() <= 0.05 * w.abs(), "{g} vs {w}");
    }
}

#[test]
fn regularizer_term_matches_kl_gradient() {
    let prior = DiagonalGaussian::standard(2);
    let post = DiagonalGaussian::new(vec![0.5, -0.3], vec![-0.4, 0.3]).unwrap();
    let n = 50;
    let cfg = NesConfig { samples_per_env: 5000, ..Default::default() };
    let inputs = BoundInputs::new(0.0, n, 0.009, 0.001, 1).unwrap();
    let est = estimate_gradient(&post, &prior, &ZeroCost(n), &cfg, &inputs, 12).unwrap();
    let kl = post.kl_divergence(&prior).unwrap();
    let factor = 1.0 / (4.0 * n as f64 * regularizer(kl, n, 0.009).sqrt());
    let want = kl_gradient_to_standard(&post).scaled(factor);
    assert_eq!(est.empirical_term, PsiVector::zeros(2));
    for (g, w) in est.regularizer_term.to_flat().iter().zip(want.to_flat()) {
        assert!((g - w).abs() <= 0.03 * w.abs(), "{g} vs {w}");
    }
}

#[test]
fn empirical_term_is_unbiased() {
    let post = DiagonalGaussian::new(vec![0.3, -0.2], vec![0.1, -0.3]).unwrap();
    let oracle = QuadraticCost {
        centre: vec![1.0, 0.5],
        scale: 100.0,
        n_envs: 1,
    };
    let cfg = NesConfig { samples_per_env: 10, ..Default::default() };
    let inputs = BoundInputs::new(0.0, 1, 0.009, 0.001, 1).unwrap();
    let runs = 10_000;
    let mut sum = [0.0; 4];
    let mut sum_sq = [0.0; 4];
    for r in 0..runs {
        let est = estimate_gradient(&post, &post, &oracle, &cfg, &inputs, rng::derive(99, &[r])).unwrap();
        for (k, v) in est.empirical_term.to_flat().into_iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let want = quadratic_gradient(&post, &oracle.centre, oracle.scale).to_flat();
    for k in 0..4 {
        let mean = sum[k] / runs as f64;
        let var = sum_sq[k] / runs as f64 - mean * mean;
        let se = (var / runs as f64).sqrt();
        assert!((mean - want[k]).abs() <= 3.0 * se, "coordinate {k}: {mean} vs {} (se {se})", want[k]);
    }
}

#[test]
fn natural_gradient_matches_monte_carlo_fisher() {
    let post = DiagonalGaussian::new(vec![0.4, -1.0, 2.0], vec![-0.5, 0.3, 0.9]).unwrap();
    let g = PsiVector {
        mu: vec![0.3, -0.7, 0.05],
        log_var: vec![-0.2, 0.4, 1.1],
    };
    let samples = post.sample(3, 1_000_000);
    let mut fisher = vec![0.0; 6];
    for z in &samples {
        for (f, s) in fisher.iter_mut().zip(post.score(z).unwrap().to_flat()) {
            *f += s * s;
        }
    }
    let nat = natural_gradient(&g, &post).to_flat();
    for ((n, gi), f) in nat.iter().zip(g.to_flat()).zip(&fisher) {
        let mc = gi / (f / samples.len() as f64);
        assert!((n - mc).abs() <= 0.02 * mc.abs(), "{n} vs {mc}");
    }
}

proptest! {
    #[test]
    fn mates_cancel_mean_scores(
        mu in prop::collection::vec(-5.0..5.0_f64, 1..6),
        seed in any::<u64>(),
        lv in -4.0..3.0_f64,
    ) {
        let post = DiagonalGaussian::new(mu.clone(), vec![lv; mu.len()]).unwrap();
        for z in post.sample(seed, 20) {
            let mate = antithetic_mate(&z, post.mean());
            let (a, b) = (post.score(&z).unwrap(), post.score(&mate).unwrap());
            for i in 0..mu.len() {
                prop_assert!((a.mu[i] + b.mu[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn estimates_are_finite_and_split_exactly(
        mu in prop::collection::vec(-2.0..2.0_f64, 2),
        lv in prop::collection::vec(-3.0..2.0_f64, 2),
        seed in any::<u64>(),
    ) {
        let post = DiagonalGaussian::new(mu, lv).unwrap();
        let prior = DiagonalGaussian::standard(2);
        let oracle = QuadraticCost { centre: vec![0.5, 0.5], scale: 4.0, n_envs: 3 };
        let inputs = BoundInputs::new(0.0, 3, 0.009, 0.001, 1).unwrap();
        let est = estimate_gradient(&post, &prior, &oracle, &NesConfig::default(), &inputs, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&est.mean_cost));
        let mut sum = est.empirical_term.clone();
        sum.add_scaled(&est.regularizer_term, 1.0);
        prop_assert_eq!(sum, est.combined.clone());
        prop_assert!(est.combined.to_flat().iter().all(|v| v.is_finite()));
    }
}
