//! PAC-Bayes bound arithmetic.
//!
//! Two complexity terms appear here and they are deliberately different:
//! the square-root bound divides by `2N`, while the KL-inverse bound used for
//! the final certificate divides by `N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the bisection bracket for the KL inverse.
const Q_CEILING: f64 = 1.0 - 1e-15;
const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `KL(posterior || prior)`.
    pub kl: f64,
    pub n_envs: usize,
    pub delta: f64,
    pub delta_prime: f64,
    pub n_cost_samples: usize,
}

impl BoundInputs {
    pub fn new(
        kl: f64,
        n_envs: usize,
        delta: f64,
        delta_prime: f64,
        n_cost_samples: usize,
    ) -> Result<Self> {
        let inputs = Self {
            kl,
            n_envs,
            delta,
            delta_prime,
            n_cost_samples,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.kl >= 0.0) || !self.kl.is_finite() {
            return bad("kl must be finite and nonnegative");
        }
        if self.n_envs == 0 || self.n_cost_samples == 0 {
            return bad("n_envs and n_cost_samples must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.delta_prime > 0.0 && self.delta_prime < 1.0)
        {
            return bad("delta and delta_prime must lie in (0, 1)");
        }
        if self.delta + self.delta_prime >= 1.0 {
            return bad("delta + delta_prime must be below 1");
        }
        Ok(())
    }

    pub fn with_kl(self, kl: f64) -> Self {
        Self { kl, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub empirical_cost_estimate: f64,
    pub sample_convergence_bound: f64,
    pub regularizer: f64,
    /// Square-root bound evaluated at the sample-convergence bound. May exceed 1.
    pub pac_bound: f64,
    pub final_bound: f64,
    /// Set when the final bound saturates at 1 and says nothing.
    pub vacuous: bool,
    pub guaranteed_success: f64,
    pub inputs: BoundInputs,
}

impl Certificate {
    /// Rebuilds the certificate from its persisted inputs alone.
    pub fn recompute(&self) -> Result<Certificate> {
        assemble_certificate(self.empirical_cost_estimate, &self.inputs)
    }
}

fn complexity_log_term(n_envs: usize, delta: f64) -> f64 {
    (2.0 * (n_envs as f64).sqrt() / delta).ln()
}

/// `(KL + ln(2 sqrt(N) / delta)) / (2N)`.
pub fn regularizer(kl: f64, n_envs: usize, delta: f64) -> f64 {
    (kl + complexity_log_term(n_envs, delta)) / (2.0 * n_envs as f64)
}

/// Empirical cost plus the square root of the regularizer; not clipped.
pub fn pac_bound(empirical_cost: f64, kl: f64, n_envs: usize, delta: f64) -> f64 {
    empirical_cost + regularizer(kl, n_envs, delta).sqrt()
}

/// Binary relative entropy `KL(Bern(p) || Bern(q))` with `0 ln 0 = 0`.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let head = if p > 0.0 { p * (p / q).ln() } else { 0.0 };
    let tail = if p < 1.0 {
        // ln_1p keeps the tail accurate when q is tiny
        (1.0 - p) * ((-p).ln_1p() - (-q).ln_1p())
    } else {
        0.0
    };
    head + tail
}

/// Largest `q` in `[p, 1]` with `kl_bernoulli(p, q) <= c`.
///
/// `KL(p || q)` is increasing in `q` on `[p, 1)`, so plain bisection
/// converges. The search runs until the bracket cannot shrink in floating
/// point (well below the 1e-12 target) and returns the upper end, which
/// errs on the side of a larger bound.
pub fn kl_inverse(p: f64, c: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if c <= 0.0 || p >= 1.0 {
        return p;
    }
    if kl_bernoulli(p, Q_CEILING) <= c {
        return 1.0;
    }
    let (mut lo, mut hi) = (p, Q_CEILING);
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if kl_bernoulli(p, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Relative-entropy Chernoff bound on the mean cost given `L` sampled policies.
pub fn sample_convergence_bound(cost_estimate: f64, n_cost_samples: usize, delta_prime: f64) -> f64 {
    kl_inverse(cost_estimate, (2.0 / delta_prime).ln() / n_cost_samples as f64)
}

/// KL-inverse form of the generalization bound, divisor `N`.
pub fn final_bound(sample_bound: f64, kl: f64, n_envs: usize, delta: f64) -> f64 {
    kl_inverse(sample_bound, (kl + complexity_log_term(n_envs, delta)) / n_envs as f64)
}

pub fn assemble_certificate(cost_estimate: f64, inputs: &BoundInputs) -> Result<Certificate> {
    inputs.validate()?;
    if !(0.0..=1.0).contains(&cost_estimate) {
        return Err(Error::CostOutOfRange(cost_estimate));
    }
    let sample_bound =
        sample_convergence_bound(cost_estimate, inputs.n_cost_samples, inputs.delta_prime);
    let reg = regularizer(inputs.kl, inputs.n_envs, inputs.delta);
    let raw_final = final_bound(sample_bound, inputs.kl, inputs.n_envs, inputs.delta);
    let final_bound = raw_final.clamp(0.0, 1.0);
    Ok(Certificate {
        empirical_cost_estimate: cost_estimate,
        sample_convergence_bound: sample_bound,
        regularizer: reg,
        pac_bound: sample_bound + reg.sqrt(),
        final_bound,
        vacuous: final_bound >= 1.0,
        guaranteed_success: 1.0 - final_bound,
        inputs: *inputs,
    })
}
