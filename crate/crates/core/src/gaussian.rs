//! Diagonal Gaussian over the latent policy space.
//!
//! The distribution is stored in the `(mu, log_var)` parameterization, which
//! is also the coordinate system used by the optimizer. `sigma` is a derived
//! view. `log_var` is clamped to `[LOGVAR_MIN, LOGVAR_MAX]` on construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;

pub const LOGVAR_MIN: f64 = -16.0;
pub const LOGVAR_MAX: f64 = 8.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A vector in parameter space, split into its mean and log-variance blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiVector {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl PsiVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![0.0; n],
            log_var: vec![0.0; n],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    /// Flattened view `[mu..., log_var...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.mu.iter().chain(&self.log_var).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::DimensionMismatch {
                context: "psi vector",
                expected: flat.len() + 1,
                actual: flat.len(),
            });
        }
        let n = flat.len() / 2;
        Ok(Self {
            mu: flat[..n].to_vec(),
            log_var: flat[n..].to_vec(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mu: self.mu.iter().map(|v| v * factor).collect(),
            log_var: self.log_var.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &PsiVector, factor: f64) {
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            *a += factor * b;
        }
        for (a, b) in self.log_var.iter_mut().zip(&other.log_var) {
            *a += factor * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.mu
            .iter()
            .chain(&self.log_var)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian", into = "RawGaussian")]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGaussian {
    n_z: usize,
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl TryFrom<RawGaussian> for DiagonalGaussian {
    type Error = Error;

    fn try_from(raw: RawGaussian) -> Result<Self> {
        check_dim("gaussian n_z", raw.n_z, raw.mu.len())?;
        DiagonalGaussian::new(raw.mu, raw.log_var)
    }
}

impl From<DiagonalGaussian> for RawGaussian {
    fn from(g: DiagonalGaussian) -> Self {
        RawGaussian {
            n_z: g.mu.len(),
            mu: g.mu,
            log_var: g.log_var,
        }
    }
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidConfig("latent dimension must be at least 1".into()));
        }
        check_dim("gaussian log_var", mu.len(), log_var.len())?;
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("gaussian parameters must be finite".into()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(Self { mu, log_var })
    }

    /// The standard normal `N(0, I)`.
    pub fn standard(n_z: usize) -> Self {
        assert!(n_z >= 1, "latent dimension must be at least 1");
        Self {
            mu: vec![0.0; n_z],
            log_var: vec![0.0; n_z],
        }
    }

    pub fn from_std_dev(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("standard deviations must be positive".into()));
        }
        let log_var = sigma.iter().map(|s| 2.0 * s.ln()).collect();
        Self::new(mu, log_var)
    }

    pub fn from_psi(psi: &PsiVector) -> Result<Self> {
        Self::new(psi.mu.clone(), psi.log_var.clone())
    }

    pub fn psi(&self) -> PsiVector {
        PsiVector {
            mu: self.mu.clone(),
            log_var: self.log_var.clone(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (0.5 * v).exp()).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// Maps a standard-normal draw `u` to `mu + sigma * u`.
    pub fn transform(&self, u: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(u)
            .map(|((m, v), u)| m + (0.5 * v).exp() * u)
            .collect()
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let u: Vec<f64> = (0..self.latent_dim())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                self.transform(&u)
            })
            .collect()
    }

    pub fn sample(&self, seed: u64, count: usize) -> Vec<Vec<f64>> {
        self.sample_with(&mut rng::substream(seed, &[]), count)
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim("log_density", self.latent_dim(), z.len())?;
        Ok(self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, v), z)| {
                let d = z - m;
                -HALF_LN_2PI - 0.5 * v - 0.5 * d * d * (-v).exp()
            })
            .sum())
    }

    /// Gradient of `log_density(z)` with respect to `(mu, log_var)`.
    pub fn score(&self, z: &[f64]) -> Result<PsiVector> {
        check_dim("score", self.latent_dim(), z.len())?;
        let mut out = PsiVector::zeros(self.latent_dim());
        for i in 0..self.latent_dim() {
            let inv_var = (-self.log_var[i]).exp();
            let d = z[i] - self.mu[i];
            out.mu[i] = d * inv_var;
            out.log_var[i] = 0.5 * (d * d * inv_var - 1.0);
        }
        Ok(out)
    }

    /// `KL(self || other)`.
    pub fn kl_divergence(&self, other: &DiagonalGaussian) -> Result<f64> {
        check_dim("kl_divergence", self.latent_dim(), other.latent_dim())?;
        let kl: f64 = (0..self.latent_dim())
            .map(|i| {
                let (vp, vq) = (self.log_var[i], other.log_var[i]);
                let d = self.mu[i] - other.mu[i];
                0.5 * (vq - vp) + 0.5 * ((vp - vq).exp() + d * d * (-vq).exp()) - 0.5
            })
            .sum();
        // rounding can leave a tiny negative residue for identical arguments
        Ok(kl.max(0.0))
    }

    /// Diagonal of the Fisher information in `(mu, log_var)` coordinates.
    /// The matrix has no off-diagonal entries for this family.
    pub fn fisher_diagonal(&self) -> PsiVector {
        PsiVector {
            mu: self.log_var.iter().map(|v| (-v).exp()).collect(),
            log_var: vec![0.5; self.latent_dim()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn moments(samples: &[Vec<f64>], i: usize) -> (f64, f64) {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s[i]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DiagonalGaussian::new(vec![], vec![]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(DiagonalGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn clamps_log_var() {
        let g = DiagonalGaussian::new(vec![0.0, 0.0], vec![-100.0, 100.0]).unwrap();
        assert_eq!(g.log_var(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn samples_collapse_at_variance_floor() {
        let g = DiagonalGaussian::new(vec![0.0; 3], vec![LOGVAR_MIN; 3]).unwrap();
        for z in g.sample(11, 200) {
            assert!(z.iter().all(|v| v.abs() < 2e-3), "{z:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = DiagonalGaussian::new(vec![3.0, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(g.sample(5, 10), g.sample(5, 10));
        assert_ne!(g.sample(5, 10), g.sample(6, 10));
    }

    #[test]
    fn sample_moments() {
        let g = DiagonalGaussian::standard(2);
        let s = g.sample(42, 100_000);
        for i in 0..2 {
            let (m, v) = moments(&s, i);
            assert!(m.abs() < 0.02, "mean {m}");
            assert!((v - 1.0).abs() < 0.05, "var {v}");
        }
    }

    #[test]
    fn log_density_at_mode() {
        let g = DiagonalGaussian::standard(1);
        assert_relative_eq!(g.log_density(&[0.0]).unwrap(), -0.918_938_5, epsilon = 1e-7);
        assert!(g.log_density(&[9.0]).unwrap() < g.log_density(&[0.0]).unwrap());
        let direct = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 0.49;
        assert_relative_eq!(g.log_density(&[0.7]).unwrap(), direct, epsilon = 1e-14);
    }

    #[test]
    fn score_special_points() {
        let g = DiagonalGaussian::new(vec![0.4, -1.0], vec![0.3, -0.8]).unwrap();
        let s = g.score(g.mean()).unwrap();
        assert_eq!(s.mu, vec![0.0, 0.0]);
        assert_eq!(s.log_var, vec![-0.5, -0.5]);

        let one_sigma: Vec<f64> = g.transform(&[1.0, 1.0]);
        let s = g.score(&one_sigma).unwrap();
        for v in s.log_var {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_form_shift() {
        let p = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        let q = DiagonalGaussian::standard(1);
        assert_relative_eq!(p.kl_divergence(&q).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(p.kl_divergence(&p).unwrap(), 0.0);
    }

    #[test]
    fn kl_monte_carlo_agreement() {
        let p = DiagonalGaussian::new(vec![0.5, -0.3, 1.2], vec![-0.4, 0.2, 0.6]).unwrap();
        let q = DiagonalGaussian::new(vec![-0.2, 0.1, 0.0], vec![0.3, -0.5, 0.0]).unwrap();
        let mut r = rng::substream(9, &[]);
        let n = 1_000_000;
        let mut acc = 0.0;
        for z in p.sample_with(&mut r, n) {
            acc += p.log_density(&z).unwrap() - q.log_density(&z).unwrap();
        }
        let mc = acc / n as f64;
        let exact = p.kl_divergence(&q).unwrap();
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn fisher_closed_form() {
        let g = DiagonalGaussian::standard(3);
        let f = g.fisher_diagonal();
        assert_eq!(f.mu, vec![1.0; 3]);
        assert_eq!(f.log_var, vec![0.5; 3]);
        let g = DiagonalGaussian::from_std_dev(vec![0.0], &[2.0]).unwrap();
        assert_relative_eq!(g.fisher_diagonal().mu[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn score_has_zero_mean() {
        let g = DiagonalGaussian::new(vec![0.3, -0.7, 1.1, 0.0], vec![0.1, -0.6, 0.4, 0.0]).unwrap();
        let n = 100_000;
        let mut acc = PsiVector::zeros(4);
        for z in g.sample(3, n) {
            acc.add_scaled(&g.score(&z).unwrap(), 1.0 / n as f64);
        }
        assert!(acc.norm() <= 0.02 * 4f64.sqrt(), "{acc:?}");
    }

    #[test]
    fn std_dev_round_trip() {
        let lo = (0.5 * LOGVAR_MIN).exp();
        let hi = (0.5 * LOGVAR_MAX).exp();
        for k in 0..=200 {
            let sigma = lo * (hi / lo).powf(k as f64 / 200.0);
            let g = DiagonalGaussian::from_std_dev(vec![0.0], &[sigma]).unwrap();
            assert_relative_eq!(g.std_dev()[0], sigma, max_relative = 4.0 * f64::EPSILON);
        }
        // outside the clamp window the round trip saturates at the bounds
        let g = DiagonalGaussian::from_std_dev(vec![0.0], &[1e-6]).unwrap();
        assert_eq!(g.log_var()[0], LOGVAR_MIN);
    }

    #[test]
    fn serde_round_trip_checks_shape() {
        let g = DiagonalGaussian::new(vec![0.1, 0.2], vec![0.0, -1.0]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"n_z\":2"));
        let back: DiagonalGaussian = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"n_z":3,"mu":[0.0],"log_var":[0.0]}"#;
        assert!(serde_json::from_str::<DiagonalGaussian>(bad).is_err());
    }

    fn gaussian_strategy(n: usize) -> impl Strategy<Value = DiagonalGaussian> {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(-3.0..3.0f64, n),
        )
            .prop_map(|(m, v)| DiagonalGaussian::new(m, v).unwrap())
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in gaussian_strategy(3), q in gaussian_strategy(3)) {
            let kl = p.kl_divergence(&q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(p.kl_divergence(&p).unwrap() <= 1e-12);
            if p != q {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn log_density_is_symmetric(g in gaussian_strategy(2), d in prop::collection::vec(-4.0..4.0f64, 2)) {
            let plus: Vec<f64> = g.mean().iter().zip(&d).map(|(m, d)| m + d).collect();
            let minus: Vec<f64> = g.mean().iter().zip(&d).map(|(m, d)| m - d).collect();
            let a = g.log_density(&plus).unwrap();
            let b = g.log_density(&minus).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
