//! End-to-end orchestration: demos, cloning, fine-tuning, certification,
//! evaluation and bound validation, plus the on-disk artifacts they produce.
//!
//! Every stage draws its randomness from `derive(seed, [stage tag, stage seed])`
//! so changing the master `seed` reshuffles everything while per-stage seeds
//! can still be varied on their own. Demo, training and test environments
//! come from disjoint substreams of the same distribution.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{assemble_certificate, BoundInputs, Certificate};
use crate::cloning::{demos_to_jsonl, parse_demos, train_clone, CloneArch, CloneConfig, CloneLogEntry, DemoStep, Demonstration};
use crate::envs::{
    canonical_navigation, expert, navigation_mode, rollout, rollout_trace, rollout_with, EnvDistribution, Environment,
    Task, TaskRanges,
};
use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::nes::{finetune, EpochRecord, NesConfig, RolloutOracle};
use crate::policy::{Mlp, PolicyDecoder};
use crate::rng::{self, stage};

pub const SCHEMA_VERSION: u32 = 1;

/// Lateral excursion (metres) beyond which a navigation path counts as passing on one side.
pub const MODE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    /// Demonstration attempts; experts alternate between the two modes.
    pub n_demos: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { n_demos: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloneSection {
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub window: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Tuned on the navigation suite: a heavier KL weight and longer training than
/// the library defaults give a prior that keeps both modes and needs less KL
/// to fine-tune.
impl Default for CloneSection {
    fn default() -> Self {
        let cfg = CloneConfig::default();
        Self {
            latent_dim: 5,
            decoder_hidden: vec![32, 32],
            encoder_hidden: vec![32, 32],
            window: 3,
            lambda: 0.2,
            learning_rate: 3e-3,
            weight_decay: cfg.weight_decay,
            n_iters: 8000,
            batch_size: cfg.batch_size,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    /// N, the number of training environments.
    pub n_envs: usize,
    pub delta: f64,
    pub delta_prime: f64,
    /// L, posterior samples per training environment for the cost estimate.
    pub n_cost_samples: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            n_envs: 50,
            delta: 0.009,
            delta_prime: 0.001,
            n_cost_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_test: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_test: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Master seed.
    pub seed: u64,
    /// Not part of the config hash.
    pub output_dir: PathBuf,
    /// Distribution ranges; the task's defaults when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub environments: Option<TaskRanges>,
    pub demos: DemoConfig,
    pub clone: CloneSection,
    pub finetune: NesConfig,
    pub bound: BoundConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Navigation,
            seed: 0,
            output_dir: PathBuf::from("runs/navigation"),
            environments: None,
            demos: DemoConfig::default(),
            clone: CloneSection::default(),
            finetune: NesConfig {
                n_epochs: 300,
                ..NesConfig::default()
            },
            bound: BoundConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            output_dir: PathBuf::from(format!("runs/{}", task.name())),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.ranges();
        if ranges.task() != self.task {
            return Err(Error::InvalidConfig(format!(
                "environments describe {} but task is {}",
                ranges.task().name(),
                self.task.name()
            )));
        }
        EnvDistribution::new(ranges, 0)?;
        self.clone_config().validate()?;
        if self.clone.latent_dim == 0 || self.clone.window == 0 {
            return Err(Error::InvalidConfig("clone latent_dim and window must be positive".into()));
        }
        self.finetune.validate()?;
        BoundInputs::new(
            0.0,
            self.bound.n_envs,
            self.bound.delta,
            self.bound.delta_prime,
            self.bound.n_cost_samples,
        )?;
        if self.eval.n_test == 0 {
            return Err(Error::InvalidConfig("eval n_test must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ranges(&self) -> TaskRanges {
        self.environments.clone().unwrap_or_else(|| TaskRanges::default_for(self.task))
    }

    /// Hex SHA-256 of the canonical TOML form, with `output_dir` blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.environments = Some(c.ranges());
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    fn stage_seed(&self, tag: u64, seed: u64) -> u64 {
        rng::derive(self.seed, &[tag, seed])
    }

    fn distribution(&self, master: u64) -> Result<EnvDistribution> {
        EnvDistribution::new(self.ranges(), master)
    }

    pub fn demo_distribution(&self) -> Result<EnvDistribution> {
        self.distribution(self.stage_seed(stage::DEMO_ENVS, self.demos.seed))
    }

    pub fn train_distribution(&self) -> Result<EnvDistribution> {
        self.distribution(rng::derive(self.seed, &[stage::TRAIN_ENVS]))
    }

    pub fn test_distribution(&self) -> Result<EnvDistribution> {
        self.distribution(rng::derive(self.seed, &[stage::TEST_ENVS]))
    }

    /// Training and test distributions for validation trial `t`, disjoint from the
    /// main run and from every other trial.
    pub fn trial_distributions(&self, t: usize) -> Result<(EnvDistribution, EnvDistribution)> {
        Ok((
            self.distribution(rng::derive(self.seed, &[stage::TRIAL, t as u64, stage::TRAIN_ENVS]))?,
            self.distribution(rng::derive(self.seed, &[stage::TRIAL, t as u64, stage::TEST_ENVS]))?,
        ))
    }

    pub fn clone_arch(&self) -> CloneArch {
        CloneArch {
            latent_dim: self.clone.latent_dim,
            obs_dim: self.task.obs_dim(),
            head: self.task.head(),
            decoder_hidden: self.clone.decoder_hidden.clone(),
            encoder_hidden: self.clone.encoder_hidden.clone(),
            window: self.clone.window,
        }
    }

    pub fn clone_config(&self) -> CloneConfig {
        CloneConfig {
            lambda: self.clone.lambda,
            learning_rate: self.clone.learning_rate,
            weight_decay: self.clone.weight_decay,
            n_iters: self.clone.n_iters,
            batch_size: self.clone.batch_size,
            seed: self.stage_seed(stage::CLONE, self.clone.seed),
        }
    }

    pub fn nes_config(&self) -> NesConfig {
        NesConfig {
            seed: self.stage_seed(stage::FINETUNE, self.finetune.seed),
            ..self.finetune.clone()
        }
    }

    pub fn bound_inputs(&self, kl: f64) -> Result<BoundInputs> {
        BoundInputs::new(
            kl,
            self.bound.n_envs,
            self.bound.delta,
            self.bound.delta_prime,
            self.bound.n_cost_samples,
        )
    }

    pub fn certify_seed(&self) -> u64 {
        self.stage_seed(stage::CERTIFY, self.bound.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.stage_seed(stage::EVALUATE, self.eval.seed)
    }
}

// ---------------------------------------------------------------------------
// artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub data: T,
}

pub mod files {
    pub const DEMOS: &str = "demos.jsonl";
    pub const CLONE: &str = "clone.json";
    pub const POSTERIOR: &str = "posterior.json";
    pub const TRAINING_LOG: &str = "training_log.csv";
    pub const CERTIFICATE: &str = "certificate.json";
    pub const EVALUATION: &str = "evaluation.json";
    pub const VALIDATION: &str = "validation.json";
    pub const REPORT: &str = "report.txt";
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_artifact<T: Serialize>(path: &Path, kind: &str, cfg: &ExperimentConfig, data: &T) -> Result<()> {
    let artifact = Artifact {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        data,
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let artifact: Artifact<T> = serde_json::from_str(&text)?;
    if artifact.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: artifact.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(artifact)
}

/// Reads an artifact only if it was produced by this exact config.
fn read_matching<T: DeserializeOwned>(path: &Path, cfg: &ExperimentConfig) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let artifact = read_artifact::<T>(path)?;
    if artifact.config_hash == cfg.hash()? {
        Ok(Some(artifact.data))
    } else {
        log::info!("{} was produced by a different config; regenerating", path.display());
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneArtifact {
    pub decoder: PolicyDecoder,
    pub prior: DiagonalGaussian,
    pub n_demos: usize,
    pub log: Vec<CloneLogEntry>,
}

impl CloneArtifact {
    /// Re-checks the decoder shapes after deserialization.
    fn checked(self) -> Result<Self> {
        let d = &self.decoder;
        let net = Mlp::from_params(d.net().layer_dims().to_vec(), d.net().params().to_vec())?;
        let decoder = PolicyDecoder::new(d.obs_dim(), d.latent_dim(), d.head(), net)?;
        crate::error::check_dim("prior latent", decoder.latent_dim(), self.prior.latent_dim())?;
        Ok(Self { decoder, ..self })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArtifact {
    pub posterior: DiagonalGaussian,
    pub kl: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateArtifact {
    pub task: Task,
    pub certificate: Certificate,
    /// L used for the cost estimate; smaller than the tens of thousands needed for tight certificates.
    pub n_cost_samples: usize,
    pub n_rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_cost: f64,
    /// `1 - mean_cost`.
    pub success_rate: f64,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub prior: EvalSummary,
    pub posterior: EvalSummary,
}

/// Everything a certification run leaves on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub demos: PathBuf,
    pub clone: PathBuf,
    pub posterior: PathBuf,
    pub training_log: PathBuf,
    pub certificate: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            demos: dir.join(files::DEMOS),
            clone: dir.join(files::CLONE),
            posterior: dir.join(files::POSTERIOR),
            training_log: dir.join(files::TRAINING_LOG),
            certificate: dir.join(files::CERTIFICATE),
        }
    }
}

pub fn training_log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_cost,kl,pac_estimate\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.mean_cost, r.kl, r.pac_estimate);
    }
    out
}

// ---------------------------------------------------------------------------
// stages

/// Runs the scripted experts on `n_demos` demo environments, alternating modes,
/// and keeps the successful episodes.
pub fn generate_demos(cfg: &ExperimentConfig) -> Result<Vec<Demonstration>> {
    let n = cfg.demos.n_demos;
    if n == 0 {
        return Ok(Vec::new());
    }
    let dist = cfg.demo_distribution()?;
    let task = cfg.task;
    let attempts: Vec<Option<Demonstration>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let env = dist.sample(i as u64);
            let mode = expert::Mode::of_index(i);
            let mut steps = Vec::new();
            let result = rollout_with(
                &env,
                |obs| Ok(expert::act(task, mode, obs)),
                |_, obs, action| {
                    steps.push(DemoStep {
                        obs: obs.clone(),
                        action: action.clone(),
                    })
                },
            )?;
            Ok(expert::is_success(task, result.cost).then(|| Demonstration {
                task_tag: format!("{}-{}", task.name(), env.index),
                mode: Some(mode.name().to_string()),
                steps,
            }))
        })
        .collect::<Result<_>>()?;
    let demos: Vec<Demonstration> = attempts.into_iter().flatten().collect();
    if 2 * demos.len() < n {
        return Err(Error::ExpertFailure {
            succeeded: demos.len(),
            attempted: n,
        });
    }
    log::info!("kept {} of {n} expert demonstrations", demos.len());
    Ok(demos)
}

pub fn clone_demos(cfg: &ExperimentConfig, demos: &[Demonstration]) -> Result<CloneArtifact> {
    let out = train_clone(demos, &cfg.clone_arch(), &cfg.clone_config())?;
    Ok(CloneArtifact {
        decoder: out.decoder,
        prior: out.prior,
        n_demos: demos.len(),
        log: out.log,
    })
}

pub fn finetune_prior(cfg: &ExperimentConfig, clone: &CloneArtifact, train: &[Environment]) -> Result<PosteriorArtifact> {
    let oracle = RolloutOracle {
        envs: train,
        policy: &clone.decoder,
    };
    let inputs = cfg.bound_inputs(0.0)?;
    let out = finetune(&clone.prior, &oracle, &cfg.nes_config(), &inputs)?;
    let kl = out.posterior.kl_divergence(&clone.prior)?;
    Ok(PosteriorArtifact {
        posterior: out.posterior,
        kl,
        history: out.history,
    })
}

/// `(1/NL) sum_j sum_l C(z_jl; E_j)`, with the `L` latents of environment `j`
/// drawn from the `(seed, j)` substream.
pub fn estimate_training_cost(
    posterior: &DiagonalGaussian,
    policy: &PolicyDecoder,
    train: &[Environment],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if train.is_empty() || n_samples == 0 {
        return Err(Error::InvalidConfig("cost estimate needs environments and samples".into()));
    }
    let sums: Vec<f64> = train
        .par_iter()
        .enumerate()
        .map(|(j, env)| {
            let mut r = rng::substream(seed, &[j as u64]);
            let mut sum = 0.0;
            for (l, z) in posterior.sample_with(&mut r, n_samples).iter().enumerate() {
                let cost = rollout(env, policy, z)
                    .map_err(|e| Error::RolloutFailure {
                        env: j,
                        latent: l,
                        source: Box::new(e),
                    })?
                    .cost;
                if !(0.0..=1.0).contains(&cost) {
                    return Err(Error::CostOutOfRange(cost));
                }
                sum += cost;
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / (train.len() * n_samples) as f64)
}

/// Samples one latent per test environment, rolls out, and averages.
pub fn evaluate(
    dist: &DiagonalGaussian,
    policy: &PolicyDecoder,
    envs: &EnvDistribution,
    n_test: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if n_test == 0 {
        return Err(Error::InvalidConfig("n_test must be at least 1".into()));
    }
    let costs: Vec<f64> = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let env = envs.sample(i as u64);
            let z = dist.sample_with(&mut rng::substream(seed, &[i as u64]), 1).remove(0);
            rollout(&env, policy, &z).map(|r| r.cost).map_err(|e| Error::RolloutFailure {
                env: i,
                latent: 0,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mean_cost = costs.iter().sum::<f64>() / n_test as f64;
    Ok(EvalSummary {
        mean_cost,
        success_rate: 1.0 - mean_cost,
        costs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeCounts {
    pub left: usize,
    pub right: usize,
    pub neither: usize,
}

impl ModeCounts {
    pub fn total(&self) -> usize {
        self.left + self.right + self.neither
    }
}

/// Classifies the paths of `n_samples` latents on the canonical navigation instance.
pub fn navigation_modes(dist: &DiagonalGaussian, policy: &PolicyDecoder, n_samples: usize, seed: u64) -> Result<ModeCounts> {
    let env = canonical_navigation();
    let mut counts = ModeCounts::default();
    for z in dist.sample(seed, n_samples) {
        let (_, path) = rollout_trace(&env, policy, &z)?;
        match navigation_mode(&path, MODE_THRESHOLD) {
            Some(expert::Mode::Left) => counts.left += 1,
            Some(expert::Mode::Right) => counts.right += 1,
            None => counts.neither += 1,
        }
    }
    Ok(counts)
}

/// Loads demos from the run directory when they match `cfg`, else generates and stores them.
pub fn demos_stage(cfg: &ExperimentConfig) -> Result<Vec<Demonstration>> {
    let demos = generate_demos(cfg)?;
    write_atomic(&cfg.output_dir.join(files::DEMOS), demos_to_jsonl(&demos)?.as_bytes())?;
    Ok(demos)
}

pub fn load_demos(path: &Path) -> Result<Vec<Demonstration>> {
    parse_demos(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn clone_stage(cfg: &ExperimentConfig) -> Result<CloneArtifact> {
    let demos = demos_stage(cfg)?;
    let clone = clone_demos(cfg, &demos)?;
    write_artifact(&cfg.output_dir.join(files::CLONE), "clone", cfg, &clone)?;
    Ok(clone)
}

fn cached_clone(cfg: &ExperimentConfig) -> Result<CloneArtifact> {
    match read_matching::<CloneArtifact>(&cfg.output_dir.join(files::CLONE), cfg)? {
        Some(c) => c.checked(),
        None => clone_stage(cfg),
    }
}

pub fn finetune_stage(cfg: &ExperimentConfig) -> Result<(CloneArtifact, PosteriorArtifact)> {
    let clone = cached_clone(cfg)?;
    let train = cfg.train_distribution()?.sample_many(cfg.bound.n_envs);
    let post = finetune_prior(cfg, &clone, &train)?;
    write_artifact(&cfg.output_dir.join(files::POSTERIOR), "posterior", cfg, &post)?;
    write_atomic(
        &cfg.output_dir.join(files::TRAINING_LOG),
        training_log_csv(&post.history).as_bytes(),
    )?;
    Ok((clone, post))
}

fn certify_posterior(
    cfg: &ExperimentConfig,
    clone: &CloneArtifact,
    post: &PosteriorArtifact,
    train: &[Environment],
) -> Result<CertificateArtifact> {
    let cost = estimate_training_cost(
        &post.posterior,
        &clone.decoder,
        train,
        cfg.bound.n_cost_samples,
        cfg.certify_seed(),
    )?;
    let certificate = assemble_certificate(cost, &cfg.bound_inputs(post.kl)?)?;
    Ok(CertificateArtifact {
        task: cfg.task,
        certificate,
        n_cost_samples: cfg.bound.n_cost_samples,
        n_rollouts: train.len() * cfg.bound.n_cost_samples,
    })
}

/// Clone, fine-tune on fresh training environments, estimate the training
/// cost with `L` new posterior samples per environment, and certify.
/// Every artifact is written to `cfg.output_dir`.
pub fn run_certification(cfg: &ExperimentConfig) -> Result<(Certificate, RunArtifacts)> {
    cfg.validate()?;
    let clone = clone_stage(cfg)?;
    let train = cfg.train_distribution()?.sample_many(cfg.bound.n_envs);
    let post = finetune_prior(cfg, &clone, &train)?;
    let paths = RunArtifacts::in_dir(&cfg.output_dir);
    write_artifact(&paths.posterior, "posterior", cfg, &post)?;
    write_atomic(&paths.training_log, training_log_csv(&post.history).as_bytes())?;
    let cert = certify_posterior(cfg, &clone, &post, &train)?;
    write_artifact(&paths.certificate, "certificate", cfg, &cert)?;
    log::info!(
        "certificate: empirical {:.4}, final bound {:.4}, guaranteed success {:.4}",
        cert.certificate.empirical_cost_estimate,
        cert.certificate.final_bound,
        cert.certificate.guaranteed_success
    );
    Ok((cert.certificate, paths))
}

/// Evaluates the prior and posterior of the run directory on `n_test` test
/// environments, fine-tuning first if no matching posterior exists.
pub fn evaluate_stage(cfg: &ExperimentConfig) -> Result<EvaluationArtifact> {
    let (clone, post) = match (
        read_matching::<CloneArtifact>(&cfg.output_dir.join(files::CLONE), cfg)?,
        read_matching::<PosteriorArtifact>(&cfg.output_dir.join(files::POSTERIOR), cfg)?,
    ) {
        (Some(c), Some(p)) => (c.checked()?, p),
        _ => finetune_stage(cfg)?,
    };
    let test = cfg.test_distribution()?;
    let seed = cfg.eval_seed();
    let eval = EvaluationArtifact {
        prior: evaluate(&clone.prior, &clone.decoder, &test, cfg.eval.n_test, seed)?,
        posterior: evaluate(&post.posterior, &clone.decoder, &test, cfg.eval.n_test, seed)?,
    };
    write_artifact(&cfg.output_dir.join(files::EVALUATION), "evaluation", cfg, &eval)?;
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub kl: f64,
    pub empirical_cost: f64,
    pub final_bound: f64,
    pub guaranteed_success: f64,
    /// Mean cost of the posterior on the trial's held-out environments.
    pub test_cost: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub trials: Vec<TrialRecord>,
    pub violations: usize,
    pub violation_frequency: f64,
    pub median_guaranteed_success: f64,
}

pub const MIN_TRIALS: usize = 20;

/// Repeats fine-tuning and certification on `n_trials` fresh training sets
/// and compares each final bound with the posterior's cost on that trial's
/// held-out environments. The prior is cloned once: it depends only on the
/// demonstrations, which are independent of every training set.
pub fn validate_bound(cfg: &ExperimentConfig, n_trials: usize) -> Result<ValidationSummary> {
    cfg.validate()?;
    if n_trials < MIN_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "bound validation needs at least {MIN_TRIALS} trials, got {n_trials}"
        )));
    }
    let clone = cached_clone(cfg)?;
    let mut trials = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let (train_dist, test_dist) = cfg.trial_distributions(t)?;
        let mut trial_cfg = cfg.clone();
        trial_cfg.finetune.seed = rng::derive(cfg.finetune.seed, &[stage::TRIAL, t as u64]);
        trial_cfg.bound.seed = rng::derive(cfg.bound.seed, &[stage::TRIAL, t as u64]);
        trial_cfg.eval.seed = rng::derive(cfg.eval.seed, &[stage::TRIAL, t as u64]);
        let train = train_dist.sample_many(cfg.bound.n_envs);
        let post = finetune_prior(&trial_cfg, &clone, &train)?;
        let cert = certify_posterior(&trial_cfg, &clone, &post, &train)?.certificate;
        let test = evaluate(
            &post.posterior,
            &clone.decoder,
            &test_dist,
            cfg.eval.n_test,
            trial_cfg.eval_seed(),
        )?;
        let record = TrialRecord {
            trial: t,
            kl: post.kl,
            empirical_cost: cert.empirical_cost_estimate,
            final_bound: cert.final_bound,
            guaranteed_success: cert.guaranteed_success,
            test_cost: test.mean_cost,
            violated: test.mean_cost > cert.final_bound,
        };
        log::info!(
            "trial {t}: bound {:.4}, test cost {:.4}{}",
            record.final_bound,
            record.test_cost,
            if record.violated { " VIOLATED" } else { "" }
        );
        trials.push(record);
    }
    let violations = trials.iter().filter(|r| r.violated).count();
    let mut gs: Vec<f64> = trials.iter().map(|r| r.guaranteed_success).collect();
    gs.sort_by(f64::total_cmp);
    let median = if n_trials % 2 == 1 {
        gs[n_trials / 2]
    } else {
        0.5 * (gs[n_trials / 2 - 1] + gs[n_trials / 2])
    };
    let summary = ValidationSummary {
        violations,
        violation_frequency: violations as f64 / n_trials as f64,
        median_guaranteed_success: median,
        trials,
    };
    write_artifact(&cfg.output_dir.join(files::VALIDATION), "validation", cfg, &summary)?;
    Ok(summary)
}

/// Plain-text summary of whatever certificate and evaluation artifacts the
/// run directory holds. Missing pieces show as `-`.
pub fn report(dir: &Path) -> Result<String> {
    let cert = dir
        .join(files::CERTIFICATE)
        .exists()
        .then(|| read_artifact::<CertificateArtifact>(&dir.join(files::CERTIFICATE)))
        .transpose()?;
    let eval = dir
        .join(files::EVALUATION)
        .exists()
        .then(|| read_artifact::<EvaluationArtifact>(&dir.join(files::EVALUATION)))
        .transpose()?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    let mut out = String::new();
    let task = cert.as_ref().map_or("-", |c| c.data.task.name());
    let _ = writeln!(out, "task: {task}");
    let _ = writeln!(out, "{:>12} | {:>8} | {:>9}", "1-C_bound", "prior", "posterior");
    let _ = writeln!(
        out,
        "{:>12} | {:>8} | {:>9}",
        fmt(cert.as_ref().map(|c| c.data.certificate.guaranteed_success)),
        fmt(eval.as_ref().map(|e| e.data.prior.success_rate)),
        fmt(eval.as_ref().map(|e| e.data.posterior.success_rate)),
    );
    if let Some(c) = &cert {
        let k = &c.data.certificate;
        let _ = writeln!(out);
        let _ = writeln!(out, "empirical cost estimate   {:.6}", k.empirical_cost_estimate);
        let _ = writeln!(out, "sample convergence bound  {:.6}", k.sample_convergence_bound);
        let _ = writeln!(out, "kl(posterior || prior)    {:.6}", k.inputs.kl);
        let _ = writeln!(out, "regularizer               {:.6}", k.regularizer);
        let _ = writeln!(out, "final bound               {:.6}", k.final_bound);
        let _ = writeln!(
            out,
            "N = {}, L = {}, delta = {}, delta' = {}{}",
            k.inputs.n_envs,
            k.inputs.n_cost_samples,
            k.inputs.delta,
            k.inputs.delta_prime,
            if k.vacuous { "  (vacuous)" } else { "" }
        );
        if k.inputs.n_cost_samples < 10_000 {
            let _ = writeln!(out, "note: L below 10000 loosens the sample convergence term");
        }
    }
    Ok(out)
}
