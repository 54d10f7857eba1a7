use std::path::Path;
use std::process::Command;

use pac_imitation::bounds::Certificate;
use pac_imitation::cloning::parse_demos;
use pac_imitation::envs::{rollout_with, CountRange, NavigationRanges, Range, Task, TaskRanges};
use pac_imitation::gaussian::{DiagonalGaussian, LOGVAR_MIN};
use pac_imitation::pipeline::{
    evaluate, files, generate_demos, read_artifact, report, run_certification, validate_bound, write_atomic,
    CertificateArtifact, ExperimentConfig, PosteriorArtifact, SCHEMA_VERSION,
};
use pac_imitation::policy::{Mlp, PolicyDecoder};
use pac_imitation::Error;

fn tiny(task: Task, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_task(task);
    cfg.output_dir = dir.to_path_buf();
    cfg.demos.n_demos = 20;
    cfg.clone.n_iters = 100;
    cfg.clone.decoder_hidden = vec![8];
    cfg.clone.encoder_hidden = vec![8];
    cfg.finetune.n_epochs = 3;
    cfg.bound.n_envs = 4;
    cfg.bound.n_cost_samples = 5;
    cfg.eval.n_test = 20;
    cfg
}

fn repo_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn shipped_configs_spell_out_the_defaults() {
    for task in [Task::Navigation, Task::Pushing] {
        let cfg = ExperimentConfig::load(&repo_file(&format!("configs/{}.toml", task.name()))).unwrap();
        let mut want = ExperimentConfig::for_task(task);
        want.environments = Some(want.ranges());
        assert_eq!(cfg, want);
    }
}

#[test]
fn config_round_trips_and_rejects_mistakes() {
    let cfg = ExperimentConfig::for_task(Task::Pushing);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    assert!(matches!(ExperimentConfig::from_toml("sed = 3"), Err(Error::ConfigParse(_))));
    assert!(ExperimentConfig::from_toml("[bound]\ndelta = 0.995\ndelta_prime = 0.01").is_err());
    assert!(ExperimentConfig::from_toml("task = \"pushing\"\n[environments]\ntask = \"navigation\"").is_err());
    assert!(ExperimentConfig::from_toml("[eval]\nn_test = 0").is_err());
}

#[test]
fn hash_ignores_output_dir_but_not_seeds() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    b.finetune.seed = 1;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
}

#[test]
fn stage_environment_sets_are_disjoint() {
    let cfg = ExperimentConfig::default();
    let seeds = [
        cfg.demo_distribution().unwrap().master_seed(),
        cfg.train_distribution().unwrap().master_seed(),
        cfg.test_distribution().unwrap().master_seed(),
        cfg.trial_distributions(0).unwrap().0.master_seed(),
        cfg.trial_distributions(0).unwrap().1.master_seed(),
        cfg.trial_distributions(1).unwrap().0.master_seed(),
    ];
    for i in 0..seeds.len() {
        for j in 0..i {
            assert_ne!(seeds[i], seeds[j]);
        }
    }
}

#[test]
fn no_demos_requested_gives_none() {
    let mut cfg = ExperimentConfig::default();
    cfg.demos.n_demos = 0;
    assert!(generate_demos(&cfg).unwrap().is_empty());
}

#[test]
fn default_navigation_demos_cover_both_modes_and_replay() {
    let cfg = ExperimentConfig::default();
    let demos = generate_demos(&cfg).unwrap();
    let count = |m: &str| demos.iter().filter(|d| d.mode.as_deref() == Some(m)).count();
    assert!(count("left") >= 40 && count("right") >= 40, "{} / {}", count("left"), count("right"));
    let dist = cfg.demo_distribution().unwrap();
    for d in demos.iter().take(20) {
        let index: u64 = d.task_tag.rsplit('-').next().unwrap().parse().unwrap();
        let mut actions = d.steps.iter().map(|s| s.action.clone());
        let result = rollout_with(&dist.sample(index), |_| Ok(actions.next().unwrap()), |_, _, _| {}).unwrap();
        assert_eq!(result.cost, 0.0);
        assert_eq!(result.steps_taken, d.len());
    }
}

#[test]
fn impossible_layout_is_an_expert_failure() {
    let mut cfg = ExperimentConfig::default();
    cfg.demos.n_demos = 10;
    // a wall across the whole arena
    cfg.environments = Some(TaskRanges::Navigation(NavigationRanges {
        main_center_y: Range::new(3.0, 3.0),
        main_half_height: Range::new(3.2, 3.2),
        ..Default::default()
    }));
    match generate_demos(&cfg) {
        Err(Error::ExpertFailure { succeeded, attempted }) => assert_eq!((succeeded, attempted), (0, 10)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn smallest_pipeline_certifies_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Task::Navigation, dir.path());
    cfg.bound.n_envs = 1;
    cfg.bound.n_cost_samples = 1;
    cfg.finetune.n_epochs = 0;
    let (cert, paths) = run_certification(&cfg).unwrap();
    assert!(cert.empirical_cost_estimate == 0.0 || cert.empirical_cost_estimate == 1.0);
    for v in [cert.sample_convergence_bound, cert.regularizer, cert.pac_bound, cert.final_bound] {
        assert!(v.is_finite());
    }
    let art = read_artifact::<CertificateArtifact>(&paths.certificate).unwrap();
    assert_eq!(art.schema_version, SCHEMA_VERSION);
    assert_eq!(art.config_hash, cfg.hash().unwrap());
    assert_eq!(art.data.certificate.recompute().unwrap(), cert);
    let post = read_artifact::<PosteriorArtifact>(&paths.posterior).unwrap();
    assert!(post.data.history.is_empty());
    assert_eq!(post.data.kl, 0.0);
    assert_eq!(std::fs::read_to_string(&paths.training_log).unwrap(), "epoch,mean_cost,kl,pac_estimate\n");
    assert!(!parse_demos(&std::fs::read_to_string(&paths.demos).unwrap()).unwrap().is_empty());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn pushing_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Task::Pushing, dir.path());
    let (cert, _) = run_certification(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&cert.empirical_cost_estimate));
    assert!(cert.empirical_cost_estimate <= cert.final_bound);
    let text = report(dir.path()).unwrap();
    assert!(text.contains("task: pushing") && text.contains("final bound"));
}

#[test]
fn certify_is_byte_reproducible_on_a_small_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_certification(&tiny(Task::Navigation, a.path())).unwrap();
    run_certification(&tiny(Task::Navigation, b.path())).unwrap();
    for name in [files::CERTIFICATE, files::POSTERIOR, files::CLONE, files::DEMOS, files::TRAINING_LOG] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn schema_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("old.json");
    write_atomic(
        &path,
        br#"{"schema_version": 0, "kind": "certificate", "config_hash": "", "seed": 0, "data": null}"#,
    )
    .unwrap();
    match read_artifact::<Option<Certificate>>(&path) {
        Err(Error::SchemaVersion { found: 0, expected }) => assert_eq!(expected, SCHEMA_VERSION),
        other => panic!("{other:?}"),
    }
}

fn forward_only_decoder() -> PolicyDecoder {
    let task = Task::Navigation;
    let dims = vec![task.obs_dim() + 2, task.head().output_dim()];
    // all logits tie, so the first primitive (forward) always wins
    PolicyDecoder::new(task.obs_dim(), 2, task.head(), Mlp::zeros(dims).unwrap()).unwrap()
}

#[test]
fn point_mass_on_an_easy_layout_always_succeeds() {
    let ranges = NavigationRanges {
        main_center_x: Range::new(5.0, 5.0),
        main_center_y: Range::new(5.5, 5.5),
        main_half_width: Range::new(0.3, 0.3),
        main_half_height: Range::new(0.3, 0.3),
        n_chairs: CountRange { min: 1, max: 1 },
        chair_center_x: Range::new(5.0, 5.0),
        chair_center_y: Range::new(0.5, 0.5),
        chair_half_size: Range::new(0.2, 0.2),
    };
    let dist = pac_imitation::envs::EnvDistribution::new(TaskRanges::Navigation(ranges), 0).unwrap();
    let point = DiagonalGaussian::new(vec![0.3, -0.1], vec![LOGVAR_MIN; 2]).unwrap();
    let policy = forward_only_decoder();
    let a = evaluate(&point, &policy, &dist, 1, 4).unwrap();
    assert_eq!(a.success_rate, 1.0);
    let b = evaluate(&point, &policy, &dist, 1, 4).unwrap();
    assert_eq!(a, b);
    assert!(matches!(evaluate(&point, &policy, &dist, 0, 4), Err(Error::InvalidConfig(_))));
}

#[test]
fn validation_needs_twenty_trials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Task::Navigation, dir.path());
    assert!(matches!(validate_bound(&cfg, 19), Err(Error::InvalidConfig(_))));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pac-imitation"))
}

#[test]
fn cli_runs_stages_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Task::Navigation, &dir.path().join("run"));
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let run = |args: &[&str]| {
        let out = cli()
            .args(args)
            .arg("--config")
            .arg(&cfg_path)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    assert!(run(&["demos"]).contains("demonstrations"));
    run(&["clone"]);
    run(&["finetune", "--epochs", "2"]);
    run(&["certify"]);
    assert!(run(&["evaluate"]).contains("posterior success"));
    let text = run(&["report"]);
    assert!(text.contains("1-C_bound") && text.contains("N = 4, L = 5"));
    assert!(dir.path().join("run").join(files::REPORT).exists());

    let other = dir.path().join("other");
    run(&["certify", "--seed", "5", "--n-envs", "2", "--out", other.to_str().unwrap()]);
    let cert = read_artifact::<CertificateArtifact>(&other.join(files::CERTIFICATE)).unwrap();
    assert_eq!(cert.seed, 5);
    assert_eq!(cert.data.certificate.inputs.n_envs, 2);
}

#[test]
fn cli_reports_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "[bound]\nn_envs = 0\n").unwrap();
    let out = cli().args(["certify", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = cli().args(["report", "--config", "/nonexistent.toml"]).output().unwrap();
    assert!(!out.status.success());
}
