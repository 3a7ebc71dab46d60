use std::fs;
use std::path::Path;

use dfacs_core::config::{ExperimentConfig, MicroState};
use dfacs_core::dynamics::{PlantState, INPUT_DIM};
use dfacs_core::mpc::Controller;
use dfacs_core::parallel::Execution;
use dfacs_core::pipeline::{self, Paths};
use dfacs_core::sindy::LiftedModel;

fn smoke_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.dataset.n_traj = 4;
    cfg.dataset.duration = 12.0;
    cfg.control.duration = 2.0;
    cfg
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}

#[test]
fn capture_profile_only_changes_lambda_and_output() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/capture.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.identification.stls.lambda, 5e-2);
    let default = ExperimentConfig::default();
    cfg.identification.stls.lambda = default.identification.stls.lambda;
    cfg.output_dir = default.output_dir.clone();
    assert_eq!(cfg, default);
}

#[test]
fn stages_compose_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let paths = Paths::new(dir.path());

    let ds = pipeline::cmd_generate(&cfg, Execution::Parallel).unwrap();
    assert_eq!(ds.trajectories.len(), 4);
    assert_eq!(ds.split(dfacs_core::dataset::Split::Train).count(), 3);
    let manifest = fs::read(paths.dataset().join("manifest.json")).unwrap();

    let models = pipeline::cmd_fit(&cfg, Execution::Parallel).unwrap();
    assert_eq!(models.len(), 2);
    for (sub, model) in &models {
        let back = LiftedModel::load(&paths.model(*sub)).unwrap();
        assert_eq!(&back, model);
        assert_eq!(back.echo["seed"], 1);
    }

    let report = pipeline::cmd_validate(&cfg).unwrap();
    assert_eq!(report.blocks.len(), 6);
    let errors = fs::read_to_string(paths.validation().join("errors_attitude.csv")).unwrap();
    // One validation trajectory, 121 samples, header line.
    assert_eq!(errors.lines().count(), 1 + 121);
    let first_row: Vec<&str> = errors.lines().nth(1).unwrap().split(',').collect();
    assert!(first_row[2..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0));

    let run = pipeline::cmd_control(&cfg).unwrap();
    assert_eq!(run.log.times.len(), 20);
    assert_eq!(run.summary.bound_violations, 0);
    let log = fs::read_to_string(paths.control().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    assert_eq!(log.lines().next().unwrap().split(',').count(), 1 + 34 + 20 + 2);

    let text = pipeline::cmd_report(&cfg).unwrap();
    assert!(text.contains("model attitude"));
    assert!(paths.root.join("report.json").exists());

    let snapshot = |p: &Path| fs::read(p).unwrap();
    let before = [
        snapshot(&paths.validation().join("summary.csv")),
        snapshot(&paths.control().join("log.csv")),
    ];
    pipeline::cmd_generate(&cfg, Execution::Sequential).unwrap();
    assert_eq!(fs::read(paths.dataset().join("manifest.json")).unwrap(), manifest);
    pipeline::cmd_fit(&cfg, Execution::Sequential).unwrap();
    pipeline::cmd_validate(&cfg).unwrap();
    pipeline::cmd_control(&cfg).unwrap();
    assert_eq!(snapshot(&paths.validation().join("summary.csv")), before[0]);
    assert_eq!(snapshot(&paths.control().join("log.csv")), before[1]);
}

#[test]
fn later_stages_reject_a_dataset_from_other_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    pipeline::cmd_generate(&cfg, Execution::Parallel).unwrap();
    let mut other = cfg.clone();
    other.seed = 2;
    assert!(pipeline::cmd_fit(&other, Execution::Parallel).is_err());
    assert!(pipeline::cmd_validate(&cfg).is_err(), "no models fitted yet");
}

#[test]
fn zero_start_stays_at_rest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path());
    cfg.control.initial_state = MicroState::zero();
    pipeline::cmd_generate(&cfg, Execution::Parallel).unwrap();
    let models = pipeline::cmd_fit(&cfg, Execution::Parallel).unwrap();
    let run = pipeline::run_control(&cfg, models).unwrap();
    assert!(run.log.states.data.iter().all(|v| *v == 0.0));
    assert!(run.log.inputs.data.iter().all(|v| *v == 0.0));
    assert_eq!(run.log.final_state, PlantState::zeros());
}

fn capture_controller(cfg: &ExperimentConfig) -> Controller {
    pipeline::cmd_generate(cfg, Execution::Parallel).unwrap();
    let models = pipeline::cmd_fit(cfg, Execution::Parallel).unwrap();
    let subsystems = models
        .into_iter()
        .map(|(s, m)| (m, s.tuning(&cfg.mpc).clone()))
        .collect();
    Controller::new(subsystems, &cfg.mpc).unwrap()
}

#[test]
fn first_capture_command_respects_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path());
    cfg.dataset.n_traj = 20;
    cfg.dataset.duration = 30.0;
    cfg.identification.stls.lambda = 5e-2;
    let mut ctl = capture_controller(&cfg);
    let limits = ctl.input_limits();
    let out = ctl.control_step(&MicroState::capture_start().to_si());
    assert!(out.fault.is_none(), "{:?}", out.fault);
    let u = out.input.to_array();
    for i in 0..INPUT_DIM {
        assert!(u[i].abs() <= limits[i], "channel {i}: {} > {}", u[i], limits[i]);
    }
    assert!(u.iter().any(|v| *v != 0.0));
    assert_eq!(out.input.f_t, nalgebra::Vector3::zeros());
    assert!(out.input.f_e.iter().all(|f| f.amax() <= 1e-6));
}

#[test]
fn unusable_model_holds_the_previous_input() {
    // Three 12 s trajectories identify strongly unstable models whose
    // 50-step Hessian is numerically indefinite.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path());
    cfg.identification.stls.lambda = 5e-2;
    let mut ctl = capture_controller(&cfg);
    let out = ctl.control_step(&MicroState::capture_start().to_si());
    assert!(out.fault.is_some());
    assert!(out.input.to_array().iter().all(|v| *v == 0.0));
}
