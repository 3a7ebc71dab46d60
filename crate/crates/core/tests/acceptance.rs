//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.
//!
//! `cargo test -p dfacs-core --test acceptance`

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dfacs_core::config::ExperimentConfig;
use dfacs_core::dataset::{central_difference_4, Table};
use dfacs_core::dynamics::{ControlInput, Plant, PlantState, SatelliteParams};
use dfacs_core::integrator::integrate_fixed_step;
use dfacs_core::mpc::{Condenser, MpcWeights};
use dfacs_core::parallel::Execution;
use dfacs_core::pipeline::{self, ControlRun, ValidationReport, GROWTH_LIMIT};
use dfacs_core::qp::{solve_qp, QpProblem, QpSettings};
use dfacs_core::sindy::{stls, zoh, RegressionProblem, StlsConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    let timing = if in_time {
        format!("{:.2} s", elapsed.as_secs_f64())
    } else {
        format!("{:.2} s, over the {} s budget", elapsed.as_secs_f64(), limit.as_secs())
    };
    println!(
        "criterion {id} {name}: {} ({}; {timing})",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

fn equilibrium_and_integrator_order() -> Outcome {
    let plant = Plant::with_params(SatelliteParams::default()).unwrap();
    let dx = plant.derivative(0.0, &PlantState::zeros(), &ControlInput::zeros());
    let rest = dx.to_array().iter().all(|v| *v == 0.0);

    let exact = (-1.0f64).exp();
    let err = |n: usize| {
        let y = integrate_fixed_step(|_, x: &[f64], d: &mut [f64]| d[0] = -x[0], &[1.0], 0.0, 1.0, n);
        (y[0] - exact).abs()
    };
    let ratios: Vec<f64> = [2usize, 4, 8].iter().map(|&n| err(n) / err(2 * n)).collect();
    let order_ok = ratios.iter().all(|r| *r >= 14.0);
    outcome(
        rest && order_ok,
        format!("f(0, 0) = 0 exactly: {rest}; step-halving error ratios {ratios:.1?}"),
    )
}

fn differentiation_accuracy() -> Outcome {
    let dt = 0.1;
    let n = 40;
    let t = |k: usize| 1.0 + k as f64 * dt;
    let cubic = Table::from_rows(&(0..n).map(|k| vec![t(k).powi(3)]).collect::<Vec<_>>(), 1);
    let d = central_difference_4(&cubic, dt).unwrap();
    let worst_cubic = (0..d.rows)
        .map(|k| {
            let want = 3.0 * t(k + 2).powi(2);
            ((d.row(k)[0] - want) / want).abs()
        })
        .fold(0.0, f64::max);

    let sine_err = |h: f64| {
        let m = (2.0 / h).round() as usize;
        let rows: Vec<Vec<f64>> = (0..=m).map(|k| vec![(k as f64 * h).sin()]).collect();
        let d = central_difference_4(&Table::from_rows(&rows, 1), h).unwrap();
        (0..d.rows)
            .map(|k| (d.row(k)[0] - ((k + 2) as f64 * h).cos()).abs())
            .fold(0.0, f64::max)
    };
    let ratios: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&h| sine_err(h) / sine_err(h / 2.0)).collect();
    let pass = worst_cubic <= 1e-12 && ratios.iter().all(|r| (14.0..=18.0).contains(r));
    outcome(
        pass,
        format!("t^3 worst relative error {worst_cubic:.1e}; sin step-halving ratios {ratios:.2?}"),
    )
}

fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    let coef = a.clone().svd(true, true).solve(y, 1e-14).unwrap();
    let r = (y - a * &coef).norm();
    (coef, r)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in subsets(n, k - 1) {
            if rest.first().is_none_or(|&r| r > first) {
                let mut s = vec![first];
                s.extend(rest);
                out.push(s);
            }
        }
    }
    out
}

/// Best subset of the given size by least-squares residual.
fn best_subset(theta: &DMatrix<f64>, y: &DVector<f64>, k: usize) -> (Vec<usize>, DVector<f64>) {
    subsets(theta.ncols(), k)
        .into_iter()
        .map(|s| {
            let (coef, r) = least_squares(&theta.select_columns(&s), y);
            (s, coef, r)
        })
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .map(|(s, c, _)| (s, c))
        .unwrap()
}

fn stls_matches_best_subset() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 100;
    let mut agree = 0;
    let mut failures = Vec::new();
    for case in 0..cases {
        let (rows, cols) = (rng.random_range(40..=120), rng.random_range(4..=10));
        let k = rng.random_range(1..=3usize);
        let gauss = |rng: &mut ChaCha8Rng| {
            let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        };
        let z = DMatrix::from_fn(rows, cols, |_, _| gauss(&mut rng));
        let mix = DMatrix::identity(cols, cols) + DMatrix::from_fn(cols, cols, |_, _| 0.3 * gauss(&mut rng));
        let theta = z * mix;
        let mut truth = DVector::zeros(cols);
        let mut order: Vec<usize> = (0..cols).collect();
        for i in 0..k {
            let j = rng.random_range(i..cols);
            order.swap(i, j);
            let mag = rng.random_range(1.0..10.0);
            truth[order[i]] = if rng.random::<bool>() { mag } else { -mag };
        }
        let noise = DVector::from_fn(rows, |_, _| 1e-9 * gauss(&mut rng));
        let y = &theta * &truth + noise;

        let problem = RegressionProblem::new(theta.clone(), DMatrix::from_column_slice(rows, 1, y.as_slice())).unwrap();
        let cfg = StlsConfig {
            lambda: 1e-6,
            settle_time: 0.0,
            ..Default::default()
        };
        let fit = stls(&problem, &cfg, Execution::Sequential).unwrap();
        let support: Vec<usize> = (0..cols).filter(|&j| fit.support[0][j]).collect();
        let (oracle_support, oracle_coef) = best_subset(&theta, &y, k);
        let coef_gap = if support == oracle_support {
            oracle_support
                .iter()
                .zip(oracle_coef.iter())
                .map(|(&j, c)| (fit.xi[(j, 0)] - c).abs())
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        if coef_gap <= 1e-8 {
            agree += 1;
        } else {
            let sv = theta.clone().svd(false, false).singular_values;
            let cond = sv.max() / sv.min();
            failures.push(format!(
                "case {case}: support {support:?} vs oracle {oracle_support:?}, gap {coef_gap:.1e}, cond {cond:.1e}"
            ));
        }
    }
    for f in &failures {
        println!("  stls mismatch: {f}");
    }
    outcome(
        agree as f64 >= 0.95 * cases as f64,
        format!("{agree}/{cases} problems match the best-subset oracle within 1e-8"),
    )
}

fn discretization_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: (f64, f64) = (f64::INFINITY, 0.0);
    for _ in 0..20 {
        let n = rng.random_range(1..=10);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let skew = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        // Negative-definite symmetric part makes A stable.
        let a = -(&m * m.transpose()) - DMatrix::identity(n, n) * 0.1 + (&skew - skew.transpose());
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let dev = |dt: f64| {
            let (ad, _) = zoh(&a, &b, dt);
            let taylor = DMatrix::identity(n, n) + &a * dt + &a * &a * (dt * dt / 2.0);
            (ad - taylor).norm()
        };
        let dt = 0.01;
        let ratio = dev(dt) / dev(dt / 2.0);
        worst = (worst.0.min(ratio), worst.1.max(ratio));
    }
    outcome(
        worst.0 >= 7.0 && worst.1 <= 9.0,
        format!("dt-halving ratios of the second-order Taylor residual in [{:.3}, {:.3}]", worst.0, worst.1),
    )
}

fn recursive_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &MpcWeights,
    (np, nc): (usize, usize),
    chi0: &DVector<f64>,
    u_prev: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let m = b.ncols();
    let (mut chi, mut prev, mut j) = (chi0.clone(), u_prev.clone(), 0.0);
    for k in 0..np {
        let uk = u.rows(k.min(nc - 1) * m, m).into_owned();
        let e = &chi - &w.reference;
        let du = &uk - &prev;
        j += (0..e.len()).map(|i| w.q[i] * e[i] * e[i]).sum::<f64>();
        j += (0..m).map(|i| w.r[i] * uk[i] * uk[i] + w.s[i] * du[i] * du[i]).sum::<f64>();
        chi = a * &chi + b * &uk;
        prev = uk;
    }
    j
}

fn condensation_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=2));
        let np = rng.random_range(1..=3);
        let nc = rng.random_range(1..=np);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let w = MpcWeights {
            q: DVector::from_fn(n, |_, _| rng.random_range(0.0..3.0)),
            r: DVector::from_fn(m, |_, _| rng.random_range(0.1..2.0)),
            s: DVector::from_fn(m, |_, _| rng.random_range(0.0..2.0)),
            u_min: DVector::from_element(m, -2.0),
            u_max: DVector::from_element(m, 2.0),
            reference: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        };
        let c = Condenser::new(&a, &b, &w, np, nc).unwrap();
        let chi0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let u_prev = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        for _ in 0..100 {
            let u = DVector::from_fn(m * nc, |_, _| rng.random_range(-2.0..2.0));
            let want = recursive_cost(&a, &b, &w, (np, nc), &chi0, &u_prev, &u);
            let got = c.cost(&chi0, &u_prev, &u);
            worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
            points += 1;
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{points} feasible points, worst relative gap {worst:.1e}"),
    )
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(d, d) * 0.05
}

fn grid_minimum(qp: &QpProblem) -> f64 {
    let (mut lo, mut hi) = ([qp.lb[0], qp.lb[1]], [qp.ub[0], qp.ub[1]]);
    let mut best = (f64::INFINITY, [0.0; 2]);
    let pts = 400;
    for _ in 0..4 {
        for i in 0..=pts {
            for j in 0..=pts {
                let x = [
                    lo[0] + (hi[0] - lo[0]) * i as f64 / pts as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / pts as f64,
                ];
                let f = qp.objective(&DVector::from_row_slice(&x));
                if f < best.0 {
                    best = (f, x);
                }
            }
        }
        // Zoom in on the best cell, staying inside the box.
        for k in 0..2 {
            let step = (hi[k] - lo[k]) / pts as f64;
            lo[k] = (best.1[k] - 2.0 * step).max(qp.lb[k]);
            hi[k] = (best.1[k] + 2.0 * step).min(qp.ub[k]);
        }
    }
    best.0
}

fn qp_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let settings = QpSettings::default();
    let mut worst_kkt: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..=20);
        let lb = DVector::from_fn(d, |_, _| rng.random_range(-2.0..0.0));
        let qp = QpProblem {
            h: random_spd(&mut rng, d),
            g: DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0)),
            ub: DVector::from_fn(d, |i, _| lb[i] + rng.random_range(0.1..2.0)),
            lb,
        };
        match solve_qp(&qp, &settings) {
            Ok(sol) => worst_kkt = worst_kkt.max(qp.kkt_residuals(&sol.x).max()),
            Err(_) => failures += 1,
        }
    }
    let mut worst_gap: f64 = 0.0;
    let mut never_worse = true;
    for _ in 0..30 {
        let lb = DVector::from_fn(2, |_, _| rng.random_range(-2.0..0.0));
        let qp = QpProblem {
            h: random_spd(&mut rng, 2),
            g: DVector::from_fn(2, |_, _| rng.random_range(-4.0..4.0)),
            ub: DVector::from_fn(2, |i, _| lb[i] + rng.random_range(0.2..2.0)),
            lb,
        };
        let sol = solve_qp(&qp, &settings).unwrap();
        let grid = grid_minimum(&qp);
        worst_gap = worst_gap.max((sol.objective - grid).abs());
        never_worse &= sol.objective <= grid + 1e-12;
    }
    outcome(
        failures == 0 && worst_kkt <= 1e-8 && worst_gap <= 1e-6 && never_worse,
        format!(
            "100 box QPs: {failures} failures, worst KKT residual {worst_kkt:.1e}; \
             30 planar QPs: worst gap to grid search {worst_gap:.1e}"
        ),
    )
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn capture_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("config/capture.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

struct PipelineRun {
    validation: ValidationReport,
    control: ControlRun,
    training: usize,
}

fn run_pipeline(cfg: &ExperimentConfig, exec: Execution) -> PipelineRun {
    let ds = pipeline::cmd_generate(cfg, exec).unwrap();
    pipeline::cmd_fit(cfg, exec).unwrap();
    let validation = pipeline::cmd_validate(cfg).unwrap();
    let control = pipeline::cmd_control(cfg).unwrap();
    pipeline::cmd_report(cfg).unwrap();
    PipelineRun {
        validation,
        control,
        training: ds.split(dfacs_core::dataset::Split::Train).count(),
    }
}

fn identification_quality(run: &PipelineRun, duration: f64) -> Outcome {
    let mut notes = vec![format!("{} training trajectories of {duration} s", run.training)];
    for b in &run.validation.blocks {
        notes.push(format!(
            "{}/{} growth {:.2}{} model {:.2e} vs persistence {:.2e}{}",
            b.subsystem,
            b.block,
            b.growth_ratio,
            if b.bounded { "" } else { " (over limit)" },
            b.median_model_error,
            b.median_persistence_error,
            if b.beats_persistence { "" } else { " (worse)" },
        ));
    }
    let pass = run.training >= 40 && duration >= 50.0 && run.validation.passes();
    outcome(pass, format!("growth limit {GROWTH_LIMIT}; {}", notes.join("; ")))
}

fn closed_loop_capture(run: &PipelineRun, cfg: &ExperimentConfig) -> Outcome {
    let s = &run.control.summary;
    let pass = cfg.control.duration <= 1000.0
        && s.captured
        && s.bound_violations == 0
        && !s.cage_contact
        && s.faults == 0;
    let max_fe = ["f_e1_x", "f_e1_y", "f_e1_z", "f_e2_x", "f_e2_y", "f_e2_z"]
        .iter()
        .map(|k| s.max_abs_input[*k])
        .fold(0.0, f64::max);
    outcome(
        pass,
        format!(
            "capture at {} of {} s, max |r| {:.3e} m, bound violations {}, faults {}, max |F_E| {:.2e} N",
            s.capture_time.map_or("never".into(), |t| format!("{t:.1} s")),
            cfg.control.duration,
            s.max_abs_position,
            s.bound_violations,
            s.faults,
            max_fe
        ),
    )
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(first: &Path, second: &Path) -> Outcome {
    let a = csv_files(first);
    let b = csv_files(second);
    if a != b || a.is_empty() {
        return outcome(false, format!("CSV sets differ: {a:?} vs {b:?}"));
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|p| std::fs::read(first.join(p)).unwrap() != std::fs::read(second.join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} CSV files compared between a parallel and a sequential rerun; differing: {differing:?}",
            a.len()
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        run(1, "dynamics equilibrium and integrator order", secs(1), equilibrium_and_integrator_order),
        run(2, "differentiation accuracy", secs(1), differentiation_accuracy),
        run(3, "STLS oracle equivalence", secs(30), stls_matches_best_subset),
        run(4, "discretization consistency", secs(1), discretization_consistency),
        run(5, "condensation correctness", secs(5), condensation_correctness),
        run(6, "QP solver", secs(30), qp_solver),
    ];

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg = capture_config(dir_a.path());
    let start = Instant::now();
    let first = run_pipeline(&cfg, Execution::Parallel);
    let pipeline_time = start.elapsed();
    println!(
        "pipeline (generate, fit, validate, control): {:.1} s",
        pipeline_time.as_secs_f64()
    );
    results.push(run(7, "identification quality", secs(15 * 60) - pipeline_time, || {
        identification_quality(&first, cfg.dataset.duration)
    }));
    results.push(run(8, "closed-loop capture", secs(10 * 60) - pipeline_time, || {
        closed_loop_capture(&first, &cfg)
    }));
    results.push(run(9, "reproducibility", secs(15 * 60), || {
        run_pipeline(&capture_config(dir_b.path()), Execution::Sequential);
        reproducibility(dir_a.path(), dir_b.path())
    }));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
