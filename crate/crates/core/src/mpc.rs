//! Box-constrained linear MPC on identified lifted models.
//!
//! Cost over the prediction horizon, with inputs held after the control
//! horizon (move blocking):
//!
//! ```text
//! J = Σ_{k=0}^{Np−1} (χ_k − χ_ref)ᵀQ(χ_k − χ_ref) + ū_kᵀRū_k + Δū_kᵀSΔū_k
//! χ_{k+1} = A_D χ_k + B_D ū_k,   ū_k = ū_{min(k, Nc−1)},   Δū_0 = ū_0 − u_prev
//! ```
//!
//! States are eliminated once ([`Condenser`]), leaving a dense QP in the
//! Nc·m stacked inputs whose Hessian never changes; each control step only
//! forms the gradient.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Table;
use crate::dictionary::Dictionary;
use crate::dynamics::{ControlInput, Plant, PlantState, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorConfig};
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpSolution};
use crate::sindy::LiftedModel;

/// Resolved per-entry weights and bounds for one lifted model.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcWeights {
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub s: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub reference: DVector<f64>,
}

impl MpcWeights {
    fn validate(&self, n: usize, m: usize) -> Result<()> {
        let dims = [
            ("Q", self.q.len(), n),
            ("reference", self.reference.len(), n),
            ("R", self.r.len(), m),
            ("S", self.s.len(), m),
            ("u_min", self.u_min.len(), m),
            ("u_max", self.u_max.len(), m),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::Config(format!("{name} has {got} entries, model needs {want}")));
            }
        }
        let all = self.q.iter().chain(self.r.iter()).chain(self.s.iter());
        if all.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        if let Some(i) = (0..m).find(|&i| self.r[i] + self.s[i] <= 0.0) {
            return Err(Error::Config(format!("input {i} has R + S = 0; the QP would not be strictly convex")));
        }
        if let Some(i) = (0..m).find(|&i| !(self.u_min[i] < self.u_max[i])) {
            return Err(Error::Config(format!("input {i}: u_min must be < u_max")));
        }
        Ok(())
    }

    /// Block-diagonal concatenation (stacked subsystems).
    pub fn stack(parts: &[MpcWeights]) -> Self {
        let cat = |f: fn(&MpcWeights) -> &DVector<f64>| {
            DVector::from_iterator(
                parts.iter().map(|p| f(p).len()).sum(),
                parts.iter().flat_map(|p| f(p).iter().copied()),
            )
        };
        Self {
            q: cat(|p| &p.q),
            r: cat(|p| &p.r),
            s: cat(|p| &p.s),
            u_min: cat(|p| &p.u_min),
            u_max: cat(|p| &p.u_max),
            reference: cat(|p| &p.reference),
        }
    }
}

/// Tuning for one subsystem, keyed by dictionary block name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsystemTuning {
    /// Q per state block; unlisted blocks get weight 0.
    pub state_weights: BTreeMap<String, f64>,
    /// R per input block.
    pub input_weights: BTreeMap<String, f64>,
    /// S per input block; unlisted blocks get 0.
    pub rate_weights: BTreeMap<String, f64>,
    /// Symmetric bound |u| ≤ limit per input block.
    pub input_limits: BTreeMap<String, f64>,
}

fn tuning(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
    entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl SubsystemTuning {
    pub fn attitude_default() -> Self {
        Self {
            state_weights: tuning(&[("theta_si", 600.0), ("zeta", 10.0)]),
            input_weights: tuning(&[("m_t", 18.0), ("m_mosa", 20.0)]),
            rate_weights: BTreeMap::new(),
            input_limits: tuning(&[("m_t", 2e-5), ("m_mosa", 2e-5)]),
        }
    }

    pub fn test_mass_default() -> Self {
        Self {
            state_weights: tuning(&[
                ("r_mo1", 0.005),
                ("theta_mo1", 0.0004),
                ("r_mo2", 0.005),
                ("theta_mo2", 0.0004),
            ]),
            input_weights: tuning(&[("f_e1", 0.01), ("m_e1", 0.001), ("f_e2", 0.01), ("m_e2", 0.001)]),
            rate_weights: BTreeMap::new(),
            input_limits: tuning(&[("f_e1", 1e-6), ("m_e1", 1e-6), ("f_e2", 1e-6), ("m_e2", 1e-6)]),
        }
    }

    /// Names of the state blocks with a positive weight.
    pub fn weighted_blocks(&self) -> Vec<String> {
        self.state_weights
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn resolve(&self, dict: &Dictionary) -> Result<MpcWeights> {
        let (n, m) = (dict.n_state(), dict.n_input());
        let mut q = DVector::zeros(n);
        for (name, w) in &self.state_weights {
            let block = dict
                .block(name)
                .ok_or_else(|| Error::Config(format!("dictionary {} has no state block {name}", dict.name)))?;
            q.rows_mut(block.start, block.len).fill(*w);
        }
        let input_vec = |map: &BTreeMap<String, f64>, default: Option<f64>, what: &str| -> Result<DVector<f64>> {
            for name in map.keys() {
                if dict.input_block(name).is_none() {
                    return Err(Error::Config(format!("dictionary {} has no input block {name}", dict.name)));
                }
            }
            let mut v = DVector::zeros(m);
            for block in &dict.input_blocks {
                let w = match (map.get(&block.name), default) {
                    (Some(w), _) => *w,
                    (None, Some(d)) => d,
                    (None, None) => {
                        return Err(Error::Config(format!("{what} missing for input block {}", block.name)));
                    }
                };
                v.rows_mut(block.start, block.len).fill(w);
            }
            Ok(v)
        };
        let r = input_vec(&self.input_weights, Some(0.0), "input weight")?;
        let s = input_vec(&self.rate_weights, Some(0.0), "rate weight")?;
        let limit = input_vec(&self.input_limits, None, "input limit")?;
        let w = MpcWeights {
            q,
            r,
            s,
            u_min: -&limit,
            u_max: limit,
            reference: DVector::zeros(n),
        };
        w.validate(n, m)?;
        Ok(w)
    }
}

/// Condensed form of the MPC problem for a fixed model and tuning.
#[derive(Clone, Debug)]
pub struct Condenser {
    a_d: DMatrix<f64>,
    weights: MpcWeights,
    np: usize,
    nc: usize,
    /// H = 2(Σ Γ_kᵀQΓ_k + Σ E_kᵀRE_k + Σ ΔE_kᵀSΔE_k)
    hessian: DMatrix<f64>,
    /// Σ Γ_kᵀ Q Φ_k
    fx: DMatrix<f64>,
    /// Σ Γ_kᵀ Q
    fr: DMatrix<f64>,
    /// E_0ᵀ S
    fs: DMatrix<f64>,
}

impl Condenser {
    pub fn new(a_d: &DMatrix<f64>, b_d: &DMatrix<f64>, weights: &MpcWeights, np: usize, nc: usize) -> Result<Self> {
        let (n, m) = (a_d.nrows(), b_d.ncols());
        if a_d.ncols() != n || b_d.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "model matrices",
                expected: n,
                actual: b_d.nrows(),
            });
        }
        if !(np >= nc && nc >= 1) {
            return Err(Error::Config(format!("need Np >= Nc >= 1, got Np {np}, Nc {nc}")));
        }
        if a_d.iter().chain(b_d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model matrices"));
        }
        weights.validate(n, m)?;
        let d = m * nc;
        let block = |k: usize| k.min(nc - 1) * m;

        let mut phi = DMatrix::<f64>::identity(n, n);
        let mut gamma = DMatrix::<f64>::zeros(n, d);
        let mut hessian = DMatrix::<f64>::zeros(d, d);
        let mut fx = DMatrix::<f64>::zeros(d, n);
        let mut fr = DMatrix::<f64>::zeros(d, n);
        for k in 0..np {
            // State term at step k.
            let mut qg = gamma.clone();
            for (i, mut row) in qg.row_iter_mut().enumerate() {
                row *= weights.q[i];
            }
            hessian += gamma.transpose() * &qg;
            fx += qg.transpose() * &phi;
            fr += qg.transpose();
            // Input and increment terms.
            let bk = block(k);
            for i in 0..m {
                hessian[(bk + i, bk + i)] += weights.r[i];
                if k == 0 {
                    hessian[(bk + i, bk + i)] += weights.s[i];
                } else {
                    let bp = block(k - 1);
                    if bp != bk {
                        hessian[(bk + i, bk + i)] += weights.s[i];
                        hessian[(bp + i, bp + i)] += weights.s[i];
                        hessian[(bk + i, bp + i)] -= weights.s[i];
                        hessian[(bp + i, bk + i)] -= weights.s[i];
                    }
                }
            }
            // Advance to k + 1.
            gamma = a_d * &gamma;
            let mut cols = gamma.columns_mut(bk, m);
            cols += b_d;
            phi = a_d * &phi;
        }
        // Round-off in ΓᵀQΓ leaves a tiny asymmetry.
        let hessian = &hessian + hessian.transpose();
        let mut fs = DMatrix::zeros(d, m);
        for i in 0..m {
            fs[(i, i)] = weights.s[i];
        }
        Ok(Self {
            a_d: a_d.clone(),
            weights: weights.clone(),
            np,
            nc,
            hessian,
            fx,
            fr,
            fs,
        })
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn weights(&self) -> &MpcWeights {
        &self.weights
    }

    /// QP whose objective equals J minus [`Self::constant`].
    pub fn condense(&self, chi0: &DVector<f64>, u_prev: &DVector<f64>) -> QpProblem {
        let g = (&self.fx * chi0 - &self.fr * &self.weights.reference - &self.fs * u_prev) * 2.0;
        let rep = |v: &DVector<f64>| DVector::from_iterator(self.dim(), (0..self.nc).flat_map(|_| v.iter().copied()));
        QpProblem {
            h: self.hessian.clone(),
            g,
            lb: rep(&self.weights.u_min),
            ub: rep(&self.weights.u_max),
        }
    }

    /// Part of J that does not depend on the decision variables.
    pub fn constant(&self, chi0: &DVector<f64>, u_prev: &DVector<f64>) -> f64 {
        let w = &self.weights;
        let mut chi = chi0.clone();
        let mut c = 0.0;
        for _ in 0..self.np {
            let e = &chi - &w.reference;
            c += e.iter().zip(w.q.iter()).map(|(e, q)| q * e * e).sum::<f64>();
            chi = &self.a_d * chi;
        }
        c + u_prev.iter().zip(w.s.iter()).map(|(u, s)| s * u * u).sum::<f64>()
    }

    /// J at the stacked input sequence `u`.
    pub fn cost(&self, chi0: &DVector<f64>, u_prev: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.condense(chi0, u_prev).objective(u) + self.constant(chi0, u_prev)
    }

    /// Solve the condensed QP after normalising variables to the box
    /// half-widths and the objective to unit Hessian scale, so the KKT
    /// tolerance is relative. The result is clamped back onto the
    /// physical box, keeping bounds exact.
    pub fn solve(&self, chi0: &DVector<f64>, u_prev: &DVector<f64>, settings: &QpSettings) -> Result<QpSolution, QpError> {
        let qp = self.condense(chi0, u_prev);
        let d = qp.dim();
        let scale = DVector::from_fn(d, |i, _| {
            let half = 0.5 * (qp.ub[i] - qp.lb[i]);
            if half.is_finite() && half > 0.0 { half } else { 1.0 }
        });
        let mut h = qp.h.clone();
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] *= scale[i] * scale[j];
            }
        }
        let c = 1.0 / h.amax().max(f64::MIN_POSITIVE);
        h *= c;
        let scaled = QpProblem {
            h,
            g: qp.g.component_mul(&scale) * c,
            lb: qp.lb.component_div(&scale),
            ub: qp.ub.component_div(&scale),
        };
        let sol = solve_qp(&scaled, settings)?;
        let x = DVector::from_fn(d, |i, _| (sol.x[i] * scale[i]).clamp(qp.lb[i], qp.ub[i]));
        Ok(QpSolution {
            objective: qp.objective(&x),
            x,
            iterations: sol.iterations,
            residuals: sol.residuals,
        })
    }
}

/// Free-function form of [`Condenser::condense`].
pub fn condense(
    model: &LiftedModel,
    weights: &MpcWeights,
    np: usize,
    nc: usize,
    chi0: &DVector<f64>,
    u_prev: &DVector<f64>,
) -> Result<QpProblem> {
    Ok(Condenser::new(&model.a_d, &model.b_d, weights, np, nc)?.condense(chi0, u_prev))
}

pub fn block_diagonal(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for p in parts {
        out.view_mut((r, c), p.shape()).copy_from(*p);
        r += p.nrows();
        c += p.ncols();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon Np, steps.
    pub horizon: usize,
    /// Control horizon Nc, steps.
    pub control_horizon: usize,
    pub attitude: SubsystemTuning,
    pub test_mass: SubsystemTuning,
    pub qp_tol: f64,
    pub qp_max_iter: Option<usize>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            control_horizon: 1,
            attitude: SubsystemTuning::attitude_default(),
            test_mass: SubsystemTuning::test_mass_default(),
            qp_tol: 1e-8,
            qp_max_iter: None,
        }
    }
}

impl MpcConfig {
    pub fn qp_settings(&self) -> QpSettings {
        QpSettings {
            tol: self.qp_tol,
            max_iter: self.qp_max_iter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon >= self.control_horizon && self.control_horizon >= 1) {
            return Err(Error::Config(format!(
                "need horizon >= control_horizon >= 1, got {} and {}",
                self.horizon, self.control_horizon
            )));
        }
        if !(self.qp_tol > 0.0) {
            return Err(Error::Config("qp_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Map from the QP's input vector ū to physical inputs, given the measured
/// state. Identity when absent.
pub type InputTransform = Arc<dyn Fn(&PlantState, ControlInput) -> ControlInput + Send + Sync>;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub input: ControlInput,
    /// Eq.-23 cost of the chosen inputs; NaN when the step faulted.
    pub cost: f64,
    pub iterations: usize,
    pub fault: Option<String>,
}

/// Receding-horizon controller over one or more stacked lifted models.
pub struct Controller {
    models: Vec<LiftedModel>,
    condenser: Condenser,
    settings: QpSettings,
    transform: Option<InputTransform>,
    u_prev: DVector<f64>,
    last_input: ControlInput,
    step: usize,
}

impl Controller {
    pub fn new(subsystems: Vec<(LiftedModel, SubsystemTuning)>, cfg: &MpcConfig) -> Result<Self> {
        cfg.validate()?;
        if subsystems.is_empty() {
            return Err(Error::Config("controller needs at least one model".into()));
        }
        let dt = subsystems[0].0.dt;
        if subsystems.iter().any(|(m, _)| (m.dt - dt).abs() > 1e-12) {
            return Err(Error::Config("stacked models disagree on dt".into()));
        }
        let weights = subsystems
            .iter()
            .map(|(m, t)| t.resolve(&m.dictionary))
            .collect::<Result<Vec<_>>>()?;
        let weights = MpcWeights::stack(&weights);
        let models: Vec<LiftedModel> = subsystems.into_iter().map(|(m, _)| m).collect();
        let a_d = block_diagonal(&models.iter().map(|m| &m.a_d).collect::<Vec<_>>());
        let b_d = block_diagonal(&models.iter().map(|m| &m.b_d).collect::<Vec<_>>());
        let condenser = Condenser::new(&a_d, &b_d, &weights, cfg.horizon, cfg.control_horizon)?;
        let m = b_d.ncols();
        Ok(Self {
            models,
            condenser,
            settings: cfg.qp_settings(),
            transform: None,
            u_prev: DVector::zeros(m),
            last_input: ControlInput::zeros(),
            step: 0,
        })
    }

    pub fn with_transform(mut self, transform: InputTransform) -> Self {
        self.transform = Some(transform);
        self
    }

    pub fn dt(&self) -> f64 {
        self.models[0].dt
    }

    /// Physical |u| bound per channel; 0 for channels no model drives.
    pub fn input_limits(&self) -> [f64; INPUT_DIM] {
        let w = self.condenser.weights();
        let half = DVector::from_fn(w.u_max.len(), |i, _| w.u_max[i].abs().max(w.u_min[i].abs()));
        let mut out = [0.0; INPUT_DIM];
        let mut at = 0;
        for m in &self.models {
            let k = m.dictionary.n_input();
            m.dictionary.unlift_inputs_into(&half.as_slice()[at..at + k], &mut out);
            at += k;
        }
        out
    }

    pub fn condenser(&self) -> &Condenser {
        &self.condenser
    }

    pub fn lift(&self, x: &PlantState) -> DVector<f64> {
        let x = x.to_array();
        let parts: Vec<DVector<f64>> = self.models.iter().map(|m| m.dictionary.lift_slice(&x)).collect();
        DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
    }

    fn to_physical(&self, u_bar: &DVector<f64>) -> ControlInput {
        let mut u = [0.0; INPUT_DIM];
        let mut at = 0;
        for m in &self.models {
            let k = m.dictionary.n_input();
            m.dictionary.unlift_inputs_into(&u_bar.as_slice()[at..at + k], &mut u);
            at += k;
        }
        ControlInput::from_slice(&u).expect("input width")
    }

    /// Measure, lift, solve, apply the first input block. On solver failure
    /// the previously applied input is held.
    pub fn control_step(&mut self, x: &PlantState) -> StepOutcome {
        let step = self.step;
        self.step += 1;
        let chi = self.lift(x);
        match self.condenser.solve(&chi, &self.u_prev, &self.settings) {
            Ok(sol) => {
                let m = self.u_prev.len();
                let first = sol.x.rows(0, m).into_owned();
                let cost = sol.objective + self.condenser.constant(&chi, &self.u_prev);
                let mut input = self.to_physical(&first);
                if let Some(t) = &self.transform {
                    input = t(x, input);
                }
                self.u_prev = first;
                self.last_input = input.clone();
                StepOutcome {
                    input,
                    cost,
                    iterations: sol.iterations,
                    fault: None,
                }
            }
            Err(e) => {
                warn!("control step {step}: QP failed ({e}); holding previous input");
                StepOutcome {
                    input: self.last_input.clone(),
                    cost: f64::NAN,
                    iterations: 0,
                    fault: Some(e.to_string()),
                }
            }
        }
    }
}

/// One row per control step.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopLog {
    pub times: Vec<f64>,
    /// Measured state at each control step (N × 34).
    pub states: Table,
    /// Input applied over [t_k, t_k + dt) (N × 20).
    pub inputs: Table,
    pub costs: Vec<f64>,
    pub iterations: Vec<usize>,
    /// (step, message) for every step that fell back to holding its input.
    pub faults: Vec<(usize, String)>,
    pub final_time: f64,
    pub final_state: PlantState,
}

impl ClosedLoopLog {
    pub fn csv_header() -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..STATE_DIM).map(crate::dictionary::state_component_name));
        cols.extend((0..INPUT_DIM).map(crate::dictionary::input_channel_name));
        cols.push("qp_cost".into());
        cols.push("qp_iterations".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for k in 0..self.times.len() {
            let mut cells = vec![format!("{:e}", self.times[k])];
            cells.extend(self.states.row(k).iter().map(|v| format!("{v:e}")));
            cells.extend(self.inputs.row(k).iter().map(|v| format!("{v:e}")));
            cells.push(format!("{:e}", self.costs[k]));
            cells.push(self.iterations[k].to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Alternate controller steps with `dt` of nonlinear plant integration
/// under the held input.
pub fn run_closed_loop(
    plant: &Plant,
    controller: &mut Controller,
    x0: &PlantState,
    duration: f64,
    integrator: &IntegratorConfig,
) -> Result<ClosedLoopLog> {
    if !(duration > 0.0) {
        return Err(Error::Config(format!("duration must be > 0, got {duration}")));
    }
    let dt = controller.dt();
    let steps = (duration / dt).round() as usize;
    let mut cfg = IntegratorConfig {
        output_dt: dt,
        max_step: integrator.max_step.min(dt),
        ..integrator.clone()
    };
    let mut log = ClosedLoopLog {
        times: Vec::with_capacity(steps),
        states: Table::zeros(steps, STATE_DIM),
        inputs: Table::zeros(steps, INPUT_DIM),
        costs: Vec::with_capacity(steps),
        iterations: Vec::with_capacity(steps),
        faults: Vec::new(),
        final_time: 0.0,
        final_state: x0.clone(),
    };
    let mut x = x0.to_array();
    for k in 0..steps {
        let t = k as f64 * dt;
        let state = PlantState::from_slice(&x)?;
        let out = controller.control_step(&state);
        log.times.push(t);
        log.states.row_mut(k).copy_from_slice(&x);
        log.inputs.row_mut(k).copy_from_slice(&out.input.to_array());
        log.costs.push(out.cost);
        log.iterations.push(out.iterations);
        if let Some(f) = out.fault {
            log.faults.push((k, f));
        }
        let u = out.input;
        let f = |tt: f64, xs: &[f64], dx: &mut [f64]| plant.derivative_slice(tt, xs, &u, dx);
        let traj = integrate(f, &x, (t, t + dt), &cfg)?;
        cfg.initial_step = Some(traj.last_step);
        x.copy_from_slice(traj.states.last().expect("at least one sample"));
    }
    log.final_time = steps as f64 * dt;
    log.final_state = PlantState::from_slice(&x)?;
    Ok(log)
}

/// Thresholds defining a successful test-mass capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureCriteria {
    /// Per-axis |r_MO| below this counts as captured, m.
    pub position_tol: f64,
    /// Per-axis |θ_MO| below this counts as captured, rad.
    pub angle_tol: f64,
    /// Per-axis |r_MO| above this is a cage collision, m.
    pub cage_limit: f64,
}

impl Default for CaptureCriteria {
    fn default() -> Self {
        Self {
            position_tol: 1e-6,
            angle_tol: 1e-5,
            cage_limit: 2e-3,
        }
    }
}

impl CaptureCriteria {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.position_tol, self.angle_tol, self.cage_limit]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !ok {
            return Err(Error::Config("capture tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub captured: bool,
    /// Earliest time from which every later sample is inside both tolerances.
    pub capture_time: Option<f64>,
    pub position_settle_time: Option<f64>,
    pub angle_settle_time: Option<f64>,
    pub max_abs_position: f64,
    pub cage_contact: bool,
    pub bound_violations: usize,
    /// Largest |u| per input channel.
    pub max_abs_input: BTreeMap<String, f64>,
    pub faults: usize,
    pub final_time: f64,
    pub final_max_abs_position: f64,
    pub final_max_abs_angle: f64,
}

fn tm_abs_max(x: &[f64], offset: usize) -> f64 {
    use crate::dynamics::state_layout::TM;
    TM.iter()
        .flat_map(|tm| x[tm + offset..tm + offset + 3].iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

/// Earliest sample time after which `inside` holds through the final state.
fn settle_time(log: &ClosedLoopLog, inside: impl Fn(&[f64]) -> bool) -> Option<f64> {
    if !inside(&log.final_state.to_array()) {
        return None;
    }
    let mut t = log.final_time;
    for k in (0..log.times.len()).rev() {
        if !inside(log.states.row(k)) {
            break;
        }
        t = log.times[k];
    }
    Some(t)
}

impl ClosedLoopLog {
    /// `limits[i]` bounds |u_i|; channels outside the controller have limit 0.
    pub fn capture_summary(&self, limits: &[f64; INPUT_DIM], criteria: &CaptureCriteria) -> CaptureSummary {
        use crate::dynamics::state_layout::{R, THETA};
        let pos = |x: &[f64]| tm_abs_max(x, R) < criteria.position_tol;
        let ang = |x: &[f64]| tm_abs_max(x, THETA) < criteria.angle_tol;
        let max_abs_position = (0..self.times.len())
            .map(|k| tm_abs_max(self.states.row(k), R))
            .chain(std::iter::once(tm_abs_max(&self.final_state.to_array(), R)))
            .fold(0.0, f64::max);
        let mut max_abs_input = BTreeMap::new();
        let mut bound_violations = 0;
        for i in 0..INPUT_DIM {
            let mut m: f64 = 0.0;
            for k in 0..self.times.len() {
                let u = self.inputs.row(k)[i].abs();
                m = m.max(u);
                if u > limits[i] {
                    bound_violations += 1;
                }
            }
            max_abs_input.insert(crate::dictionary::input_channel_name(i), m);
        }
        let capture_time = settle_time(self, |x| pos(x) && ang(x));
        let fin = self.final_state.to_array();
        CaptureSummary {
            captured: capture_time.is_some() && max_abs_position <= criteria.cage_limit,
            capture_time,
            position_settle_time: settle_time(self, pos),
            angle_settle_time: settle_time(self, ang),
            max_abs_position,
            cage_contact: max_abs_position > criteria.cage_limit,
            bound_violations,
            max_abs_input,
            faults: self.faults.len(),
            final_time: self.final_time,
            final_max_abs_position: tm_abs_max(&fin, R),
            final_max_abs_angle: tm_abs_max(&fin, THETA),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>, MpcWeights) {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let w = MpcWeights {
            q: DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0)),
            r: DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0)),
            s: DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0)),
            u_min: DVector::from_element(m, -1.0),
            u_max: DVector::from_element(m, 1.0),
            reference: DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
        };
        (a, b, w)
    }

    /// Direct simulation of the cost along the model recursion.
    fn recursive_cost(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        w: &MpcWeights,
        np: usize,
        nc: usize,
        chi0: &DVector<f64>,
        u_prev: &DVector<f64>,
        u: &DVector<f64>,
    ) -> f64 {
        let m = b.ncols();
        let mut chi = chi0.clone();
        let mut prev = u_prev.clone();
        let mut j = 0.0;
        for k in 0..np {
            let uk = u.rows(k.min(nc - 1) * m, m).into_owned();
            let e = &chi - &w.reference;
            let du = &uk - &prev;
            for i in 0..e.len() {
                j += w.q[i] * e[i] * e[i];
            }
            for i in 0..m {
                j += w.r[i] * uk[i] * uk[i] + w.s[i] * du[i] * du[i];
            }
            chi = a * &chi + b * &uk;
            prev = uk;
        }
        j
    }

    #[test]
    fn condensed_cost_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=2));
            let np = rng.random_range(1..=3);
            let nc = rng.random_range(1..=np);
            let (a, b, w) = random_instance(&mut rng, n, m);
            let c = Condenser::new(&a, &b, &w, np, nc).unwrap();
            let chi0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let u_prev = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            for _ in 0..5 {
                let u = DVector::from_fn(m * nc, |_, _| rng.random_range(-1.0..1.0));
                let want = recursive_cost(&a, &b, &w, np, nc, &chi0, &u_prev, &u);
                assert_relative_eq!(c.cost(&chi0, &u_prev, &u), want, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn double_integrator_two_steps_by_hand() {
        // x = (p, v), A = [[1, h], [0, 1]], B = [h²/2, h]ᵀ, Q = diag(q, 0), R = r, S = 0, Np = 2, Nc = 1.
        // χ_1 = A χ_0 + B u, so J(u) = q p0² + q(p0 + h v0 + h²u/2)² + 2 r u².
        // H = 2(q h⁴/4 + 2r), g = 2 q (h²/2)(p0 + h v0).
        let (h, q, r) = (0.5, 3.0, 0.2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[h * h / 2.0, h]);
        let w = MpcWeights {
            q: DVector::from_vec(vec![q, 0.0]),
            r: DVector::from_element(1, r),
            s: DVector::zeros(1),
            u_min: DVector::from_element(1, -10.0),
            u_max: DVector::from_element(1, 10.0),
            reference: DVector::zeros(2),
        };
        let c = Condenser::new(&a, &b, &w, 2, 1).unwrap();
        let (p0, v0) = (0.7, -0.3);
        let qp = c.condense(&DVector::from_vec(vec![p0, v0]), &DVector::zeros(1));
        assert_relative_eq!(qp.h[(0, 0)], 2.0 * (q * h.powi(4) / 4.0 + 2.0 * r), max_relative = 1e-14);
        assert_relative_eq!(qp.g[0], 2.0 * q * (h * h / 2.0) * (p0 + h * v0), max_relative = 1e-14);
    }

    #[test]
    fn origin_gives_zero_gradient_and_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, mut w) = random_instance(&mut rng, 3, 2);
        w.reference.fill(0.0);
        let c = Condenser::new(&a, &b, &w, 5, 1).unwrap();
        assert_eq!(c.dim(), 2);
        let qp = c.condense(&DVector::zeros(3), &DVector::zeros(2));
        assert!(qp.g.iter().all(|v| *v == 0.0));
        let sol = c.solve(&DVector::zeros(3), &DVector::zeros(2), &QpSettings::default()).unwrap();
        assert!(sol.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn argmin_invariant_under_joint_weight_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b, w) = random_instance(&mut rng, 3, 2);
            let chi0 = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let u_prev = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let base = Condenser::new(&a, &b, &w, 4, 2).unwrap();
            let x0 = base.solve(&chi0, &u_prev, &QpSettings::default()).unwrap().x;
            for scale in [1e-6, 0.3, 7.0, 1e5] {
                let ws = MpcWeights {
                    q: &w.q * scale,
                    r: &w.r * scale,
                    s: &w.s * scale,
                    ..w.clone()
                };
                let c = Condenser::new(&a, &b, &ws, 4, 2).unwrap();
                let x = c.solve(&chi0, &u_prev, &QpSettings::default()).unwrap().x;
                assert_relative_eq!(x, x0, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn long_horizon_first_move_matches_lqr() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let (q, r) = (DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5])), 0.2);
        // Riccati iteration to the stationary gain.
        let mut p = q.clone();
        for _ in 0..20_000 {
            let btp = b.transpose() * &p;
            let s = (&btp * &b)[(0, 0)] + r;
            p = &q + a.transpose() * &p * &a - a.transpose() * btp.transpose() * (&btp * &a) / s;
        }
        let btp = b.transpose() * &p;
        let k = (&btp * &a) / ((&btp * &b)[(0, 0)] + r);
        let w = MpcWeights {
            q: DVector::from_vec(vec![1.0, 0.5]),
            r: DVector::from_element(1, r),
            s: DVector::zeros(1),
            u_min: DVector::from_element(1, -1e6),
            u_max: DVector::from_element(1, 1e6),
            reference: DVector::zeros(2),
        };
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let lqr = -(&k * &x0)[(0, 0)];
        let mut prev_err = f64::INFINITY;
        for np in [20, 80, 300] {
            let c = Condenser::new(&a, &b, &w, np, np).unwrap();
            let u0 = c.solve(&x0, &DVector::zeros(1), &QpSettings::default()).unwrap().x[0];
            let err = (u0 - lqr).abs();
            assert!(err <= prev_err + 1e-12);
            prev_err = err;
        }
        assert!(prev_err < 1e-6 * lqr.abs(), "error {prev_err}, lqr {lqr}");
    }

    #[test]
    fn tuning_resolves_by_block_name() {
        let att = Dictionary::attitude();
        let w = SubsystemTuning::attitude_default().resolve(&att).unwrap();
        assert_eq!(w.q.len(), 27);
        assert!(w.q.rows(0, 3).iter().all(|v| *v == 600.0));
        assert!(w.q.rows(3, 2).iter().all(|v| *v == 10.0));
        assert!(w.q.rows(5, 22).iter().all(|v| *v == 0.0));
        assert_eq!(w.r.as_slice(), &[18.0, 18.0, 18.0, 20.0, 20.0]);
        assert_eq!(w.u_max[0], 2e-5);
        let tm = SubsystemTuning::test_mass_default().resolve(&Dictionary::test_mass()).unwrap();
        assert_eq!(tm.q.iter().filter(|v| **v == 0.0).count(), 72);
        assert_eq!(tm.u_min.as_slice(), &[-1e-6; 12]);

        let mut bad = SubsystemTuning::attitude_default();
        bad.state_weights.insert("nonexistent".into(), 1.0);
        assert!(bad.resolve(&att).is_err());
        let mut bad = SubsystemTuning::attitude_default();
        bad.input_limits.remove("m_t");
        assert!(bad.resolve(&att).is_err());
        let mut bad = SubsystemTuning::attitude_default();
        bad.input_weights.insert("m_t".into(), 0.0);
        assert!(bad.resolve(&att).is_err());
    }

    #[test]
    fn rejects_bad_horizons() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b, w) = random_instance(&mut rng, 2, 1);
        assert!(Condenser::new(&a, &b, &w, 2, 3).is_err());
        assert!(Condenser::new(&a, &b, &w, 2, 0).is_err());
    }
}
