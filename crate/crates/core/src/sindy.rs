//! Sparse identification of lifted linear models.
//!
//! The library matrix Θ = [Ψ Ψ̄ Ψ_u] and the chain-rule targets dΨ/dt are
//! regressed column by column with sequential thresholded least squares.
//! Θ is reduced once to its triangular factor by a chunked (TSQR) QR, so each
//! restricted least-squares solve works on an L×L system instead of the full
//! snapshot matrix.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Table, TrajectoryRecord};
use crate::dictionary::{Block, Dictionary};
use crate::dynamics::STATE_DIM;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StlsConfig {
    /// Threshold on coefficient magnitude, applied to scaled coefficients
    /// when `scale_columns` is set.
    pub lambda: f64,
    pub max_iters: usize,
    /// Normalise library columns to unit RMS before thresholding.
    pub scale_columns: bool,
    /// Also normalise each target column to unit RMS, making `lambda` a
    /// relative threshold shared by targets of very different magnitude.
    pub scale_targets: bool,
    /// Rows per TSQR block.
    pub chunk_rows: usize,
    /// Leading part of each trajectory left out of the regression, s. The
    /// lightly damped MOSA mode rings far above the sampling Nyquist rate
    /// right after release, so its finite-difference derivatives are aliased.
    pub settle_time: f64,
}

impl Default for StlsConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-13,
            max_iters: 20,
            scale_columns: true,
            scale_targets: true,
            chunk_rows: 4096,
            settle_time: 5.0,
        }
    }
}

impl StlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.settle_time >= 0.0) {
            return Err(Error::Config("settle_time must be >= 0".into()));
        }
        if self.max_iters == 0 || self.chunk_rows == 0 {
            return Err(Error::Config("max_iters and chunk_rows must be positive".into()));
        }
        Ok(())
    }
}

/// Snapshot library Θ (P×L) and targets (P×N).
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    pub library: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl RegressionProblem {
    pub fn new(library: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if library.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch {
                context: "regression rows",
                expected: library.nrows(),
                actual: targets.nrows(),
            });
        }
        if library.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression data"));
        }
        Ok(Self { library, targets })
    }

    pub fn rows(&self) -> usize {
        self.library.nrows()
    }
}

/// Build Θ and dΨ/dt from the interior snapshots of `trajectories` with
/// time ≥ `t_min` relative to each trajectory's start.
pub fn lift_dataset<'a, I>(trajectories: I, dict: &Dictionary, t_min: f64) -> Result<RegressionProblem>
where
    I: IntoIterator<Item = &'a TrajectoryRecord>,
{
    dict.validate()?;
    let trajectories: Vec<&TrajectoryRecord> = trajectories.into_iter().collect();
    for t in &trajectories {
        if t.states.cols != STATE_DIM || t.derivatives.rows + 4 != t.states.rows {
            return Err(Error::DimensionMismatch {
                context: "trajectory tables",
                expected: STATE_DIM,
                actual: t.states.cols,
            });
        }
    }
    let first = |t: &TrajectoryRecord| {
        (0..t.derivatives.rows)
            .find(|&k| t.times[k + 2] - t.times[0] >= t_min - 1e-9)
            .unwrap_or(t.derivatives.rows)
    };
    let rows: usize = trajectories.iter().map(|t| t.derivatives.rows - first(t)).sum();
    let (l, n) = (dict.n_library(), dict.n_state());
    let mut library = DMatrix::zeros(rows, l);
    let mut targets = DMatrix::zeros(rows, n);
    let mut row = vec![0.0; l];
    let mut r = 0;
    for t in trajectories {
        for k in first(t)..t.derivatives.rows {
            let x = t.states.row(k + 2);
            dict.library_row(x, t.inputs.row(k + 2), &mut row);
            for (c, v) in row.iter().enumerate() {
                library[(r, c)] = *v;
            }
            let rate = dict.lift_rate(x, t.derivatives.row(k));
            for (c, v) in rate.iter().enumerate() {
                targets[(r, c)] = *v;
            }
            r += 1;
        }
    }
    RegressionProblem::new(library, targets)
}

/// Upper-triangular factor R of `a` (ncols × ncols) by blockwise QR.
/// Block boundaries depend only on `chunk`, so the result is identical for
/// every execution mode.
pub fn tsqr(a: &DMatrix<f64>, chunk: usize, exec: Execution) -> DMatrix<f64> {
    let (p, c) = a.shape();
    let n_chunks = p.div_ceil(chunk.max(1)).max(1);
    let pieces = map_indexed(exec, n_chunks, |i| {
        let start = i * chunk;
        let len = chunk.min(p - start.min(p));
        a.rows(start, len).into_owned().qr().r()
    });
    let stacked_rows: usize = pieces.iter().map(|r| r.nrows()).sum();
    let mut stacked = DMatrix::zeros(stacked_rows, c);
    let mut at = 0;
    for piece in &pieces {
        stacked.rows_mut(at, piece.nrows()).copy_from(piece);
        at += piece.nrows();
    }
    let r = if pieces.len() == 1 {
        pieces.into_iter().next().expect("one piece")
    } else {
        stacked.qr().r()
    };
    let mut out = DMatrix::zeros(c, c);
    let k = r.nrows().min(c);
    out.rows_mut(0, k).copy_from(&r.rows(0, k));
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnDiagnostics {
    pub support: usize,
    pub iterations: usize,
    pub converged: bool,
    /// ‖y − Θξ‖₂ of the returned coefficients.
    pub residual: f64,
    /// Same on the full support (plain least squares).
    pub ls_residual: f64,
    pub rank_deficient: bool,
    pub empty_support: bool,
    /// Condition number of the final restricted (scaled) system; `None` when singular.
    pub condition: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rows: usize,
    pub lambda: f64,
    pub scaled: bool,
    pub column_scale: Vec<f64>,
    pub target_scale: Vec<f64>,
    pub columns: Vec<ColumnDiagnostics>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StlsFit {
    /// L×N coefficients with exact zeros off support.
    pub xi: DMatrix<f64>,
    /// `support[j][i]`: library column i active for target j.
    pub support: Vec<Vec<bool>>,
    pub diagnostics: FitDiagnostics,
}

struct Restricted {
    coef: DVector<f64>,
    rank_deficient: bool,
    condition: f64,
}

/// min ‖R_S ξ − c‖ by SVD; minimum-norm when R_S is rank deficient.
fn solve_restricted(r: &DMatrix<f64>, c: &DVector<f64>, support: &[bool]) -> Restricted {
    let cols: Vec<usize> = (0..support.len()).filter(|&i| support[i]).collect();
    let mut coef = DVector::zeros(support.len());
    if cols.is_empty() {
        return Restricted {
            coef,
            rank_deficient: false,
            condition: 0.0,
        };
    }
    let rs = r.select_columns(&cols);
    let svd = rs.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * r.nrows().max(cols.len()) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let smin = svd.singular_values.min();
    let sol = svd.solve(c, tol).expect("U and V were computed");
    for (k, &i) in cols.iter().enumerate() {
        coef[i] = sol[k];
    }
    Restricted {
        coef,
        rank_deficient: rank < cols.len(),
        condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
    }
}

fn residual_norm(r: &DMatrix<f64>, c: &DVector<f64>, tail_sq: f64, coef: &DVector<f64>) -> f64 {
    ((c - r * coef).norm_squared() + tail_sq).sqrt()
}

/// Sequential thresholded least squares on every target column.
pub fn stls(problem: &RegressionProblem, cfg: &StlsConfig, exec: Execution) -> Result<StlsFit> {
    cfg.validate()?;
    let (p, l) = problem.library.shape();
    let n = problem.targets.ncols();
    if p == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut warnings = Vec::new();
    if p < l {
        warnings.push(format!("{p} snapshots for {l} library columns; system is underdetermined"));
    }

    let scale: Vec<f64> = (0..l)
        .map(|c| {
            if !cfg.scale_columns {
                return 1.0;
            }
            let rms = (problem.library.column(c).norm_squared() / p as f64).sqrt();
            if rms > 0.0 { rms } else { 1.0 }
        })
        .collect();

    let mut augmented = DMatrix::zeros(p, l + n);
    for c in 0..l {
        let s = scale[c];
        augmented
            .column_mut(c)
            .zip_apply(&problem.library.column(c), |dst, src| *dst = src / s);
    }
    let target_scale: Vec<f64> = (0..n)
        .map(|j| {
            let rms = (problem.targets.column(j).norm_squared() / p as f64).sqrt();
            if cfg.scale_targets && rms > 0.0 { rms } else { 1.0 }
        })
        .collect();
    for j in 0..n {
        let s = target_scale[j];
        augmented
            .column_mut(l + j)
            .zip_apply(&problem.targets.column(j), |dst, src| *dst = src / s);
    }
    let r_aug = tsqr(&augmented, cfg.chunk_rows, exec);
    let r = r_aug.view((0, 0), (l, l)).into_owned();

    let results = map_indexed(exec, n, |j| {
        let c: DVector<f64> = r_aug.view((0, l + j), (l, 1)).column(0).into_owned();
        let tail_sq = r_aug.view((l, l + j), (n, 1)).norm_squared();
        let mut support = vec![true; l];
        let mut diag = ColumnDiagnostics::default();
        let mut sol = solve_restricted(&r, &c, &support);
        diag.ls_residual = residual_norm(&r, &c, tail_sq, &sol.coef);
        diag.rank_deficient = sol.rank_deficient;
        let mut iterations = 1;
        loop {
            let next: Vec<bool> = (0..l).map(|i| support[i] && sol.coef[i].abs() >= cfg.lambda).collect();
            if next == support {
                diag.converged = true;
                break;
            }
            support = next;
            if !support.iter().any(|s| *s) {
                sol = solve_restricted(&r, &c, &support);
                diag.converged = true;
                break;
            }
            if iterations == cfg.max_iters {
                sol = solve_restricted(&r, &c, &support);
                break;
            }
            sol = solve_restricted(&r, &c, &support);
            diag.rank_deficient |= sol.rank_deficient;
            iterations += 1;
        }
        diag.iterations = iterations;
        diag.support = support.iter().filter(|s| **s).count();
        diag.empty_support = diag.support == 0;
        diag.residual = residual_norm(&r, &c, tail_sq, &sol.coef) * target_scale[j];
        diag.ls_residual *= target_scale[j];
        diag.condition = Some(sol.condition).filter(|c| c.is_finite());
        let coef: Vec<f64> = (0..l).map(|i| sol.coef[i] / scale[i] * target_scale[j]).collect();
        (coef, support, diag)
    });

    let mut xi = DMatrix::zeros(l, n);
    let mut support = Vec::with_capacity(n);
    let mut columns = Vec::with_capacity(n);
    for (j, (coef, s, d)) in results.into_iter().enumerate() {
        for i in 0..l {
            xi[(i, j)] = coef[i];
        }
        if d.rank_deficient {
            warnings.push(format!("target {j}: rank-deficient restricted system, minimum-norm solution used"));
        }
        if d.empty_support {
            warnings.push(format!("target {j}: every library column eliminated"));
        }
        if !d.converged {
            warnings.push(format!("target {j}: support not settled after {} iterations", d.iterations));
        }
        support.push(s);
        columns.push(d);
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(StlsFit {
        xi,
        support,
        diagnostics: FitDiagnostics {
            rows: p,
            lambda: cfg.lambda,
            scaled: cfg.scale_columns,
            column_scale: scale,
            target_scale,
            columns,
            warnings,
        },
    })
}

/// Zero-order-hold discretisation: exp([[A, B], [0, 0]]·dt) = [[A_D, B_D], [0, I]].
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = aug.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

/// Identified lifted model, continuous and discrete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedModel {
    pub format: String,
    pub dictionary: Dictionary,
    pub dt: f64,
    /// L×N regression coefficients.
    pub xi: DMatrix<f64>,
    pub support: Vec<Vec<bool>>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub diagnostics: FitDiagnostics,
    #[serde(default)]
    pub echo: serde_json::Value,
}

pub const MODEL_FORMAT: &str = "dfacs-lifted-model/1";

/// Split Ξ into (A, B) and discretise. Coefficients on compensation
/// observables are kept in Ξ but left out of A.
pub fn assemble_model(fit: StlsFit, dict: &Dictionary, dt: f64) -> Result<LiftedModel> {
    let (n, nb, m) = (dict.n_state(), dict.n_compensation(), dict.n_input());
    if fit.xi.shape() != (n + nb + m, n) {
        return Err(Error::DimensionMismatch {
            context: "coefficient matrix rows",
            expected: n + nb + m,
            actual: fit.xi.nrows(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be > 0, got {dt}")));
    }
    if fit.xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coefficient matrix"));
    }
    let a = fit.xi.rows(0, n).transpose();
    let b = fit.xi.rows(n + nb, m).transpose();
    let (a_d, b_d) = zoh(&a, &b, dt);
    Ok(LiftedModel {
        format: MODEL_FORMAT.into(),
        dictionary: dict.clone(),
        dt,
        xi: fit.xi,
        support: fit.support,
        a,
        b,
        a_d,
        b_d,
        diagnostics: fit.diagnostics,
        echo: serde_json::Value::Null,
    })
}

/// Lift, regress and assemble in one call.
pub fn fit_model<'a, I>(
    trajectories: I,
    dict: &Dictionary,
    cfg: &StlsConfig,
    dt: f64,
    exec: Execution,
) -> Result<LiftedModel>
where
    I: IntoIterator<Item = &'a TrajectoryRecord>,
{
    let problem = lift_dataset(trajectories, dict, cfg.settle_time)?;
    let fit = stls(&problem, cfg, exec)?;
    assemble_model(fit, dict, dt)
}

impl LiftedModel {
    pub fn n_state(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_input(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, chi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_d * chi + &self.b_d * u
    }

    /// χ₀ … χ_k from χ₀ and lifted inputs ū₀ … ū_{k−1}.
    pub fn predict(&self, chi0: DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(chi0);
        for u in inputs {
            let next = self.step(out.last().expect("non-empty"), u);
            out.push(next);
        }
        out
    }

    /// Predict from a physical state under physical (20-channel) inputs, one
    /// row per step.
    pub fn predict_from_state(&self, x0: &[f64], inputs: &Table) -> Vec<DVector<f64>> {
        let lifted: Vec<DVector<f64>> = (0..inputs.rows)
            .map(|k| self.dictionary.lift_inputs_slice(inputs.row(k)))
            .collect();
        self.predict(self.dictionary.lift_slice(x0), &lifted)
    }

    /// Physical states carried by the linear block of each lifted sample;
    /// components outside this subsystem are zero.
    pub fn physical(&self, lifted: &[DVector<f64>]) -> Table {
        let mut out = Table::zeros(lifted.len(), STATE_DIM);
        for (k, chi) in lifted.iter().enumerate() {
            self.dictionary.unlift_into(chi.as_slice(), out.row_mut(k));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        [&self.a, &self.b, &self.a_d, &self.b_d]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Spectral radius of A_D, from the real Schur form when the iteration
    /// settles and otherwise from Gelfand's formula by repeated squaring.
    /// `None` only for non-finite matrices.
    pub fn spectral_radius(&self) -> Option<f64> {
        if !self.a_d.iter().all(|v| v.is_finite()) {
            return None;
        }
        if let Some(schur) = nalgebra::linalg::Schur::try_new(self.a_d.clone(), f64::EPSILON, 10_000) {
            return Some(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        Some(gelfand_radius(&self.a_d))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if model.format != MODEL_FORMAT {
            return Err(Error::format(path, format!("unknown model format {:?}", model.format)));
        }
        model.dictionary.validate()?;
        let (n, m) = (model.dictionary.n_state(), model.dictionary.n_input());
        if model.a_d.shape() != (n, n) || model.b_d.shape() != (n, m) {
            return Err(Error::format(path, "matrix shapes do not match the dictionary"));
        }
        Ok(model)
    }
}

/// Per-sample mean absolute error over one block of lifted entries.
pub fn prediction_error(truth: &[DVector<f64>], predicted: &[DVector<f64>], block: &Block) -> Result<Vec<f64>> {
    if truth.len() != predicted.len() {
        return Err(Error::Alignment(format!(
            "{} true samples vs {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    Ok(truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| block.range().map(|i| (t[i] - p[i]).abs()).sum::<f64>() / block.len as f64)
        .collect())
}

/// Interval averages ū_k ≈ (1/dt)∫u over [t_k, t_{k+1}] from point samples,
/// fourth-order accurate for smooth inputs: (−u_{k−1} + 13u_k + 13u_{k+1} − u_{k+2})/24
/// inside, one-sided cubic weights on the first and last interval, and the
/// plain midpoint when fewer than four samples exist.
pub fn interval_inputs(inputs: &Table) -> Table {
    let t = inputs.rows;
    let mut out = Table::zeros(t.saturating_sub(1), inputs.cols);
    for k in 0..out.rows {
        let (idx, w): ([usize; 4], [f64; 4]) = if t < 4 {
            ([k, k + 1, k, k], [12.0, 12.0, 0.0, 0.0])
        } else if k == 0 {
            ([0, 1, 2, 3], [9.0, 19.0, -5.0, 1.0])
        } else if k + 2 == t {
            ([t - 4, t - 3, t - 2, t - 1], [1.0, -5.0, 19.0, 9.0])
        } else {
            ([k - 1, k, k + 1, k + 2], [-1.0, 13.0, 13.0, -1.0])
        };
        let row = out.row_mut(k);
        for (c, o) in row.iter_mut().enumerate() {
            *o = (0..4).map(|i| w[i] * inputs.row(idx[i])[c]).sum::<f64>() / 24.0;
        }
    }
    out
}

/// Model and persistence-baseline error series on one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryValidation {
    pub index: usize,
    pub times: Vec<f64>,
    /// (block name, model error series, persistence error series)
    pub blocks: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Open-loop multi-step prediction from the first sample over the whole
/// trajectory, scored on every named block in `blocks`.
pub fn validate_trajectory(model: &LiftedModel, traj: &TrajectoryRecord, blocks: &[&str]) -> Result<TrajectoryValidation> {
    let dict = &model.dictionary;
    let truth: Vec<DVector<f64>> = (0..traj.samples()).map(|k| dict.lift_slice(traj.states.row(k))).collect();
    let predicted = model.predict_from_state(traj.states.row(0), &interval_inputs(&traj.inputs));
    let persistence = vec![truth[0].clone(); truth.len()];
    let blocks = blocks
        .iter()
        .map(|name| {
            let block = dict
                .block(name)
                .ok_or_else(|| Error::Config(format!("dictionary {} has no block {name}", dict.name)))?;
            Ok((
                name.to_string(),
                prediction_error(&truth, &predicted, block)?,
                prediction_error(&truth, &persistence, block)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryValidation {
        index: traj.index,
        times: traj.times.clone(),
        blocks,
    })
}

/// ρ(A) = lim ‖A^(2^j)‖^(1/2^j), normalising each power to avoid overflow.
fn gelfand_radius(a: &DMatrix<f64>) -> f64 {
    let mut m = a.clone();
    let mut log_rho = 0.0;
    let mut weight = 1.0;
    for _ in 0..48 {
        let n = m.norm();
        if n == 0.0 {
            return 0.0;
        }
        log_rho += n.ln() * weight;
        m /= n;
        m = &m * &m;
        weight *= 0.5;
    }
    (log_rho + m.norm().ln() * weight).exp()
}
