//! Dormand–Prince 4(5) integration with dense output on a fixed sample grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the internal step, s.
    pub max_step: f64,
    /// Sample spacing of the returned trajectory, s.
    pub output_dt: f64,
    /// First trial step; estimated from the problem when `None`.
    pub initial_step: Option<f64>,
    /// Steps below this are treated as failure, s.
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_step: 0.1,
            output_dt: 0.1,
            initial_step: None,
            min_step: 1e-12,
            max_steps: 10_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.abs_tol > 0.0
            && self.output_dt > 0.0
            && self.max_step > 0.0
            && self.min_step >= 0.0
            && self.initial_step.is_none_or(|h| h > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid integrator settings: {self:?}")))
        }
    }
}

/// States sampled at `t0 + k * output_dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Last accepted internal step, useful to warm-start a continuation.
    pub last_step: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Sample times `t0 + k*dt`, built by multiplication so the grid never drifts.
pub fn sample_grid(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let n = ((t1 - t0) / dt + 1e-9).floor() as usize;
    (0..=n).map(|k| t0 + k as f64 * dt).collect()
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output (4th-order continuous extension).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    err: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
            err: vec![0.0; n],
        }
    }

    /// One DP5 step from (t, y) with k[0] = f(t, y) already filled.
    /// Leaves the 5th-order solution in `y_new`, f(t+h, y_new) in k[6] and
    /// the embedded error estimate in `err`.
    fn step<F>(&mut self, f: &mut F, t: f64, y: &[f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, tmp, k6);
        for i in 0..n {
            self.y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + h, &self.y_new, k7);
        for i in 0..n {
            self.err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
    }

    fn error_norm(&self, y: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
        let n = y.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let sc = abs_tol + rel_tol * y[i].abs().max(self.y_new[i].abs());
                (self.err[i] / sc).powi(2)
            })
            .sum();
        (sum / n.max(1) as f64).sqrt()
    }

    /// Interpolate at fraction `theta` of the step [t, t+h] that produced `y_new`.
    fn dense(&self, y: &[f64], h: f64, theta: f64, out: &mut [f64]) {
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        let theta1 = 1.0 - theta;
        for i in 0..y.len() {
            let r2 = self.y_new[i] - y[i];
            let r3 = h * k1[i] - r2;
            let r4 = r2 - h * k7[i] - r3;
            let r5 = h
                * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            out[i] = y[i] + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5)));
        }
    }
}

fn rms(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, s)| (a / s).powi(2)).sum();
    (s / v.len().max(1) as f64).sqrt()
}

/// Starting step heuristic (Hairer, Nørsett & Wanner, II.4).
fn initial_step<F>(f: &mut F, t0: f64, y0: &[f64], f0: &[f64], cfg: &IntegratorConfig, span: f64) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let sc: Vec<f64> = y0.iter().map(|y| cfg.abs_tol + cfg.rel_tol * y.abs()).collect();
    let d0 = rms(y0, &sc);
    let d1 = rms(f0, &sc);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(cfg.max_step).min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, d)| y + h0 * d).collect();
    let mut f1 = vec![0.0; y0.len()];
    f(t0 + h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff, &sc) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(cfg.max_step).min(span)
}

/// Integrate `dx/dt = f(t, x)` over `t_span` with adaptive steps and return
/// the solution sampled every `cfg.output_dt` via dense output.
pub fn integrate<F>(mut f: F, x0: &[f64], t_span: (f64, f64), cfg: &IntegratorConfig) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    let (t0, t_end) = t_span;
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(Error::Config(format!("time span must be increasing, got [{t0}, {t_end}]")));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    let n = x0.len();
    let grid = sample_grid(t0, t_end, cfg.output_dt);
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0.to_vec());
    let mut next_sample = 1;

    let mut stages = Stages::new(n);
    let mut y = x0.to_vec();
    let mut t = t0;
    f(t, &y, &mut stages.k[0]);
    let span = t_end - t0;
    let mut h = cfg
        .initial_step
        .unwrap_or_else(|| initial_step(&mut f, t0, x0, &stages.k[0].clone(), cfg, span))
        .min(cfg.max_step);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut last_accepted_h = h;
    let mut interp = vec![0.0; n];
    let last_t = *grid.last().expect("grid has at least one sample");

    while t < last_t {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("exceeded {} steps", cfg.max_steps),
            });
        }
        let mut last = false;
        if t + h >= last_t {
            h = last_t - t;
            last = true;
        }
        if h < cfg.min_step && !last {
            return Err(Error::Integration {
                t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }
        stages.step(&mut f, t, &y, h);
        let err = stages.error_norm(&y, cfg.rel_tol, cfg.abs_tol);
        if !err.is_finite() || !stages.y_new.iter().all(|v| v.is_finite()) {
            rejected += 1;
            h *= 0.1;
            if h < cfg.min_step {
                return Err(Error::Integration {
                    t,
                    reason: "non-finite state".into(),
                });
            }
            continue;
        }
        if err <= 1.0 {
            let t_new = if last { last_t } else { t + h };
            while next_sample < grid.len() && grid[next_sample] <= t_new {
                let ts = grid[next_sample];
                if ts == t_new {
                    states.push(stages.y_new.clone());
                } else {
                    stages.dense(&y, h, (ts - t) / h, &mut interp);
                    states.push(interp.clone());
                }
                next_sample += 1;
            }
            y.copy_from_slice(&stages.y_new);
            stages.k.swap(0, 6);
            t = t_new;
            accepted += 1;
            last_accepted_h = h;
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(cfg.max_step);
        } else {
            rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    debug_assert_eq!(states.len(), grid.len());
    Ok(Trajectory {
        times: grid,
        states,
        last_step: last_accepted_h,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

/// Fixed-step Dormand–Prince (5th-order solution, no error control).
/// Returns the state at `t1` after `n_steps` equal steps.
pub fn integrate_fixed_step<F>(mut f: F, x0: &[f64], t0: f64, t1: f64, n_steps: usize) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut stages = Stages::new(x0.len());
    let mut y = x0.to_vec();
    let h = (t1 - t0) / n_steps as f64;
    f(t0, &y, &mut stages.k[0]);
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        stages.step(&mut f, t, &y, h);
        y.copy_from_slice(&stages.y_new);
        stages.k.swap(0, 6);
    }
    y
}
