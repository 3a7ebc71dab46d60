//! Identification datasets: random initial conditions, sinusoidal
//! excitation, simulated trajectories, 5-point derivative estimates and the
//! on-disk format.
//!
//! # On-disk layout
//!
//! A dataset is a directory holding `manifest.json` plus one binary file per
//! trajectory, `traj_NNNN.bin`:
//!
//! ```text
//! magic      8 bytes   "DFTRAJ01"
//! samples    u64 LE    T
//! n_state    u64 LE    34
//! n_input    u64 LE    20
//! n_deriv    u64 LE    T - 4
//! times      T f64 LE
//! states     T × n_state f64 LE, row-major
//! inputs     T × n_input f64 LE, row-major
//! x_dot      n_deriv × n_state f64 LE, row-major (rows align with samples 2..T-3)
//! ```
//!
//! [`TrajectoryDataset::export_csv`] writes the same data as one CSV per
//! trajectory for plotting.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{input_channel_name, state_component_name};
use crate::dynamics::{ControlInput, Plant, PlantState, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorConfig};
use crate::parallel::{try_map_indexed, Execution};

const MAGIC: &[u8; 8] = b"DFTRAJ01";
pub const MANIFEST: &str = "manifest.json";

/// Row-major dense table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged table row");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Half-widths of the uniform initial-condition distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialStateRanges {
    pub theta_si: f64,
    pub omega_si: f64,
    pub r_mo: f64,
    pub r_dot_mo: f64,
    pub theta_mo: f64,
    pub omega_mo: f64,
    pub zeta: f64,
    pub zeta_dot: f64,
}

impl Default for InitialStateRanges {
    fn default() -> Self {
        Self {
            theta_si: 1e-8,
            omega_si: 1e-8,
            r_mo: 1e-7,
            r_dot_mo: 1e-8,
            theta_mo: 1e-5,
            omega_mo: 1e-7,
            zeta: 1e-8,
            zeta_dot: 1e-10,
        }
    }
}

impl InitialStateRanges {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> PlantState {
        let mut u = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let mut v3 = |w: f64| nalgebra::Vector3::new(u(w), u(w), u(w));
        let theta_si = v3(self.theta_si);
        let omega_si = v3(self.omega_si);
        let mut tm = [Default::default(); 2];
        for t in tm.iter_mut() {
            *t = crate::dynamics::TestMassState {
                r: v3(self.r_mo),
                r_dot: v3(self.r_dot_mo),
                theta: v3(self.theta_mo),
                omega: v3(self.omega_mo),
            };
        }
        let mut u = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let zeta = [u(self.zeta), u(self.zeta)];
        let zeta_dot = [u(self.zeta_dot), u(self.zeta_dot)];
        PlantState {
            theta_si,
            omega_si,
            zeta,
            zeta_dot,
            tm,
        }
    }

    /// Per-component bound in flat state order.
    pub fn bounds(&self) -> [f64; STATE_DIM] {
        let mut b = [0.0; STATE_DIM];
        b[0..3].fill(self.theta_si);
        b[3..6].fill(self.omega_si);
        b[6..8].fill(self.zeta);
        b[8..10].fill(self.zeta_dot);
        for base in [10, 22] {
            b[base..base + 3].fill(self.r_mo);
            b[base + 3..base + 6].fill(self.r_dot_mo);
            b[base + 6..base + 9].fill(self.theta_mo);
            b[base + 9..base + 12].fill(self.omega_mo);
        }
        b
    }
}

/// Random initial state drawn from the default ranges with its own seed.
pub fn sample_initial_state(seed: u64) -> PlantState {
    InitialStateRanges::default().sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Channel peak magnitudes in flat input order:
/// M_T 1e-7, F_T 2e-5, F_E 1e-7, M_E 3e-9 per TM, M_MOSA 1e-9.
pub fn default_amplitude() -> [f64; INPUT_DIM] {
    let mut a = [0.0; INPUT_DIM];
    a[0..3].fill(1e-7);
    a[3..6].fill(2e-5);
    a[6..9].fill(1e-7);
    a[9..12].fill(3e-9);
    a[12..15].fill(1e-7);
    a[15..18].fill(3e-9);
    a[18..20].fill(1e-9);
    a
}

/// u_i(t) = A_i a_i sin(b_i t + c_i).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub amplitude: [f64; INPUT_DIM],
    pub a: [f64; INPUT_DIM],
    /// rad/s
    pub b: [f64; INPUT_DIM],
    /// rad
    pub c: [f64; INPUT_DIM],
    pub seed: u64,
}

impl ExcitationSpec {
    /// Draw a ∼ U(−1,1), b ∼ U(0,5), c ∼ U(0,2π) for every channel.
    pub fn random<R: Rng>(amplitude: [f64; INPUT_DIM], seed: u64, rng: &mut R) -> Self {
        let a = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let b = std::array::from_fn(|_| rng.random_range(0.0..=5.0));
        let c = std::array::from_fn(|_| rng.random_range(0.0..=TAU));
        Self {
            amplitude,
            a,
            b,
            c,
            seed,
        }
    }

    pub fn from_seed(amplitude: [f64; INPUT_DIM], seed: u64) -> Self {
        Self::random(amplitude, seed, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// All-zero excitation.
    pub fn zero() -> Self {
        Self {
            amplitude: [0.0; INPUT_DIM],
            a: [0.0; INPUT_DIM],
            b: [0.0; INPUT_DIM],
            c: [0.0; INPUT_DIM],
            seed: 0,
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for i in 0..INPUT_DIM {
            out[i] = self.amplitude[i] * self.a[i] * (self.b[i] * t + self.c[i]).sin();
        }
    }

    pub fn eval(&self, t: f64) -> ControlInput {
        let mut u = [0.0; INPUT_DIM];
        self.eval_into(t, &mut u);
        ControlInput::from_slice(&u).expect("input width")
    }
}

/// Fourth-order central difference on interior rows 2..T-3:
/// `(−f[k+2] + 8f[k+1] − 8f[k−1] + f[k−2]) / (12 dt)`.
pub fn central_difference_4(samples: &Table, dt: f64) -> Result<Table> {
    if samples.rows < 5 {
        return Err(Error::InsufficientData {
            needed: 5,
            got: samples.rows,
        });
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be > 0, got {dt}")));
    }
    let mut out = Table::zeros(samples.rows - 4, samples.cols);
    let denom = 12.0 * dt;
    for k in 2..samples.rows - 2 {
        let (m2, m1, p1, p2) = (
            samples.row(k - 2),
            samples.row(k - 1),
            samples.row(k + 1),
            samples.row(k + 2),
        );
        let row = out.row_mut(k - 2);
        for j in 0..samples.cols {
            row[j] = (-p2[j] + 8.0 * p1[j] - 8.0 * m1[j] + m2[j]) / denom;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub times: Vec<f64>,
    /// T × 34
    pub states: Table,
    /// T × 20
    pub inputs: Table,
    /// (T−4) × 34, aligned with samples 2..T-3.
    pub derivatives: Table,
}

impl TrajectoryRecord {
    pub fn samples(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, k: usize) -> PlantState {
        PlantState::from_slice(self.states.row(k)).expect("state width")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_traj: usize,
    /// s
    pub duration: f64,
    /// Sample spacing, s.
    pub dt: f64,
    pub train_fraction: f64,
    pub ranges: InitialStateRanges,
    pub amplitude: [f64; INPUT_DIM],
    pub integrator: IntegratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_traj: 200,
            duration: 50.0,
            dt: 0.1,
            train_fraction: 0.75,
            ranges: InitialStateRanges::default(),
            amplitude: default_amplitude(),
            integrator: IntegratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::Config("n_traj must be positive".into()));
        }
        if !(self.dt > 0.0 && self.duration >= 4.0 * self.dt) {
            return Err(Error::Config(format!(
                "need dt > 0 and at least 5 samples (duration {}, dt {})",
                self.duration, self.dt
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        self.integrator.validate()
    }

    /// Training count; a fraction strictly between 0 and 1 leaves at least
    /// one trajectory on each side when there are two or more.
    pub fn n_train(&self) -> usize {
        let n = (self.train_fraction * self.n_traj as f64).round() as usize;
        if self.n_traj >= 2 && self.train_fraction > 0.0 && self.train_fraction < 1.0 {
            n.clamp(1, self.n_traj - 1)
        } else {
            n
        }
    }
}

/// Seed of trajectory `index`, independent of generation order.
pub fn trajectory_seed(master: u64, index: usize) -> u64 {
    // SplitMix64 finaliser over (master, index).
    let mut z = master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Split tags for `n` trajectories: seeded shuffle, first `n_train` are training.
pub fn split_tags(master: u64, n: usize, n_train: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(master ^ 0x5151_7A7A_0000_0001));
    let mut tags = vec![Split::Validation; n];
    for &i in order.iter().take(n_train) {
        tags[i] = Split::Train;
    }
    tags
}

/// Integrate the plant under an open-loop input and sample every `cfg.output_dt`.
pub fn simulate<U>(
    plant: &Plant,
    x0: &PlantState,
    input: U,
    duration: f64,
    cfg: &IntegratorConfig,
) -> Result<crate::integrator::Trajectory>
where
    U: Fn(f64) -> ControlInput,
{
    let f = |t: f64, x: &[f64], dx: &mut [f64]| {
        let u = input(t);
        plant.derivative_slice(t, x, &u, dx);
    };
    integrate(f, &x0.to_array(), (0.0, duration), cfg)
}

/// Simulate one trajectory from an explicit initial state and excitation.
pub fn simulate_record(
    plant: &Plant,
    x0: &PlantState,
    excitation: &ExcitationSpec,
    cfg: &DatasetConfig,
    index: usize,
    split: Split,
) -> Result<TrajectoryRecord> {
    let icfg = IntegratorConfig {
        output_dt: cfg.dt,
        max_step: cfg.integrator.max_step.min(cfg.dt),
        ..cfg.integrator.clone()
    };
    let traj = simulate(plant, x0, |t| excitation.eval(t), cfg.duration, &icfg)?;
    let states = Table::from_rows(&traj.states, STATE_DIM);
    let mut inputs = Table::zeros(traj.times.len(), INPUT_DIM);
    for (k, t) in traj.times.iter().enumerate() {
        excitation.eval_into(*t, inputs.row_mut(k));
    }
    let derivatives = central_difference_4(&states, cfg.dt)?;
    Ok(TrajectoryRecord {
        index,
        seed: excitation.seed,
        split,
        times: traj.times,
        states,
        inputs,
        derivatives,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub config: DatasetConfig,
    pub master_seed: u64,
    pub trajectories: Vec<TrajectoryRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    seed: u64,
    split: Split,
    file: String,
    samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    master_seed: u64,
    config: DatasetConfig,
    trajectories: Vec<ManifestEntry>,
    #[serde(default)]
    echo: serde_json::Value,
}

/// Generate the full dataset. Each trajectory draws its initial state and
/// excitation from its own RNG stream, so results do not depend on `exec`.
pub fn generate_dataset(
    plant: &Plant,
    cfg: &DatasetConfig,
    master_seed: u64,
    exec: Execution,
) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let tags = split_tags(master_seed, cfg.n_traj, cfg.n_train());
    let trajectories = try_map_indexed(exec, cfg.n_traj, |i| {
        let seed = trajectory_seed(master_seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = cfg.ranges.sample(&mut rng);
        let excitation = ExcitationSpec::random(cfg.amplitude, seed, &mut rng);
        simulate_record(plant, &x0, &excitation, cfg, i, tags[i]).map_err(|e| Error::Trajectory {
            index: i,
            source: Box::new(e),
        })
    })?;
    Ok(TrajectoryDataset {
        config: cfg.clone(),
        master_seed,
        trajectories,
    })
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Option<u64> {
    let v = u64::from_le_bytes(bytes.get(*at..*at + 8)?.try_into().ok()?);
    *at += 8;
    Some(v)
}

fn read_f64s(bytes: &[u8], at: &mut usize, n: usize) -> Option<Vec<f64>> {
    let slice = bytes.get(*at..*at + 8 * n)?;
    *at += 8 * n;
    Some(
        slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

impl TrajectoryRecord {
    fn write_binary(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut go = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            for n in [self.samples(), STATE_DIM, INPUT_DIM, self.derivatives.rows] {
                w.write_all(&(n as u64).to_le_bytes())?;
            }
            write_f64s(&mut w, &self.times)?;
            write_f64s(&mut w, &self.states.data)?;
            write_f64s(&mut w, &self.inputs.data)?;
            write_f64s(&mut w, &self.derivatives.data)?;
            w.flush()
        };
        go().map_err(|e| Error::io(path, e))
    }

    fn read_binary(path: &Path, index: usize, seed: u64, split: Split) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::format(path, why);
        if bytes.get(..8) != Some(MAGIC.as_slice()) {
            return Err(bad("missing DFTRAJ01 header"));
        }
        let mut at = 8;
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            *h = read_u64(&bytes, &mut at).ok_or_else(|| bad("truncated header"))? as usize;
        }
        let [t, ns, ni, nd] = header;
        if ns != STATE_DIM || ni != INPUT_DIM || nd + 4 != t {
            return Err(bad("unexpected table dimensions"));
        }
        let truncated = || bad("truncated data");
        let times = read_f64s(&bytes, &mut at, t).ok_or_else(truncated)?;
        let states = read_f64s(&bytes, &mut at, t * ns).ok_or_else(truncated)?;
        let inputs = read_f64s(&bytes, &mut at, t * ni).ok_or_else(truncated)?;
        let derivs = read_f64s(&bytes, &mut at, nd * ns).ok_or_else(truncated)?;
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            index,
            seed,
            split,
            times,
            states: Table { rows: t, cols: ns, data: states },
            inputs: Table { rows: t, cols: ni, data: inputs },
            derivatives: Table { rows: nd, cols: ns, data: derivs },
        })
    }
}

fn trajectory_file(index: usize) -> String {
    format!("traj_{index:04}.bin")
}

impl TrajectoryDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrajectoryRecord> {
        self.trajectories.iter().filter(move |t| t.split == split)
    }

    /// Write manifest and trajectory files into `dir` (created if missing).
    /// `echo` is stored verbatim in the manifest.
    pub fn save(&self, dir: &Path, echo: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in &self.trajectories {
            t.write_binary(&dir.join(trajectory_file(t.index)))?;
        }
        let manifest = Manifest {
            format: "dfacs-dataset/1".into(),
            master_seed: self.master_seed,
            config: self.config.clone(),
            trajectories: self
                .trajectories
                .iter()
                .map(|t| ManifestEntry {
                    index: t.index,
                    seed: t.seed,
                    split: t.split,
                    file: trajectory_file(t.index),
                    samples: t.samples(),
                })
                .collect(),
            echo,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let trajectories = manifest
            .trajectories
            .iter()
            .map(|e| {
                let rec = TrajectoryRecord::read_binary(&dir.join(&e.file), e.index, e.seed, e.split)?;
                if rec.samples() != e.samples {
                    return Err(Error::format(dir.join(&e.file), "sample count differs from manifest"));
                }
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: manifest.config,
            master_seed: manifest.master_seed,
            trajectories,
        })
    }

    /// One CSV per trajectory: `t`, 34 states, 20 inputs, 34 derivative
    /// estimates (blank on the two trimmed rows at each end).
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = vec!["t".to_string()];
        header.extend((0..STATE_DIM).map(state_component_name));
        header.extend((0..INPUT_DIM).map(input_channel_name));
        header.extend((0..STATE_DIM).map(|i| format!("d_{}", state_component_name(i))));
        let header = header.join(",");
        let mut paths = Vec::new();
        for t in &self.trajectories {
            let path = dir.join(format!("traj_{:04}.csv", t.index));
            let mut out = String::with_capacity(t.samples() * 90 * 24);
            out.push_str(&header);
            out.push('\n');
            for k in 0..t.samples() {
                let mut cells = vec![format!("{:e}", t.times[k])];
                cells.extend(t.states.row(k).iter().map(|v| format!("{v:e}")));
                cells.extend(t.inputs.row(k).iter().map(|v| format!("{v:e}")));
                if k >= 2 && k + 2 < t.samples() {
                    cells.extend(t.derivatives.row(k - 2).iter().map(|v| format!("{v:e}")));
                } else {
                    cells.extend(std::iter::repeat_n(String::new(), STATE_DIM));
                }
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SatelliteParams;

    #[test]
    fn initial_state_within_bounds_and_deterministic() {
        let bounds = InitialStateRanges::default().bounds();
        for seed in 0..200 {
            let x = sample_initial_state(seed).to_array();
            assert!(x.iter().zip(&bounds).all(|(v, b)| v.abs() <= *b));
        }
        assert_eq!(sample_initial_state(42), sample_initial_state(42));
        assert_ne!(sample_initial_state(42), sample_initial_state(43));
    }

    #[test]
    fn initial_state_statistics() {
        // Uniform(−w, w): mean 0, σ = w/√3; the mean of n samples has σ/√n.
        let n = 10_000;
        let ranges = InitialStateRanges::default();
        let bounds = ranges.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sum = [0.0; STATE_DIM];
        let mut max = [0.0f64; STATE_DIM];
        for _ in 0..n {
            let x = ranges.sample(&mut rng).to_array();
            for i in 0..STATE_DIM {
                sum[i] += x[i];
                max[i] = max[i].max(x[i].abs());
            }
        }
        for i in 0..STATE_DIM {
            let sigma_mean = bounds[i] / 3f64.sqrt() / (n as f64).sqrt();
            assert!((sum[i] / n as f64).abs() < 3.0 * sigma_mean, "component {i}");
            assert!(max[i] <= bounds[i] && max[i] > 0.99 * bounds[i]);
        }
    }

    #[test]
    fn excitation_cases() {
        let zero = ExcitationSpec {
            a: [0.0; INPUT_DIM],
            ..ExcitationSpec::from_seed(default_amplitude(), 3)
        };
        for t in [0.0, 1.3, 47.0] {
            assert!(zero.eval(t).to_array().iter().all(|v| *v == 0.0));
        }
        let spec = ExcitationSpec::from_seed(default_amplitude(), 9);
        assert!(spec.a.iter().all(|a| a.abs() <= 1.0));
        assert!(spec.b.iter().all(|b| (0.0..=5.0).contains(b)));
        assert!(spec.c.iter().all(|c| (0.0..=TAU).contains(c)));
        for k in 0..500 {
            let u = spec.eval(k as f64 * 0.1).to_array();
            assert!(u.iter().zip(&spec.amplitude).all(|(v, a)| v.abs() <= *a));
        }
        let mut single = ExcitationSpec::zero();
        single.amplitude[0] = 2e-5;
        single.a[0] = 1.0;
        single.b[0] = 1.0;
        let u = single.eval(std::f64::consts::FRAC_PI_2);
        assert_eq!(u.m_t.x, 2e-5);
    }

    #[test]
    fn central_difference_cases() {
        let constant = Table::from_rows(&vec![vec![3.0, -1.0]; 9], 2);
        let d = central_difference_4(&constant, 0.1).unwrap();
        assert_eq!(d.rows, 5);
        assert!(d.data.iter().all(|v| *v == 0.0));

        let dt = 0.1;
        let rows: Vec<Vec<f64>> = (0..20).map(|k| vec![(k as f64 * dt).powi(2)]).collect();
        let d = central_difference_4(&Table::from_rows(&rows, 1), dt).unwrap();
        for k in 0..d.rows {
            let t = (k + 2) as f64 * dt;
            assert!((d.row(k)[0] - 2.0 * t).abs() < 1e-12);
        }

        let short = Table::from_rows(&vec![vec![0.0]; 4], 1);
        assert!(matches!(
            central_difference_4(&short, 0.1),
            Err(Error::InsufficientData { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn sine_derivative_converges_fourth_order() {
        let err = |dt: f64| {
            let rows: Vec<Vec<f64>> = (0..=(4.0 / dt).round() as usize)
                .map(|k| vec![(k as f64 * dt).sin()])
                .collect();
            let d = central_difference_4(&Table::from_rows(&rows, 1), dt).unwrap();
            (0..d.rows)
                .map(|k| (d.row(k)[0] - ((k + 2) as f64 * dt).cos()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(0.1) / err(0.05);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn split_partitions_by_fraction() {
        let tags = split_tags(5, 200, 150);
        assert_eq!(tags.iter().filter(|t| **t == Split::Train).count(), 150);
        assert_eq!(tags, split_tags(5, 200, 150));
        assert_ne!(tags, split_tags(6, 200, 150));
    }

    #[test]
    fn training_count_keeps_both_sides_populated() {
        let count = |n_traj, train_fraction| DatasetConfig { n_traj, train_fraction, ..Default::default() }.n_train();
        assert_eq!(count(200, 0.75), 150);
        assert_eq!(count(2, 0.75), 1);
        assert_eq!(count(2, 0.1), 1);
        assert_eq!(count(1, 0.75), 1);
        assert_eq!(count(4, 1.0), 4);
        assert_eq!(count(4, 0.0), 0);
    }

    #[test]
    fn zero_everything_gives_zero_trajectory() {
        let plant = Plant::with_params(SatelliteParams::default()).unwrap();
        let cfg = DatasetConfig {
            n_traj: 1,
            duration: 2.0,
            ..Default::default()
        };
        let rec = simulate_record(&plant, &PlantState::zeros(), &ExcitationSpec::zero(), &cfg, 0, Split::Train)
            .unwrap();
        assert_eq!(rec.samples(), 21);
        assert!(rec.states.data.iter().all(|v| *v == 0.0));
        assert!(rec.derivatives.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let plant = Plant::with_params(SatelliteParams::default()).unwrap();
        let cfg = DatasetConfig {
            n_traj: 3,
            duration: 1.0,
            ..Default::default()
        };
        let ds = generate_dataset(&plant, &cfg, 11, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), serde_json::json!({"note": "test"})).unwrap();
        let back = TrajectoryDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let csvs = ds.export_csv(&dir.path().join("csv")).unwrap();
        assert_eq!(csvs.len(), 3);
        let text = fs::read_to_string(&csvs[0]).unwrap();
        assert_eq!(text.lines().count(), 12);
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"NOTATRAJ").unwrap();
        assert!(matches!(
            TrajectoryRecord::read_binary(&path, 0, 0, Split::Train),
            Err(Error::Format { .. })
        ));
    }
}
