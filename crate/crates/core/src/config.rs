//! Experiment configuration: one TOML file drives every pipeline stage.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::dictionary::Dictionary;
use crate::dynamics::{PlantState, SatelliteParams, TestMassState};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::mpc::{CaptureCriteria, MpcConfig, SubsystemTuning};
use crate::sindy::StlsConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsystem {
    Attitude,
    TestMass,
}

impl Subsystem {
    pub const ALL: [Subsystem; 2] = [Subsystem::Attitude, Subsystem::TestMass];

    pub fn name(self) -> &'static str {
        match self {
            Subsystem::Attitude => "attitude",
            Subsystem::TestMass => "test_mass",
        }
    }

    pub fn dictionary(self) -> Dictionary {
        match self {
            Subsystem::Attitude => Dictionary::attitude(),
            Subsystem::TestMass => Dictionary::test_mass(),
        }
    }

    /// State blocks carrying MPC weight; these are the blocks scored during validation.
    pub fn tuning(self, mpc: &MpcConfig) -> &SubsystemTuning {
        match self {
            Subsystem::Attitude => &mpc.attitude,
            Subsystem::TestMass => &mpc.test_mass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationConfig {
    pub subsystems: Vec<Subsystem>,
    pub stls: StlsConfig,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            subsystems: Subsystem::ALL.to_vec(),
            stls: StlsConfig::default(),
        }
    }
}

/// Initial state in micro-units (μrad, μrad/s, μm, μm/s). Test-mass rows
/// are indexed by test mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicroState {
    pub theta_si_urad: [f64; 3],
    pub omega_si_urad_s: [f64; 3],
    pub zeta_urad: [f64; 2],
    pub zeta_dot_urad_s: [f64; 2],
    pub r_mo_um: [[f64; 3]; 2],
    pub r_dot_mo_um_s: [[f64; 3]; 2],
    pub theta_mo_urad: [[f64; 3]; 2],
    pub omega_mo_urad_s: [[f64; 3]; 2],
}

impl MicroState {
    /// Capture scenario start.
    pub fn capture_start() -> Self {
        Self {
            theta_si_urad: [1.0, 2.0, 5.0],
            omega_si_urad_s: [0.0; 3],
            zeta_urad: [0.01; 2],
            zeta_dot_urad_s: [0.0; 2],
            r_mo_um: [[200.0; 3]; 2],
            r_dot_mo_um_s: [[0.0; 3]; 2],
            theta_mo_urad: [[2000.0; 3]; 2],
            omega_mo_urad_s: [[600.0; 3]; 2],
        }
    }

    pub fn zero() -> Self {
        Self {
            theta_si_urad: [0.0; 3],
            omega_si_urad_s: [0.0; 3],
            zeta_urad: [0.0; 2],
            zeta_dot_urad_s: [0.0; 2],
            r_mo_um: [[0.0; 3]; 2],
            r_dot_mo_um_s: [[0.0; 3]; 2],
            theta_mo_urad: [[0.0; 3]; 2],
            omega_mo_urad_s: [[0.0; 3]; 2],
        }
    }

    pub fn to_si(&self) -> PlantState {
        const PER_UNIT: f64 = 1e6;
        let v = |a: [f64; 3]| Vector3::from(a) / PER_UNIT;
        let tm = |i: usize| TestMassState {
            r: v(self.r_mo_um[i]),
            r_dot: v(self.r_dot_mo_um_s[i]),
            theta: v(self.theta_mo_urad[i]),
            omega: v(self.omega_mo_urad_s[i]),
        };
        PlantState {
            theta_si: v(self.theta_si_urad),
            omega_si: v(self.omega_si_urad_s),
            zeta: self.zeta_urad.map(|z| z / PER_UNIT),
            zeta_dot: self.zeta_dot_urad_s.map(|z| z / PER_UNIT),
            tm: [tm(0), tm(1)],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_si().is_finite()
    }
}

impl Default for MicroState {
    fn default() -> Self {
        Self::capture_start()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Closed-loop horizon, s.
    pub duration: f64,
    pub initial_state: MicroState,
    pub capture: CaptureCriteria,
    pub integrator: IntegratorConfig,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            duration: 300.0,
            initial_state: MicroState::capture_start(),
            capture: CaptureCriteria::default(),
            integrator: IntegratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: SatelliteParams,
    pub dataset: DatasetConfig,
    pub identification: IdentificationConfig,
    pub mpc: MpcConfig,
    pub control: ControlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            plant: SatelliteParams::default(),
            dataset: DatasetConfig::default(),
            identification: IdentificationConfig::default(),
            mpc: MpcConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Shrink dataset size and all durations by `factor` (0 < factor ≤ 1),
    /// keeping at least two trajectories and enough samples to differentiate.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::Config(format!("scale must lie in (0, 1], got {factor}")));
        }
        let mut cfg = self.clone();
        cfg.dataset.n_traj = ((self.dataset.n_traj as f64 * factor).round() as usize).max(2);
        let min_duration = 8.0 * self.dataset.dt;
        cfg.dataset.duration = (self.dataset.duration * factor).max(min_duration);
        cfg.control.duration = (self.control.duration * factor).max(self.dataset.dt);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every stage's settings and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.dataset.validate()?;
        self.identification.stls.validate()?;
        self.mpc.validate()?;
        self.control.integrator.validate()?;
        let subs = &self.identification.subsystems;
        if subs.is_empty() {
            return Err(Error::Config("identification.subsystems is empty".into()));
        }
        if subs.iter().collect::<BTreeSet<_>>().len() != subs.len() {
            return Err(Error::Config("identification.subsystems lists a subsystem twice".into()));
        }
        for s in subs {
            s.tuning(&self.mpc).resolve(&s.dictionary())?;
        }
        if self.dataset.n_train() == 0 {
            return Err(Error::Config("dataset has no training trajectories".into()));
        }
        if !(self.control.duration > 0.0 && self.control.duration.is_finite()) {
            return Err(Error::Config("control.duration must be positive".into()));
        }
        if self.control.duration < self.dataset.dt {
            return Err(Error::Config("control.duration is shorter than one control step (dataset.dt)".into()));
        }
        if !self.control.initial_state.is_finite() {
            return Err(Error::Config("control.initial_state has non-finite entries".into()));
        }
        self.control.capture.validate()
    }

    /// Resolved configuration plus seed, stored next to every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "tool": concat!("dfacs ", env!("CARGO_PKG_VERSION")),
            "seed": self.seed,
            "config": self,
        })
    }
}
