//! Nonlinear drag-free satellite dynamics.
//!
//! The plant couples the satellite attitude, two moving optical sub-assemblies
//! (MOSAs) that rotate about the satellite z-axis, and two test masses (TMs)
//! floating inside electrostatic cages. All quantities are SI.
//!
//! Frames: the satellite frame (SRF), one optical frame per MOSA (ORF) and one
//! body frame per TM (MRF). Attitudes are small angles, so frame rotations are
//! first-order except for the MOSA rotation about z, which is exact.

use std::f64::consts::FRAC_PI_6;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 34;
pub const INPUT_DIM: usize = 20;

/// Offsets into the flat 34-element state vector.
pub mod state_layout {
    pub const THETA_SI: usize = 0;
    pub const OMEGA_SI: usize = 3;
    pub const ZETA: usize = 6;
    pub const ZETA_DOT: usize = 8;
    /// Start of each test-mass block.
    pub const TM: [usize; 2] = [10, 22];
    // Offsets inside a test-mass block.
    pub const R: usize = 0;
    pub const R_DOT: usize = 3;
    pub const THETA: usize = 6;
    pub const OMEGA: usize = 9;
}

/// Offsets into the flat 20-element input vector.
pub mod input_layout {
    pub const M_T: usize = 0;
    pub const F_T: usize = 3;
    pub const F_E: [usize; 2] = [6, 12];
    pub const M_E: [usize; 2] = [9, 15];
    pub const M_MOSA: usize = 18;
}

fn e3() -> Vector3<f64> {
    Vector3::z()
}

fn vec3(s: &[f64], at: usize) -> Vector3<f64> {
    Vector3::new(s[at], s[at + 1], s[at + 2])
}

fn put3(s: &mut [f64], at: usize, v: &Vector3<f64>) {
    s[at..at + 3].copy_from_slice(v.as_slice());
}

/// Relative pose and rates of one test mass with respect to its cage (ORF).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestMassState {
    pub r: Vector3<f64>,
    pub r_dot: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub omega: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub theta_si: Vector3<f64>,
    pub omega_si: Vector3<f64>,
    pub zeta: [f64; 2],
    pub zeta_dot: [f64; 2],
    pub tm: [TestMassState; 2],
}

impl PlantState {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        use state_layout::*;
        if s.len() != STATE_DIM {
            return Err(Error::DimensionMismatch {
                context: "plant state",
                expected: STATE_DIM,
                actual: s.len(),
            });
        }
        let tm = |i: usize| TestMassState {
            r: vec3(s, TM[i] + R),
            r_dot: vec3(s, TM[i] + R_DOT),
            theta: vec3(s, TM[i] + THETA),
            omega: vec3(s, TM[i] + OMEGA),
        };
        Ok(Self {
            theta_si: vec3(s, THETA_SI),
            omega_si: vec3(s, OMEGA_SI),
            zeta: [s[ZETA], s[ZETA + 1]],
            zeta_dot: [s[ZETA_DOT], s[ZETA_DOT + 1]],
            tm: [tm(0), tm(1)],
        })
    }

    pub fn write_to(&self, s: &mut [f64]) {
        use state_layout::*;
        put3(s, THETA_SI, &self.theta_si);
        put3(s, OMEGA_SI, &self.omega_si);
        s[ZETA..ZETA + 2].copy_from_slice(&self.zeta);
        s[ZETA_DOT..ZETA_DOT + 2].copy_from_slice(&self.zeta_dot);
        for (i, tm) in self.tm.iter().enumerate() {
            put3(s, TM[i] + R, &tm.r);
            put3(s, TM[i] + R_DOT, &tm.r_dot);
            put3(s, TM[i] + THETA, &tm.theta);
            put3(s, TM[i] + OMEGA, &tm.omega);
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        self.write_to(&mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Actuation: thruster torque/force, electrostatic force/torque per TM, MOSA torques.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub m_t: Vector3<f64>,
    pub f_t: Vector3<f64>,
    pub f_e: [Vector3<f64>; 2],
    pub m_e: [Vector3<f64>; 2],
    pub m_mosa: [f64; 2],
}

impl ControlInput {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        use input_layout::*;
        if s.len() != INPUT_DIM {
            return Err(Error::DimensionMismatch {
                context: "control input",
                expected: INPUT_DIM,
                actual: s.len(),
            });
        }
        Ok(Self {
            m_t: vec3(s, M_T),
            f_t: vec3(s, F_T),
            f_e: [vec3(s, F_E[0]), vec3(s, F_E[1])],
            m_e: [vec3(s, M_E[0]), vec3(s, M_E[1])],
            m_mosa: [s[M_MOSA], s[M_MOSA + 1]],
        })
    }

    pub fn write_to(&self, s: &mut [f64]) {
        use input_layout::*;
        put3(s, M_T, &self.m_t);
        put3(s, F_T, &self.f_t);
        for i in 0..2 {
            put3(s, F_E[i], &self.f_e[i]);
            put3(s, M_E[i], &self.m_e[i]);
        }
        s[M_MOSA..M_MOSA + 2].copy_from_slice(&self.m_mosa);
    }

    pub fn to_array(&self) -> [f64; INPUT_DIM] {
        let mut out = [0.0; INPUT_DIM];
        self.write_to(&mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-test-mass physical parameters, including its MOSA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestMassParams {
    /// TM mass, kg.
    pub mass: f64,
    /// TM inertia, kg·m².
    pub inertia: Matrix3<f64>,
    /// MOSA inertia about z, kg·m².
    pub mosa_inertia: f64,
    /// MOSA suspension natural frequency, rad/s.
    pub natural_frequency: f64,
    pub damping_ratio: f64,
    /// MOSA pivot position in the SRF, m.
    pub pivot: Vector3<f64>,
    /// Pivot to cage centre, in the ORF, m.
    pub pivot_to_cage: Vector3<f64>,
    /// Nominal MOSA angle, rad. TM 1 rotates by +γ, TM 2 by −γ.
    pub gamma_nominal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteParams {
    /// Satellite mass, kg.
    pub mass: f64,
    /// Satellite inertia, kg·m².
    pub inertia: Matrix3<f64>,
    pub tm: [TestMassParams; 2],
}

impl Default for SatelliteParams {
    /// The reference spacecraft: 1500 kg bus, two 1.9369 kg test masses.
    fn default() -> Self {
        let tm = |pivot_y: f64| TestMassParams {
            mass: 1.9369,
            inertia: Matrix3::from_diagonal_element(6.9e-4),
            mosa_inertia: 1.0,
            natural_frequency: 72.76,
            damping_ratio: 0.0323,
            pivot: Vector3::new(0.1074, pivot_y, 0.0),
            pivot_to_cage: Vector3::new(0.25, 0.0, 0.0),
            gamma_nominal: FRAC_PI_6,
        };
        Self {
            mass: 1500.0,
            inertia: Matrix3::from_diagonal(&Vector3::new(800.0, 800.0, 1000.0)),
            tm: [tm(0.3216), tm(-0.3216)],
        }
    }
}

fn check_inertia(name: &str, j: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !j.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} is not finite")));
    }
    if (j - j.transpose()).abs().max() > 1e-12 * j.abs().max() {
        return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
    }
    let chol = j
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter(format!("{name} is not positive definite")))?;
    Ok(chol.inverse())
}

impl SatelliteParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("satellite mass", self.mass)?;
        check_inertia("satellite inertia", &self.inertia)?;
        for (i, tm) in self.tm.iter().enumerate() {
            positive(&format!("tm{} mass", i + 1), tm.mass)?;
            positive(&format!("tm{} MOSA inertia", i + 1), tm.mosa_inertia)?;
            positive(&format!("tm{} natural frequency", i + 1), tm.natural_frequency)?;
            check_inertia(&format!("tm{} inertia", i + 1), &tm.inertia)?;
            if !(tm.damping_ratio > 0.0 && tm.damping_ratio < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "tm{} damping ratio must lie in (0, 1), got {}",
                    i + 1,
                    tm.damping_ratio
                )));
            }
            let finite = tm.pivot.iter().chain(tm.pivot_to_cage.iter()).all(|v| v.is_finite())
                && tm.gamma_nominal.is_finite();
            if !finite {
                return Err(Error::InvalidParameter(format!(
                    "tm{} geometry is not finite",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// A 3-vector forcing term: constant or an arbitrary function of (t, state).
#[derive(Clone)]
pub enum Forcing3 {
    Constant(Vector3<f64>),
    Function(Arc<dyn Fn(f64, &PlantState) -> Vector3<f64> + Send + Sync>),
}

impl Forcing3 {
    pub fn eval(&self, t: f64, x: &PlantState) -> Vector3<f64> {
        match self {
            Forcing3::Constant(v) => *v,
            Forcing3::Function(f) => f(t, x),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Forcing3::Constant(v) if *v == Vector3::zeros())
    }
}

impl Default for Forcing3 {
    fn default() -> Self {
        Forcing3::Constant(Vector3::zeros())
    }
}

impl fmt::Debug for Forcing3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Forcing3::Constant(v) => write!(f, "Constant({}, {}, {})", v.x, v.y, v.z),
            Forcing3::Function(_) => f.write_str("Function(..)"),
        }
    }
}

#[derive(Clone)]
pub enum Forcing1 {
    Constant(f64),
    Function(Arc<dyn Fn(f64, &PlantState) -> f64 + Send + Sync>),
}

impl Forcing1 {
    pub fn eval(&self, t: f64, x: &PlantState) -> f64 {
        match self {
            Forcing1::Constant(v) => *v,
            Forcing1::Function(f) => f(t, x),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Forcing1::Constant(v) if *v == 0.0)
    }
}

impl Default for Forcing1 {
    fn default() -> Self {
        Forcing1::Constant(0.0)
    }
}

impl fmt::Debug for Forcing1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Forcing1::Constant(v) => write!(f, "Constant({v})"),
            Forcing1::Function(_) => f.write_str("Function(..)"),
        }
    }
}

/// Disturbances, stiffness and gravity-gradient terms acting on one TM / MOSA.
#[derive(Clone, Debug, Default)]
pub struct TestMassDisturbance {
    pub force: Forcing3,
    pub torque: Forcing3,
    pub stiffness_force: Forcing3,
    pub stiffness_torque: Forcing3,
    pub gravity_gradient: Forcing3,
    pub mosa_torque: Forcing1,
}

/// All external disturbances. The default is identically zero.
#[derive(Clone, Debug, Default)]
pub struct DisturbanceModel {
    pub satellite_torque: Forcing3,
    pub satellite_force: Forcing3,
    pub tm: [TestMassDisturbance; 2],
}

impl DisturbanceModel {
    pub fn is_zero(&self) -> bool {
        self.satellite_torque.is_zero()
            && self.satellite_force.is_zero()
            && self.tm.iter().all(|d| {
                d.force.is_zero()
                    && d.torque.is_zero()
                    && d.stiffness_force.is_zero()
                    && d.stiffness_torque.is_zero()
                    && d.gravity_gradient.is_zero()
                    && d.mosa_torque.is_zero()
            })
    }
}

/// Index of a test mass (and its MOSA).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TmIndex {
    One,
    Two,
}

impl TmIndex {
    pub const BOTH: [TmIndex; 2] = [TmIndex::One, TmIndex::Two];

    pub fn index(self) -> usize {
        match self {
            TmIndex::One => 0,
            TmIndex::Two => 1,
        }
    }

    fn sign(self) -> f64 {
        match self {
            TmIndex::One => 1.0,
            TmIndex::Two => -1.0,
        }
    }
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `skew(x_dot) + skew(x)²`, the rotating-frame acceleration operator.
pub fn omega_big(x: &Vector3<f64>, x_dot: &Vector3<f64>) -> Matrix3<f64> {
    let sx = skew(x);
    skew(x_dot) + sx * sx
}

/// Rotation taking ORF-i components to SRF components: a z-rotation by
/// ±(γ_nominal + ζ), positive for TM 1 and negative for TM 2.
pub fn rotation_orf_to_srf(tm: TmIndex, gamma_nominal: f64, zeta: f64) -> Matrix3<f64> {
    let angle = tm.sign() * (gamma_nominal + zeta);
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// The plant: validated parameters, disturbances, and precomputed inverses.
#[derive(Clone, Debug)]
pub struct Plant {
    params: SatelliteParams,
    disturbance: DisturbanceModel,
    /// (J_S − Σ I_zz e3 e3ᵀ)⁻¹; MOSA reaction folded into the satellite inertia.
    j_eff_inv: Matrix3<f64>,
    j_m_inv: [Matrix3<f64>; 2],
}

impl Plant {
    pub fn new(params: SatelliteParams, disturbance: DisturbanceModel) -> Result<Self> {
        params.validate()?;
        // Every ORF shares the SRF z-axis, so R e3 = e3 for any MOSA angle
        // and the coupled MOSA/attitude system has a constant Schur complement.
        let mut j_eff = params.inertia;
        for tm in &params.tm {
            j_eff -= tm.mosa_inertia * e3() * e3().transpose();
        }
        let j_eff_inv = check_inertia("satellite inertia less MOSA inertia", &j_eff)?;
        let j_m_inv = [
            check_inertia("tm1 inertia", &params.tm[0].inertia)?,
            check_inertia("tm2 inertia", &params.tm[1].inertia)?,
        ];
        Ok(Self {
            params,
            disturbance,
            j_eff_inv,
            j_m_inv,
        })
    }

    pub fn with_params(params: SatelliteParams) -> Result<Self> {
        Self::new(params, DisturbanceModel::default())
    }

    pub fn params(&self) -> &SatelliteParams {
        &self.params
    }

    pub fn disturbance(&self) -> &DisturbanceModel {
        &self.disturbance
    }

    /// Time derivative of the full plant state.
    ///
    /// The attitude and MOSA equations are solved jointly first; the TM
    /// translation and rotation then use the resulting ω̇_SI and ζ̈.
    pub fn derivative(&self, t: f64, x: &PlantState, u: &ControlInput) -> PlantState {
        let p = &self.params;
        let d = &self.disturbance;
        let w = x.omega_si;

        let r_os: [Matrix3<f64>; 2] = TmIndex::BOTH
            .map(|tm| rotation_orf_to_srf(tm, p.tm[tm.index()].gamma_nominal, x.zeta[tm.index()]));

        // Satellite torque balance without the MOSA reaction.
        let mut torque = -w.cross(&(p.inertia * w)) + u.m_t + d.satellite_torque.eval(t, x);
        let mut zeta_rhs = [0.0; 2];
        for i in 0..2 {
            let tp = &p.tm[i];
            let b = tp.pivot + r_os[i] * tp.pivot_to_cage;
            torque -= r_os[i] * u.m_e[i] + b.cross(&(r_os[i] * u.f_e[i]));
            let wn = tp.natural_frequency;
            zeta_rhs[i] = -2.0 * wn * tp.damping_ratio * x.zeta_dot[i] - wn * wn * x.zeta[i]
                + (u.m_mosa[i] - u.m_e[i].z + d.tm[i].mosa_torque.eval(t, x)) / tp.mosa_inertia;
        }
        let mut reaction = torque;
        for i in 0..2 {
            reaction -= r_os[i] * e3() * (p.tm[i].mosa_inertia * zeta_rhs[i]);
        }
        let w_dot = self.j_eff_inv * reaction;
        let zeta_ddot: [f64; 2] =
            std::array::from_fn(|i| zeta_rhs[i] - (r_os[i] * e3()).dot(&w_dot));

        let omega_sat = omega_big(&w, &w_dot);
        let f_t = u.f_t + d.satellite_force.eval(t, x);

        let mut tm_dot = [TestMassState::default(); 2];
        for i in 0..2 {
            let tp = &p.tm[i];
            let tm = &x.tm[i];
            let dist = &d.tm[i];
            let r_so = r_os[i].transpose();
            let r_om = Matrix3::identity() - skew(&tm.theta);
            let r_sm = r_om * r_so;

            let w_gamma = e3() * x.zeta_dot[i];
            let w_o = r_so * w + w_gamma;
            let w_o_dot = r_so * w_dot - w_gamma.cross(&(r_so * w)) + e3() * zeta_ddot[i];
            let omega_orf = omega_big(&w_o, &w_o_dot);

            let mut reaction_force = Vector3::zeros();
            for j in 0..2 {
                reaction_force += r_om * r_so * r_os[j] * u.f_e[j];
            }

            let r_ddot = r_so * dist.gravity_gradient.eval(t, x)
                + (u.f_e[i] + dist.force.eval(t, x) + dist.stiffness_force.eval(t, x)) / tp.mass
                - r_om * f_t / p.mass
                + reaction_force / p.mass
                - r_so * omega_sat * tp.pivot
                - omega_orf * tp.pivot_to_cage
                - omega_orf * tm.r
                - 2.0 * w_o.cross(&tm.r_dot);

            let w_mi = tm.omega + r_om * w_o;
            let torque_tm =
                u.m_e[i] + dist.torque.eval(t, x) + dist.stiffness_torque.eval(t, x);
            let omega_dot = -self.j_m_inv[i] * w_mi.cross(&(tp.inertia * w_mi))
                + self.j_m_inv[i] * r_om * torque_tm
                - r_om * e3() * zeta_ddot[i]
                - r_sm * w_dot;

            tm_dot[i] = TestMassState {
                r: tm.r_dot,
                r_dot: r_ddot,
                theta: tm.omega,
                omega: omega_dot,
            };
        }

        PlantState {
            theta_si: w,
            omega_si: w_dot,
            zeta: x.zeta_dot,
            zeta_dot: zeta_ddot,
            tm: tm_dot,
        }
    }

    /// Flat-slice form of [`Plant::derivative`] for the integrator.
    pub fn derivative_slice(&self, t: f64, x: &[f64], u: &ControlInput, out: &mut [f64]) {
        let state = PlantState::from_slice(x).expect("state slice has 34 entries");
        self.derivative(t, &state, u).write_to(out);
    }
}
