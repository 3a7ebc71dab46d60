//! Lifting dictionaries: the observables Ψ, optional compensation observables
//! Ψ̄ and input-coupling functions Ψ_u that span the lifted (Koopman) space.
//!
//! Every observable used here is either a raw state component or a product
//! of two state components, so values and time derivatives (chain rule) are
//! both exact and cheap. No observable is constant, hence `lift(0) = 0`.

use std::collections::HashSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{input_layout as il, state_layout as sl, ControlInput, PlantState, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};

/// All degree-2 monomials `v_i v_j`, `i ≤ j`, in lexicographic order.
pub fn phi2(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(v[i] * v[j]);
        }
    }
    out
}

/// Kronecker product of two vectors: element `i*m + j` is `a_i b_j`.
pub fn kron(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

const AXES: [&str; 3] = ["x", "y", "z"];

/// Human-readable name of a flat state component.
pub fn state_component_name(i: usize) -> String {
    assert!(i < STATE_DIM);
    let axis = |k: usize| AXES[k % 3];
    match i {
        0..=2 => format!("theta_si_{}", axis(i)),
        3..=5 => format!("omega_si_{}", axis(i)),
        6 | 7 => format!("zeta{}", i - 5),
        8 | 9 => format!("zeta_dot{}", i - 7),
        _ => {
            let tm = if i < sl::TM[1] { 1 } else { 2 };
            let off = i - sl::TM[tm - 1];
            let field = ["r_mo", "r_dot_mo", "theta_mo", "omega_mo"][off / 3];
            format!("{field}{tm}_{}", axis(off))
        }
    }
}

/// Human-readable name of a flat input channel.
pub fn input_channel_name(i: usize) -> String {
    assert!(i < INPUT_DIM);
    let axis = AXES[i % 3];
    match i {
        0..=2 => format!("m_t_{axis}"),
        3..=5 => format!("f_t_{axis}"),
        6..=8 => format!("f_e1_{axis}"),
        9..=11 => format!("m_e1_{axis}"),
        12..=14 => format!("f_e2_{axis}"),
        15..=17 => format!("m_e2_{axis}"),
        _ => format!("m_mosa{}", i - 17),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    /// Raw state component.
    Linear { state: usize },
    /// Product of two state components.
    Product { a: usize, b: usize },
}

impl Term {
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Linear { state } => x[state],
            Term::Product { a, b } => x[a] * x[b],
        }
    }

    fn rate(&self, x: &[f64], x_dot: &[f64]) -> f64 {
        match *self {
            Term::Linear { state } => x_dot[state],
            Term::Product { a, b } => x_dot[a] * x[b] + x[a] * x_dot[b],
        }
    }

    fn default_name(&self) -> String {
        match *self {
            Term::Linear { state } => state_component_name(state),
            Term::Product { a, b } if a == b => format!("{}^2", state_component_name(a)),
            Term::Product { a, b } => {
                format!("{}*{}", state_component_name(a), state_component_name(b))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observable {
    pub name: String,
    pub term: Term,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputObservable {
    pub name: String,
    /// Raw input channel passed through unchanged.
    pub channel: usize,
}

/// A contiguous, named run of entries in Ψ or Ψ_u.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub name: String,
    pub observables: Vec<Observable>,
    /// Higher-order compensation observables Ψ̄; empty in the shipped dictionaries.
    #[serde(default)]
    pub compensation: Vec<Observable>,
    pub inputs: Vec<InputObservable>,
    pub blocks: Vec<Block>,
    pub input_blocks: Vec<Block>,
}

#[derive(Default)]
struct Builder {
    observables: Vec<Observable>,
    blocks: Vec<Block>,
    inputs: Vec<InputObservable>,
    input_blocks: Vec<Block>,
}

impl Builder {
    fn block(&mut self, name: &str, terms: Vec<Term>) -> &mut Self {
        self.blocks.push(Block {
            name: name.into(),
            start: self.observables.len(),
            len: terms.len(),
        });
        self.observables.extend(terms.into_iter().map(|term| Observable {
            name: term.default_name(),
            term,
        }));
        self
    }

    fn input_block(&mut self, name: &str, channels: std::ops::Range<usize>) -> &mut Self {
        self.input_blocks.push(Block {
            name: name.into(),
            start: self.inputs.len(),
            len: channels.len(),
        });
        self.inputs.extend(channels.map(|channel| InputObservable {
            name: input_channel_name(channel),
            channel,
        }));
        self
    }

    fn finish(&mut self, name: &str) -> Dictionary {
        Dictionary {
            name: name.into(),
            observables: std::mem::take(&mut self.observables),
            compensation: Vec::new(),
            inputs: std::mem::take(&mut self.inputs),
            blocks: std::mem::take(&mut self.blocks),
            input_blocks: std::mem::take(&mut self.input_blocks),
        }
    }
}

fn linear(start: usize, len: usize) -> Vec<Term> {
    (start..start + len).map(|state| Term::Linear { state }).collect()
}

fn kron_terms(a: usize, b: usize) -> Vec<Term> {
    (0..3)
        .flat_map(|i| (0..3).map(move |j| Term::Product { a: a + i, b: b + j }))
        .collect()
}

fn phi2_terms(start: usize, len: usize) -> Vec<Term> {
    (0..len)
        .flat_map(|i| (i..len).map(move |j| Term::Product { a: start + i, b: start + j }))
        .collect()
}

impl Dictionary {
    /// Attitude / MOSA subsystem: Ψ₁ (27 observables), Ψ_u1 = [M_T, M_MOSA1, M_MOSA2].
    pub fn attitude() -> Self {
        let mut b = Builder::default();
        b.block("theta_si", linear(sl::THETA_SI, 3))
            .block("zeta", linear(sl::ZETA, 2))
            .block("omega_si", linear(sl::OMEGA_SI, 3))
            .block("zeta_dot", linear(sl::ZETA_DOT, 2))
            .block("theta_si_kron_omega_si", kron_terms(sl::THETA_SI, sl::OMEGA_SI))
            .block("phi2_omega_si", phi2_terms(sl::OMEGA_SI, 3))
            .block(
                "zeta_dot_sq",
                (0..2)
                    .map(|i| Term::Product {
                        a: sl::ZETA_DOT + i,
                        b: sl::ZETA_DOT + i,
                    })
                    .collect(),
            )
            .input_block("m_t", il::M_T..il::M_T + 3)
            .input_block("m_mosa", il::M_MOSA..il::M_MOSA + 2);
        b.finish("attitude")
    }

    /// Test-mass subsystem: Ψ₂ (84 observables), Ψ_u2 = [F_E1, M_E1, F_E2, M_E2].
    pub fn test_mass() -> Self {
        let tm = |i: usize, off: usize| sl::TM[i] + off;
        let mut b = Builder::default();
        for i in 0..2 {
            b.block(&format!("r_mo{}", i + 1), linear(tm(i, sl::R), 3))
                .block(&format!("theta_mo{}", i + 1), linear(tm(i, sl::THETA), 3));
        }
        for i in 0..2 {
            b.block(&format!("r_dot_mo{}", i + 1), linear(tm(i, sl::R_DOT), 3))
                .block(&format!("omega_mo{}", i + 1), linear(tm(i, sl::OMEGA), 3));
        }
        for i in 0..2 {
            let n = i + 1;
            b.block(&format!("r_mo{n}_kron_r_dot_mo{n}"), kron_terms(tm(i, sl::R), tm(i, sl::R_DOT)))
                .block(
                    &format!("theta_mo{n}_kron_omega_mo{n}"),
                    kron_terms(tm(i, sl::THETA), tm(i, sl::OMEGA)),
                );
        }
        for i in 0..2 {
            let n = i + 1;
            b.block(&format!("phi2_r_dot_mo{n}"), phi2_terms(tm(i, sl::R_DOT), 3))
                .block(&format!("phi2_omega_mo{n}"), phi2_terms(tm(i, sl::OMEGA), 3));
        }
        for i in 0..2 {
            b.input_block(&format!("f_e{}", i + 1), il::F_E[i]..il::F_E[i] + 3)
                .input_block(&format!("m_e{}", i + 1), il::M_E[i]..il::M_E[i] + 3);
        }
        b.finish("test_mass")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "attitude" => Ok(Self::attitude()),
            "test_mass" => Ok(Self::test_mass()),
            other => Err(Error::Config(format!("unknown dictionary '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.observables.is_empty() || self.inputs.is_empty() {
            return Err(Error::Config(format!("dictionary '{}' has an empty block", self.name)));
        }
        let mut seen = HashSet::new();
        let names = self
            .observables
            .iter()
            .chain(&self.compensation)
            .map(|o| &o.name)
            .chain(self.inputs.iter().map(|i| &i.name));
        for name in names {
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate observable name '{name}'")));
            }
        }
        for o in self.observables.iter().chain(&self.compensation) {
            let ok = match o.term {
                Term::Linear { state } => state < STATE_DIM,
                Term::Product { a, b } => a < STATE_DIM && b < STATE_DIM,
            };
            if !ok {
                return Err(Error::Config(format!("observable '{}' out of range", o.name)));
            }
        }
        if self.inputs.iter().any(|i| i.channel >= INPUT_DIM) {
            return Err(Error::Config("input channel out of range".into()));
        }
        for b in &self.blocks {
            if b.start + b.len > self.observables.len() {
                return Err(Error::Config(format!("block '{}' out of range", b.name)));
            }
        }
        Ok(())
    }

    /// N: number of state observables Ψ.
    pub fn n_state(&self) -> usize {
        self.observables.len()
    }

    /// N̄: number of compensation observables.
    pub fn n_compensation(&self) -> usize {
        self.compensation.len()
    }

    /// M: number of input observables Ψ_u.
    pub fn n_input(&self) -> usize {
        self.inputs.len()
    }

    /// Library width N + N̄ + M.
    pub fn n_library(&self) -> usize {
        self.n_state() + self.n_compensation() + self.n_input()
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn input_block(&self, name: &str) -> Option<&Block> {
        self.input_blocks.iter().find(|b| b.name == name)
    }

    /// Pairs (lifted index, state index) of the raw-state observables.
    pub fn linear_indices(&self) -> Vec<(usize, usize)> {
        self.observables
            .iter()
            .enumerate()
            .filter_map(|(k, o)| match o.term {
                Term::Linear { state } => Some((k, state)),
                Term::Product { .. } => None,
            })
            .collect()
    }

    pub fn lift_slice(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n_state(), self.observables.iter().map(|o| o.term.eval(x)))
    }

    /// χ = Ψ(x).
    pub fn lift(&self, x: &PlantState) -> DVector<f64> {
        self.lift_slice(&x.to_array())
    }

    pub fn lift_compensation(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.n_compensation(),
            self.compensation.iter().map(|o| o.term.eval(x)),
        )
    }

    pub fn lift_inputs_slice(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n_input(), self.inputs.iter().map(|i| u[i.channel]))
    }

    /// Ψ_u(u).
    pub fn lift_inputs(&self, u: &ControlInput) -> DVector<f64> {
        self.lift_inputs_slice(&u.to_array())
    }

    /// dΨ/dt by the chain rule, given the state and its time derivative.
    pub fn lift_rate(&self, x: &[f64], x_dot: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.n_state(),
            self.observables.iter().map(|o| o.term.rate(x, x_dot)),
        )
    }

    /// One library row [Ψ(x), Ψ̄(x), Ψ_u(u)] written into `row`.
    pub fn library_row(&self, x: &[f64], u: &[f64], row: &mut [f64]) {
        let (n, nb) = (self.n_state(), self.n_compensation());
        for (k, o) in self.observables.iter().enumerate() {
            row[k] = o.term.eval(x);
        }
        for (k, o) in self.compensation.iter().enumerate() {
            row[n + k] = o.term.eval(x);
        }
        for (k, i) in self.inputs.iter().enumerate() {
            row[n + nb + k] = u[i.channel];
        }
    }

    /// Write the raw-state entries of `chi` back into a state vector;
    /// components outside this subsystem are left untouched.
    pub fn unlift_into(&self, chi: &[f64], x: &mut [f64]) {
        for (k, s) in self.linear_indices() {
            x[s] = chi[k];
        }
    }

    /// Scatter a lifted input vector back onto the physical input channels.
    pub fn unlift_inputs_into(&self, psi_u: &[f64], u: &mut [f64]) {
        for (k, i) in self.inputs.iter().enumerate() {
            u[i.channel] = psi_u[k];
        }
    }
}
