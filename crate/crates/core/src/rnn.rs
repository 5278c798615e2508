//! Gated recurrent unit step functions (GRU and LSTM).
//!
//! Both steps are pure functions over tape vars: given bound parameters,
//! an optional input vector, and the previous state they append the gate
//! arithmetic to the tape and return the new state. Deep transition layers
//! above the first have no input term, which is modelled as `input: None`
//! together with `w: None` in each gate block.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Gru,
    Lstm,
}

/// Recurrent state: hidden vector plus a cell vector iff the unit is LSTM.
#[derive(Debug, Clone)]
pub struct RnnState {
    pub hidden: Var,
    pub cell: Option<Var>,
}

impl RnnState {
    pub fn gru(hidden: Var) -> Self {
        RnnState { hidden, cell: None }
    }

    pub fn lstm(hidden: Var, cell: Var) -> Self {
        RnnState { hidden, cell: Some(cell) }
    }
}

/// One pre-activation block `W x + U h + b`, with optional layer-norm
/// gain/bias applied to the sum.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w: Option<Var>,
    pub u: Var,
    pub b: Var,
    pub ln: Option<(Var, Var)>,
}

/// GRU parameters: candidate state plus update and reset gates.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub cand: GateParams,
    pub update: GateParams,
    pub reset: GateParams,
}

/// LSTM parameters: input, forget, and output gates plus the cell candidate.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub cand: GateParams,
    pub output: GateParams,
}

fn preactivation(tape: &mut Tape, gp: &GateParams, input: Option<Var>, recur: Var) -> Result<Var> {
    let mut s = tape.matmul(gp.u, recur)?;
    match (gp.w, input) {
        (Some(w), Some(x)) => {
            let wx = tape.matmul(w, x)?;
            s = tape.add(s, wx)?;
        }
        (None, None) => {}
        (Some(_), None) => return Err(Error::Arg("gate has input weights but no input given".into())),
        (None, Some(_)) => return Err(Error::Arg("gate has no input weights but an input was given".into())),
    }
    s = tape.add(s, gp.b)?;
    if let Some((gain, bias)) = gp.ln {
        s = tape.layer_norm(s, gain, bias, LAYER_NORM_EPS)?;
    }
    Ok(s)
}

/// GRU step: `h' = (1 - z) .* h + z .* tanh(W x + U (r .* h) + b)`.
pub fn gru_step(tape: &mut Tape, p: &GruParams, input: Option<Var>, state: &RnnState) -> Result<RnnState> {
    if state.cell.is_some() {
        return Err(Error::Arg("GRU state must not carry a cell".into()));
    }
    let h = state.hidden;
    let z_pre = preactivation(tape, &p.update, input, h)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = preactivation(tape, &p.reset, input, h)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let cand_pre = preactivation(tape, &p.cand, input, rh)?;
    let hbar = tape.tanh(cand_pre);
    // (1 - z) .* h + z .* hbar, written as h + z .* (hbar - h)
    let delta = tape.sub(hbar, h)?;
    let step = tape.mul(z, delta)?;
    let new_h = tape.add(h, step)?;
    Ok(RnnState::gru(new_h))
}

/// LSTM step: gates and cell update, hidden `h' = o .* tanh(c')`.
pub fn lstm_step(tape: &mut Tape, p: &LstmParams, input: Option<Var>, state: &RnnState) -> Result<RnnState> {
    let cell = state.cell.ok_or_else(|| Error::Arg("LSTM state requires a cell".into()))?;
    let h = state.hidden;
    let i_pre = preactivation(tape, &p.input, input, h)?;
    let i_gate = tape.sigmoid(i_pre);
    let f_pre = preactivation(tape, &p.forget, input, h)?;
    let f_gate = tape.sigmoid(f_pre);
    let o_pre = preactivation(tape, &p.output, input, h)?;
    let o_gate = tape.sigmoid(o_pre);
    let c_pre = preactivation(tape, &p.cand, input, h)?;
    let c_cand = tape.tanh(c_pre);
    let kept = tape.mul(f_gate, cell)?;
    let written = tape.mul(i_gate, c_cand)?;
    let new_cell = tape.add(kept, written)?;
    let cell_act = tape.tanh(new_cell);
    let new_h = tape.mul(o_gate, cell_act)?;
    Ok(RnnState::lstm(new_h, new_cell))
}

/// Dispatch on unit kind.
pub fn unit_state_init(tape: &mut Tape, kind: UnitKind, hidden_dim: usize) -> RnnState {
    let h = tape.leaf(crate::tensor::Tensor::zeros(&[hidden_dim]));
    match kind {
        UnitKind::Gru => RnnState::gru(h),
        UnitKind::Lstm => {
            let c = tape.leaf(crate::tensor::Tensor::zeros(&[hidden_dim]));
            RnnState::lstm(h, c)
        }
    }
}
