//! Parallel attention block: channel gates (squeeze-and-excitation),
//! variable attention over the `F` axis and temporal attention over `T`.

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Per-channel sigmoid gates of shape `[N, C, 1, 1]`.
///
/// `sigmoid(relu(GAP(h) · W1) · W2)` with `W1: [C, C/r]`, `W2: [C/r, C]`.
pub fn se_forward(g: &mut Graph, h: Var, w1: Var, w2: Var) -> Result<Var> {
    let (n, c) = (g.shape(h)[0], g.shape(h)[1]);
    let squeezed = g.global_avg_pool(h)?;
    let hidden = g.linear(squeezed, w1, None)?;
    let hidden = g.relu(hidden);
    let excited = g.linear(hidden, w2, None)?;
    let gates = g.sigmoid(excited);
    Ok(g.reshape(gates, &[n, c, 1, 1])?)
}

/// Parameters of one self-attention branch: three 1×1 projections, the
/// 1×1 output projection back to `C` channels and the scalar mixing weight.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub output: (Var, Var),
    pub sigma: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Attend across feature rows within each time step; maps are
    /// `[N, T, F, F]`.
    Variable,
    /// Attend across time steps within each feature row; maps are
    /// `[N, F, T, T]`.
    Temporal,
}

impl AttentionAxis {
    /// Permutations of an `[N, C, F, T]` map into query `[N, B, L, C1]`,
    /// key `[N, B, C1, L]` and value `[N, B, L, C2]` layouts, where `B` is
    /// the axis held fixed and `L` the attended axis.
    fn layouts(self) -> ([usize; 4], [usize; 4], [usize; 4]) {
        match self {
            AttentionAxis::Variable => ([0, 3, 2, 1], [0, 3, 1, 2], [0, 3, 2, 1]),
            AttentionAxis::Temporal => ([0, 2, 3, 1], [0, 2, 1, 3], [0, 2, 3, 1]),
        }
    }

    /// Permutation taking the attended `[N, B, L, C2]` values back to
    /// `[N, C2, F, T]`.
    fn restore(self) -> [usize; 4] {
        match self {
            AttentionAxis::Variable => [0, 3, 2, 1],
            AttentionAxis::Temporal => [0, 3, 1, 2],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `sigma · Conv1x1_C(attended values)`, shape `[N, C, F, T]`.
    pub output: Var,
    /// Row-softmaxed attention weights.
    pub attention: Var,
}

pub fn attention_forward(g: &mut Graph, h: Var, vars: &AttentionVars, axis: AttentionAxis) -> Result<AttentionOutput> {
    let q = g.conv2d(h, vars.query.0, Some(vars.query.1), (0, 0), (1, 1))?;
    let k = g.conv2d(h, vars.key.0, Some(vars.key.1), (0, 0), (1, 1))?;
    let v = g.conv2d(h, vars.value.0, Some(vars.value.1), (0, 0), (1, 1))?;
    let (q_axes, k_axes, v_axes) = axis.layouts();
    let q = g.permute(q, &q_axes)?;
    let k = g.permute(k, &k_axes)?;
    let v = g.permute(v, &v_axes)?;
    let q = g.tanh(q);
    let k = g.tanh(k);
    let scores = g.batched_matmul(q, k)?;
    let attention = g.softmax(scores);
    let attended = g.batched_matmul(attention, v)?;
    let attended = g.permute(attended, &axis.restore())?;
    let projected = g.conv2d(attended, vars.output.0, Some(vars.output.1), (0, 0), (1, 1))?;
    let output = g.mul(projected, vars.sigma)?;
    Ok(AttentionOutput { output, attention })
}

pub fn va_forward(g: &mut Graph, h: Var, vars: &AttentionVars) -> Result<AttentionOutput> {
    attention_forward(g, h, vars, AttentionAxis::Variable)
}

pub fn ta_forward(g: &mut Graph, h: Var, vars: &AttentionVars) -> Result<AttentionOutput> {
    attention_forward(g, h, vars, AttentionAxis::Temporal)
}

/// `(features + temporal + variable) * gates`.
pub fn pa_combine(g: &mut Graph, h: Var, temporal: Var, variable: Var, gates: Var) -> Result<Var> {
    let s = g.add(h, temporal)?;
    let s = g.add(s, variable)?;
    Ok(g.mul(s, gates)?)
}
