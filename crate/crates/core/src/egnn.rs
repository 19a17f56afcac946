//! State refinement networks.
//!
//! [`EgnnParams`] drive the edge-aware network on label graphs: nodes receive
//! a mix of neighbour-node and incoming-edge messages, edges receive a
//! direction-aware message from their endpoint pair, and both are merged
//! into their states through gated recurrent updates. [`GgnnParams`] drive
//! the node-only gated network used on input graphs.
//!
//! Within a round edges are updated first, so the node messages of round `t`
//! read the round-`t` edge states.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// Gated recurrent update: inputs are messages, hidden state is the prior state.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GateParams {
    pub fn init(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut Rng) -> Self {
        let h = hidden;
        let mut mat = |s: &mut ParamStore, name: &str| s.uniform(alloc::format!("{prefix}.{name}"), &[h, h], h, rng);
        let w_update = mat(store, "w_update");
        let u_update = mat(store, "u_update");
        let w_reset = mat(store, "w_reset");
        let u_reset = mat(store, "u_reset");
        let w_cand = mat(store, "w_cand");
        let u_cand = mat(store, "u_cand");
        let b_update = store.zeros(alloc::format!("{prefix}.b_update"), &[h]);
        let b_reset = store.zeros(alloc::format!("{prefix}.b_reset"), &[h]);
        let b_cand = store.zeros(alloc::format!("{prefix}.b_cand"), &[h]);
        Self { w_update, u_update, b_update, w_reset, u_reset, b_reset, w_cand, u_cand, b_cand }
    }
}

#[derive(Debug, Clone)]
pub struct EgnnParams {
    pub hidden: usize,
    pub rounds: usize,
    /// Weight of node-to-node messages; `1 - alpha` goes to edge-to-node messages.
    pub alpha: f64,
    pub in_node_w: ParamId,
    pub in_node_b: ParamId,
    pub in_edge_w: ParamId,
    pub in_edge_b: ParamId,
    pub w_nn: ParamId,
    pub w_en: ParamId,
    /// `[2h, h]`: rows `0..h` act on the subject, rows `h..2h` on the object.
    pub w_ee: ParamId,
    pub node_gate: GateParams,
    pub edge_gate: GateParams,
}

impl EgnnParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        num_objects: usize,
        num_predicates: usize,
        hidden: usize,
        rounds: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(alloc::format!("alpha {alpha} outside [0, 1]")));
        }
        let h = hidden;
        Ok(Self {
            hidden,
            rounds,
            alpha,
            in_node_w: store.uniform("egnn.in_node_w", &[num_objects, h], num_objects, rng),
            in_node_b: store.zeros("egnn.in_node_b", &[h]),
            in_edge_w: store.uniform("egnn.in_edge_w", &[num_predicates, h], num_predicates, rng),
            in_edge_b: store.zeros("egnn.in_edge_b", &[h]),
            w_nn: store.uniform("egnn.w_nn", &[h, h], h, rng),
            w_en: store.uniform("egnn.w_en", &[h, h], h, rng),
            w_ee: store.uniform("egnn.w_ee", &[2 * h, h], 2 * h, rng),
            node_gate: GateParams::init(store, "egnn.node_gate", h, rng),
            edge_gate: GateParams::init(store, "egnn.edge_gate", h, rng),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GgnnParams {
    pub hidden: usize,
    pub rounds: usize,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub w_msg: ParamId,
    pub gate: GateParams,
}

impl GgnnParams {
    pub fn init(store: &mut ParamStore, feature_width: usize, hidden: usize, rounds: usize, rng: &mut Rng) -> Self {
        let h = hidden;
        Self {
            hidden,
            rounds,
            in_w: store.uniform("ggnn.in_w", &[feature_width, h], feature_width, rng),
            in_b: store.zeros("ggnn.in_b", &[h]),
            w_msg: store.uniform("ggnn.w_msg", &[h, h], h, rng),
            gate: GateParams::init(store, "ggnn.gate", h, rng),
        }
    }
}

fn expect_shape(tape: &Tape, v: Var, what: &str, shape: &[usize]) -> Result<()> {
    if tape.shape(v) == shape {
        Ok(())
    } else {
        Err(Error::Shape(alloc::format!("{what}: expected {shape:?}, got {:?}", tape.shape(v))))
    }
}

/// `sum_{j != i} x_j` for every row `i` of `[n, h]`.
fn sum_of_others(tape: &mut Tape, states: Var) -> Result<Var> {
    let total = tape.sum_axis(states, 0)?;
    let neg = tape.scale(states, -1.0)?;
    tape.add(neg, total)
}

/// `m_i = alpha W_nn (sum_{j != i} n_j) + (1 - alpha) W_en (sum_{j != i} e_{j->i})`
pub fn node_message(tape: &mut Tape, states: Var, edge_states: Var, p: &EgnnParams, b: &Bound) -> Result<Var> {
    let n = tape.shape(states)[0];
    let h = p.hidden;
    expect_shape(tape, states, "node states", &[n, h])?;
    expect_shape(tape, edge_states, "edge states", &[n, n, h])?;
    let mut terms = Vec::with_capacity(2);
    if p.alpha != 0.0 {
        let others = sum_of_others(tape, states)?;
        let msg = tape.matmul(others, b[p.w_nn])?;
        terms.push(tape.scale(msg, p.alpha)?);
    }
    if p.alpha != 1.0 {
        // axis 0 of edge_states is the source node: summing it gives incoming edges per target
        let incoming = tape.sum_axis(edge_states, 0)?;
        let msg = tape.matmul(incoming, b[p.w_en])?;
        terms.push(tape.scale(msg, 1.0 - p.alpha)?);
    }
    match terms[..] {
        [one] => Ok(one),
        [a, c] => tape.add(a, c),
        _ => unreachable!(),
    }
}

/// `d_{i->j} = W_ee [n_i || n_j]` for `i != j`, zero on the diagonal.
///
/// `mask` is the `[n, n, 1]` off-diagonal mask.
pub fn edge_message(tape: &mut Tape, states: Var, mask: Var, p: &EgnnParams, b: &Bound) -> Result<Var> {
    let n = tape.shape(states)[0];
    let h = p.hidden;
    expect_shape(tape, states, "node states", &[n, h])?;
    let subj_w = tape.slice(b[p.w_ee], 0, 0, h)?;
    let obj_w = tape.slice(b[p.w_ee], 0, h, 2 * h)?;
    let from_subject = tape.matmul(states, subj_w)?;
    let from_object = tape.matmul(states, obj_w)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let si = tape.slice(from_subject, 0, i, i + 1)?;
        rows.push(tape.add(from_object, si)?);
    }
    let all = tape.stack(&rows)?;
    tape.mul(all, mask)
}

/// Gated recurrent update over the trailing axis of `states` / `messages`.
pub fn gated_update(tape: &mut Tape, states: Var, messages: Var, g: &GateParams, b: &Bound) -> Result<Var> {
    if tape.shape(states) != tape.shape(messages) {
        return Err(Error::Shape(alloc::format!(
            "gated update: states {:?} vs messages {:?}",
            tape.shape(states),
            tape.shape(messages)
        )));
    }
    let z_in = tape.affine(messages, b[g.w_update], b[g.b_update])?;
    let z_hid = tape.matmul(states, b[g.u_update])?;
    let z_pre = tape.add(z_in, z_hid)?;
    let z = tape.sigmoid(z_pre)?;

    let r_in = tape.affine(messages, b[g.w_reset], b[g.b_reset])?;
    let r_hid = tape.matmul(states, b[g.u_reset])?;
    let r_pre = tape.add(r_in, r_hid)?;
    let r = tape.sigmoid(r_pre)?;

    let c_in = tape.affine(messages, b[g.w_cand], b[g.b_cand])?;
    let reset_states = tape.mul(r, states)?;
    let c_hid = tape.matmul(reset_states, b[g.u_cand])?;
    let c_pre = tape.add(c_in, c_hid)?;
    let cand = tape.tanh(c_pre)?;

    // (1 - z) * s + z * c  ==  s + z * (c - s)
    let diff = tape.sub(cand, states)?;
    let step = tape.mul(z, diff)?;
    tape.add(states, step)
}

/// Refined node `[n, h]` and edge `[n, n, h]` states of a label graph.
pub fn egnn_forward(
    tape: &mut Tape,
    nodes: Var,
    edges: Var,
    mask: Var,
    p: &EgnnParams,
    b: &Bound,
) -> Result<(Var, Var)> {
    let n = tape.shape(nodes)[0];
    if tape.shape(edges).len() != 3 || tape.shape(edges)[..2] != [n, n] {
        return Err(Error::Shape(alloc::format!("edge scores {:?} for {n} nodes", tape.shape(edges))));
    }
    let mut node_states = tape.affine(nodes, b[p.in_node_w], b[p.in_node_b])?;
    let edge_proj = tape.affine(edges, b[p.in_edge_w], b[p.in_edge_b])?;
    let mut edge_states = tape.mul(edge_proj, mask)?;
    for _ in 0..p.rounds {
        let d = edge_message(tape, node_states, mask, p, b)?;
        let updated = gated_update(tape, edge_states, d, &p.edge_gate, b)?;
        edge_states = tape.mul(updated, mask)?;
        let m = node_message(tape, node_states, edge_states, p, b)?;
        node_states = gated_update(tape, node_states, m, &p.node_gate, b)?;
    }
    Ok((node_states, edge_states))
}

/// Refined node states `[n, h]` of an input graph; messages `W_msg sum_{j != i} n_j`.
pub fn ggnn_forward(tape: &mut Tape, features: Var, p: &GgnnParams, b: &Bound) -> Result<Var> {
    if tape.shape(features).len() != 2 {
        return Err(Error::Shape(alloc::format!("features {:?}", tape.shape(features))));
    }
    let mut states = tape.affine(features, b[p.in_w], b[p.in_b])?;
    for _ in 0..p.rounds {
        let others = sum_of_others(tape, states)?;
        let m = tape.matmul(others, b[p.w_msg])?;
        states = gated_update(tape, states, m, &p.gate, b)?;
    }
    Ok(states)
}
