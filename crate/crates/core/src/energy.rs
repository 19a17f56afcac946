//! Joint energy of an input graph and a label graph.
//!
//! Both graphs are refined (edge-aware network on the label graph, gated
//! network on the input graph), pooled with scalar gates, and fed to an MLP
//! that returns one scalar. Lower energy means a more compatible pair.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::egnn::{egnn_forward, ggnn_forward, EgnnParams, GgnnParams};
use crate::error::{Error, Result};
use crate::graph::{off_diagonal_mask, ImageGraph, SceneGraphState};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Architecture of the energy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub num_objects: usize,
    pub num_predicates: usize,
    pub feature_width: usize,
    pub hidden: usize,
    /// Message-passing rounds of both graph networks.
    pub rounds: usize,
    pub alpha: f64,
}

impl EnergyConfig {
    pub fn new(num_objects: usize, num_predicates: usize, feature_width: usize) -> Self {
        Self { num_objects, num_predicates, feature_width, hidden: 64, rounds: 3, alpha: 0.5 }
    }
}

/// Scalar gate `sigmoid(x w + b)`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub w: ParamId,
    pub b: ParamId,
}

impl Gate {
    fn init(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.uniform(alloc::format!("{prefix}.w"), &[hidden, 1], hidden, rng),
            b: store.zeros(alloc::format!("{prefix}.b"), &[1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.uniform(alloc::format!("{prefix}.w"), &[fan_in, fan_out], fan_in, rng),
            b: store.zeros(alloc::format!("{prefix}.b"), &[fan_out]),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, b: &Bound) -> Result<Var> {
        tape.affine(x, b[self.w], b[self.b])
    }
}

/// Gated pooling. Label graphs use both gates and the combining layer;
/// input graphs use the node gate only.
#[derive(Debug, Clone)]
pub struct PoolParams {
    pub node_gate: Gate,
    pub edge_gate: Option<Gate>,
    pub combine: Option<Linear>,
}

/// `2h -> h -> h -> 1` with tanh between layers.
#[derive(Debug, Clone)]
pub struct EnergyHeadParams {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub config: EnergyConfig,
    pub store: ParamStore,
    pub egnn: EgnnParams,
    pub ggnn: GgnnParams,
    pub pool_sg: PoolParams,
    pub pool_ig: PoolParams,
    pub head: EnergyHeadParams,
}

impl EnergyModel {
    pub fn new(config: EnergyConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.feature_width == 0 {
            return Err(Error::InvalidConfig("hidden and feature widths must be positive".into()));
        }
        let mut rng = stream(seed, &[0xE4E2]);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let egnn = EgnnParams::init(
            &mut store,
            config.num_objects,
            config.num_predicates,
            h,
            config.rounds,
            config.alpha,
            &mut rng,
        )?;
        let ggnn = GgnnParams::init(&mut store, config.feature_width, h, config.rounds, &mut rng);
        let pool_sg = PoolParams {
            node_gate: Gate::init(&mut store, "pool_sg.node_gate", h, &mut rng),
            edge_gate: Some(Gate::init(&mut store, "pool_sg.edge_gate", h, &mut rng)),
            combine: Some(Linear::init(&mut store, "pool_sg.combine", 2 * h, h, &mut rng)),
        };
        let pool_ig = PoolParams {
            node_gate: Gate::init(&mut store, "pool_ig.node_gate", h, &mut rng),
            edge_gate: None,
            combine: None,
        };
        let head = EnergyHeadParams {
            l1: Linear::init(&mut store, "head.l1", 2 * h, h, &mut rng),
            l2: Linear::init(&mut store, "head.l2", h, h, &mut rng),
            out: Linear::init(&mut store, "head.out", h, 1, &mut rng),
        };
        Ok(Self { config, store, egnn, ggnn, pool_sg, pool_ig, head })
    }

    /// Energy value of one pair.
    pub fn energy(&self, ig: &ImageGraph, sg: &SceneGraphState) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let feats = tape.constant(ig.features.clone())?;
        let nodes = tape.constant(sg.nodes.clone())?;
        let edges = tape.constant(sg.edges.clone())?;
        let e = energy_forward(&mut tape, feats, nodes, edges, self, &b)?;
        Ok(tape.value(e).data()[0])
    }

    /// Energy and its gradients with respect to node and edge scores.
    pub fn energy_with_state_grads(&self, ig: &ImageGraph, sg: &SceneGraphState) -> Result<(f64, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let feats = tape.constant(ig.features.clone())?;
        let nodes = tape.variable(sg.nodes.clone())?;
        let edges = tape.variable(sg.edges.clone())?;
        let e = energy_forward(&mut tape, feats, nodes, edges, self, &b)?;
        let value = tape.value(e).data()[0];
        let mut grads = tape.backward(e)?;
        let gn = grads.take(nodes).unwrap_or_else(|| Tensor::zeros(sg.nodes.shape()));
        let ge = grads.take(edges).unwrap_or_else(|| Tensor::zeros(sg.edges.shape()));
        Ok((value, gn, ge))
    }
}

/// `N = sum_k f_gate(n_k) * n_k` over `[n, h]` states.
pub fn gated_pool_nodes(tape: &mut Tape, states: Var, gate: &Gate, b: &Bound) -> Result<Var> {
    if tape.shape(states).len() != 2 {
        return Err(Error::Shape(alloc::format!("node states {:?}", tape.shape(states))));
    }
    let g = tape.affine(states, b[gate.w], b[gate.b])?;
    let g = tape.sigmoid(g)?;
    let gated = tape.mul(states, g)?;
    tape.sum_axis(gated, 0)
}

/// `E = sum_{i != j} g_gate(e_ij) * e_ij` over `[n, n, h]` states; zero when `n < 2`.
pub fn gated_pool_edges(tape: &mut Tape, edge_states: Var, mask: Var, gate: &Gate, b: &Bound) -> Result<Var> {
    let shape = tape.shape(edge_states).to_vec();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::Shape(alloc::format!("edge states {shape:?}")));
    }
    if shape[0] < 2 {
        return tape.constant(Tensor::zeros(&[shape[2]]));
    }
    let g = tape.affine(edge_states, b[gate.w], b[gate.b])?;
    let g = tape.sigmoid(g)?;
    let g = tape.mul(g, mask)?;
    let gated = tape.mul(edge_states, g)?;
    let rows = tape.sum_axis(gated, 0)?;
    tape.sum_axis(rows, 0)
}

/// Scalar energy `MLP[combine(N_sg || E_sg) || N_ig]` as a `[1]` tensor.
pub fn energy_forward(
    tape: &mut Tape,
    features: Var,
    nodes: Var,
    edges: Var,
    model: &EnergyModel,
    b: &Bound,
) -> Result<Var> {
    let n = tape.shape(nodes)[0];
    if tape.shape(features)[0] != n {
        return Err(Error::Shape(alloc::format!(
            "input graph has {} nodes, label graph {n}",
            tape.shape(features)[0]
        )));
    }
    let cfg = &model.config;
    if tape.shape(nodes) != [n, cfg.num_objects] || tape.shape(edges) != [n, n, cfg.num_predicates] {
        return Err(Error::Shape(alloc::format!(
            "label graph {:?} / {:?} for d={} d'={}",
            tape.shape(nodes),
            tape.shape(edges),
            cfg.num_objects,
            cfg.num_predicates
        )));
    }
    let mask = tape.constant(off_diagonal_mask(n))?;
    let (hn, he) = egnn_forward(tape, nodes, edges, mask, &model.egnn, b)?;
    let pooled_nodes = gated_pool_nodes(tape, hn, &model.pool_sg.node_gate, b)?;
    let edge_gate = model.pool_sg.edge_gate.as_ref().expect("label-graph pool has an edge gate");
    let pooled_edges = gated_pool_edges(tape, he, mask, edge_gate, b)?;
    let both = tape.concat(&[pooled_nodes, pooled_edges], 0)?;
    let combine = model.pool_sg.combine.as_ref().expect("label-graph pool has a combining layer");
    let sg_vec = combine.apply(tape, both, b)?;

    let gn = ggnn_forward(tape, features, &model.ggnn, b)?;
    let ig_vec = gated_pool_nodes(tape, gn, &model.pool_ig.node_gate, b)?;

    let x = tape.concat(&[sg_vec, ig_vec], 0)?;
    let h1 = model.head.l1.apply(tape, x, b)?;
    let h1 = tape.tanh(h1)?;
    let h2 = model.head.l2.apply(tape, h1, b)?;
    let h2 = tape.tanh(h2)?;
    let e = model.head.out.apply(tape, h2, b)?;
    if !tape.value(e).is_finite() {
        return Err(Error::NonFinite("energy".into()));
    }
    Ok(e)
}

/// Energy value and gradient for every parameter tensor, in store order.
pub fn energy_param_grads(model: &EnergyModel, ig: &ImageGraph, sg: &SceneGraphState) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape, true)?;
    let feats = tape.constant(ig.features.clone())?;
    let nodes = tape.constant(sg.nodes.clone())?;
    let edges = tape.constant(sg.edges.clone())?;
    let e = energy_forward(&mut tape, feats, nodes, edges, model, &b)?;
    let value = tape.value(e).data()[0];
    let grads = tape.backward(e)?;
    let out = model
        .store
        .iter()
        .map(|(id, entry)| grads.get_or_zeros(b[id], entry.value.shape()))
        .collect();
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{permute_nodes, GtLabels, one_hot, Edge, LabelSpace};
    use rand::Rng as _;

    fn model(h: usize, seed: u64) -> EnergyModel {
        let mut cfg = EnergyConfig::new(4, 3, 5);
        cfg.hidden = h;
        EnergyModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn single_node_zero_gate_pool_is_half() {
        let mut store = ParamStore::new();
        let gate = Gate { w: store.zeros("w", &[3, 1]), b: store.zeros("b", &[1]) };
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false).unwrap();
        let s = tape.constant(Tensor::matrix(1, 3, alloc::vec![2.0, -4.0, 1.0]).unwrap()).unwrap();
        let pooled = gated_pool_nodes(&mut tape, s, &gate, &b).unwrap();
        assert_eq!(tape.value(pooled).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn two_node_pool_hand_computed() {
        let mut store = ParamStore::new();
        let gate = Gate {
            w: store.push("w", Tensor::matrix(2, 1, alloc::vec![1.0, -1.0]).unwrap()),
            b: store.push("b", Tensor::vector(alloc::vec![0.5])),
        };
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false).unwrap();
        let s = tape.constant(Tensor::matrix(2, 2, alloc::vec![1.0, 2.0, 3.0, 0.0]).unwrap()).unwrap();
        let pooled = gated_pool_nodes(&mut tape, s, &gate, &b).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + libm::exp(-x));
        // gate of node 0: sigmoid(1 - 2 + 0.5); node 1: sigmoid(3 + 0.5)
        let (g0, g1) = (sig(-0.5), sig(3.5));
        let expect = [g0 * 1.0 + g1 * 3.0, g0 * 2.0];
        for (a, e) in tape.value(pooled).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        // permuting nodes leaves the pooled vector unchanged
        let mut tape2 = Tape::new();
        let b2 = store.bind(&mut tape2, false).unwrap();
        let s2 = tape2.constant(Tensor::matrix(2, 2, alloc::vec![3.0, 0.0, 1.0, 2.0]).unwrap()).unwrap();
        let pooled2 = gated_pool_nodes(&mut tape2, s2, &gate, &b2).unwrap();
        assert!(tape2.value(pooled2).max_abs_diff(tape.value(pooled)) < 1e-15);
    }

    #[test]
    fn edge_pool_cases() {
        let mut store = ParamStore::new();
        let gate = Gate {
            w: store.push("w", Tensor::matrix(2, 1, alloc::vec![0.7, -0.3]).unwrap()),
            b: store.push("b", Tensor::vector(alloc::vec![0.1])),
        };
        let run = |edges: Tensor| {
            let n = edges.shape()[0];
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false).unwrap();
            let mask = tape.constant(off_diagonal_mask(n)).unwrap();
            let e = tape.constant(edges).unwrap();
            let pooled = gated_pool_edges(&mut tape, e, mask, &gate, &b).unwrap();
            tape.value(pooled).clone()
        };
        assert_eq!(run(Tensor::filled(&[1, 1, 2], 3.0)).data(), &[0.0, 0.0]);
        assert_eq!(run(Tensor::zeros(&[3, 3, 2])).data(), &[0.0, 0.0]);

        let e01 = [0.4, -1.2];
        let e10 = [2.0, 0.5];
        let mut edges = Tensor::zeros(&[2, 2, 2]);
        edges.set(&[0, 0, 0], 9.0); // diagonal must be ignored
        for k in 0..2 {
            edges.set(&[0, 1, k], e01[k]);
            edges.set(&[1, 0, k], e10[k]);
        }
        let got = run(edges);
        let sig = |x: f64| 1.0 / (1.0 + libm::exp(-x));
        let g01 = sig(0.7 * e01[0] - 0.3 * e01[1] + 0.1);
        let g10 = sig(0.7 * e10[0] - 0.3 * e10[1] + 0.1);
        for k in 0..2 {
            assert!((got.data()[k] - (g01 * e01[k] + g10 * e10[k])).abs() < 1e-15);
        }
    }

    fn random_pair(n: usize, rng: &mut Rng) -> (ImageGraph, SceneGraphState) {
        let mut f = Tensor::zeros(&[n, 5]);
        f.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut o = Tensor::zeros(&[n, 4]);
        o.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let mut r = Tensor::zeros(&[n, n, 3]);
        r.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let mut sg = SceneGraphState::new(o, r).unwrap();
        sg.zero_diagonal();
        (ImageGraph::new(f).unwrap(), sg)
    }

    #[test]
    fn energy_deterministic_and_permutation_invariant() {
        let m = model(8, 3);
        let mut rng = stream(4, &[]);
        let (ig, sg) = random_pair(4, &mut rng);
        let e = m.energy(&ig, &sg).unwrap();
        assert_eq!(e.to_bits(), m.energy(&ig, &sg).unwrap().to_bits());
        let (psg, pig) = permute_nodes(&sg, &ig, &[3, 1, 0, 2]).unwrap();
        assert!((m.energy(&pig, &psg).unwrap() - e).abs() <= 1e-9);
    }

    #[test]
    fn energy_rejects_mismatched_graphs() {
        let m = model(4, 3);
        let mut rng = stream(5, &[]);
        let (ig, _) = random_pair(3, &mut rng);
        let (_, sg) = random_pair(2, &mut rng);
        assert!(matches!(m.energy(&ig, &sg), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_state_gradients_match_finite_differences() {
        let m = model(6, 7);
        let mut rng = stream(8, &[]);
        for n in 2..=4 {
            let (ig, sg) = random_pair(n, &mut rng);
            let (_, gn, ge) = m.energy_with_state_grads(&ig, &sg).unwrap();
            let num_n = crate::autodiff::central_difference(
                |x| m.energy(&ig, &SceneGraphState { nodes: x.clone(), edges: sg.edges.clone() }),
                &sg.nodes,
                1e-5,
            )
            .unwrap();
            let num_e = crate::autodiff::central_difference(
                |x| m.energy(&ig, &SceneGraphState { nodes: sg.nodes.clone(), edges: x.clone() }),
                &sg.edges,
                1e-5,
            )
            .unwrap();
            assert!(crate::autodiff::max_relative_error(&gn, &num_n) < 1e-4);
            assert!(crate::autodiff::max_relative_error(&ge, &num_e) < 1e-4);
        }
    }

    #[test]
    fn energy_responds_to_edge_labels() {
        let ls = LabelSpace::synthetic(4, 3).unwrap();
        let mut changed = 0;
        for trial in 0..100u64 {
            let m = model(4, 1000 + trial);
            let mut rng = stream(trial, &[]);
            let (ig, _) = random_pair(3, &mut rng);
            let labels = GtLabels { nodes: alloc::vec![0, 1, 2], edges: alloc::vec![Edge { subject: 0, object: 1, predicate: 1 }] };
            let mut flipped = labels.clone();
            flipped.edges[0].predicate = 2;
            let a = m.energy(&ig, &one_hot(&labels, &ls).unwrap()).unwrap();
            let b = m.energy(&ig, &one_hot(&flipped, &ls).unwrap()).unwrap();
            if a != b {
                changed += 1;
            }
        }
        assert!(changed >= 99);
    }
}
