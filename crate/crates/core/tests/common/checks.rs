//! Property checks shared with the acceptance suite.

use ebsg_core::autodiff::{central_difference, max_relative_error, relative_error, Tape};
use ebsg_core::egnn::egnn_forward;
use ebsg_core::energy::{energy_param_grads, EnergyConfig, EnergyModel};
use ebsg_core::graph::{off_diagonal_mask, permute_nodes, permute_pairs, permute_rows, ImageGraph, SceneGraphState};
use ebsg_core::params::ParamId;
use ebsg_core::rng::Rng;
use ebsg_core::sampler::{sgld_run, SgldConfig};
use ebsg_core::Tensor;
use rand::Rng as _;

use super::{image, permutation, state};

pub const FD_STEP: f64 = 1e-5;

pub fn model(d: usize, dp: usize, f: usize, hidden: usize, seed: u64) -> EnergyModel {
    EnergyModel::new(EnergyConfig { hidden, ..EnergyConfig::new(d, dp, f) }, seed).unwrap()
}

/// Largest relative error of the analytic energy gradient against central
/// differences over the node scores, edge scores and every parameter.
pub fn energy_gradient_error(m: &EnergyModel, ig: &ImageGraph, sg: &SceneGraphState) -> f64 {
    let (_, gn, ge) = m.energy_with_state_grads(ig, sg).unwrap();
    let num_n = central_difference(
        |x| m.energy(ig, &SceneGraphState { nodes: x.clone(), edges: sg.edges.clone() }),
        &sg.nodes,
        FD_STEP,
    )
    .unwrap();
    let num_e = central_difference(
        |x| m.energy(ig, &SceneGraphState { nodes: sg.nodes.clone(), edges: x.clone() }),
        &sg.edges,
        FD_STEP,
    )
    .unwrap();
    let mut worst = max_relative_error(&gn, &num_n).max(max_relative_error(&ge, &num_e));

    let (_, grads) = energy_param_grads(m, ig, sg).unwrap();
    let mut probe = m.clone();
    for (i, g) in grads.iter().enumerate() {
        let id = ParamId(i);
        let at: Tensor = m.store.get(id).clone();
        let numeric = central_difference(
            |x| {
                *probe.store.get_mut(id) = x.clone();
                probe.energy(ig, sg)
            },
            &at,
            FD_STEP,
        )
        .unwrap();
        *probe.store.get_mut(id) = at;
        worst = worst.max(max_relative_error(g, &numeric));
    }
    worst
}

/// Gradient error over every node and edge score, plus, for every parameter
/// tensor, `directions` random directional derivatives and up to `entries`
/// randomly chosen coordinates.
pub fn energy_gradient_error_per_tensor(
    m: &EnergyModel,
    ig: &ImageGraph,
    sg: &SceneGraphState,
    directions: usize,
    entries: usize,
    rng: &mut Rng,
) -> f64 {
    let (_, gn, ge) = m.energy_with_state_grads(ig, sg).unwrap();
    let num_n = central_difference(
        |x| m.energy(ig, &SceneGraphState { nodes: x.clone(), edges: sg.edges.clone() }),
        &sg.nodes,
        FD_STEP,
    )
    .unwrap();
    let num_e = central_difference(
        |x| m.energy(ig, &SceneGraphState { nodes: sg.nodes.clone(), edges: x.clone() }),
        &sg.edges,
        FD_STEP,
    )
    .unwrap();
    let mut worst = max_relative_error(&gn, &num_n).max(max_relative_error(&ge, &num_e));

    let (_, grads) = energy_param_grads(m, ig, sg).unwrap();
    let mut probe = m.clone();
    for (i, g) in grads.iter().enumerate() {
        let id = ParamId(i);
        let at: Tensor = m.store.get(id).clone();
        let mut eval = |x: Tensor| {
            *probe.store.get_mut(id) = x;
            probe.energy(ig, sg).unwrap()
        };
        for _ in 0..directions {
            let v = super::uniform(at.shape(), -1.0, 1.0, rng);
            let shifted = |sign: f64| {
                let mut x = at.clone();
                x.data_mut().iter_mut().zip(v.data()).for_each(|(a, d)| *a += sign * FD_STEP * d);
                x
            };
            let numeric = (eval(shifted(1.0)) - eval(shifted(-1.0))) / (2.0 * FD_STEP);
            let analytic: f64 = g.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            worst = worst.max(relative_error(analytic, numeric));
        }
        for _ in 0..entries.min(at.len()) {
            let k = rng.random_range(0..at.len());
            let shifted = |delta: f64| {
                let mut x = at.clone();
                x.data_mut()[k] += delta;
                x
            };
            let numeric = (eval(shifted(FD_STEP)) - eval(shifted(-FD_STEP))) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g.data()[k], numeric));
        }
        *probe.store.get_mut(id) = at;
    }
    worst
}

/// `|E(pi sg, pi ig) - E(sg, ig)|` for a random permutation.
pub fn permutation_gap(m: &EnergyModel, ig: &ImageGraph, sg: &SceneGraphState, rng: &mut Rng) -> f64 {
    let perm = permutation(sg.n(), rng);
    let (psg, pig) = permute_nodes(sg, ig, &perm).unwrap();
    (m.energy(&pig, &psg).unwrap() - m.energy(ig, sg).unwrap()).abs()
}

/// Zero-noise, small-step, unprojected run of `tau` steps from a random
/// state; true when every step is non-increasing within `1e-8`.
pub fn descends(m: &EnergyModel, n: usize, tau: usize, rng: &mut Rng) -> bool {
    let c = &m.config;
    let ig = image(n, c.feature_width, rng);
    let sg = state(n, c.num_objects, c.num_predicates, rng);
    let cfg = SgldConfig { tau, step_lambda: 1e-3, noise_scale: 0.0, project: false, ..SgldConfig::default() };
    let traj = sgld_run(m, &ig, &sg, &cfg, &mut *rng).unwrap();
    traj.energies.windows(2).all(|w| w[1] <= w[0] + 1e-8)
}

pub fn random_n(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Largest entry of `|egnn(pi x) - pi egnn(x)|` over node and edge outputs.
pub fn egnn_equivariance_gap(m: &EnergyModel, sg: &SceneGraphState, rng: &mut Rng) -> f64 {
    let n = sg.n();
    let perm = permutation(n, rng);
    let run = |nodes: Tensor, edges: Tensor| {
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let nv = tape.constant(nodes).unwrap();
        let ev = tape.constant(edges).unwrap();
        let mask = tape.constant(off_diagonal_mask(n)).unwrap();
        let (hn, he) = egnn_forward(&mut tape, nv, ev, mask, &m.egnn, &b).unwrap();
        (tape.value(hn).clone(), tape.value(he).clone())
    };
    let (hn, he) = run(sg.nodes.clone(), sg.edges.clone());
    let (pn, pe) = run(permute_rows(&sg.nodes, &perm).unwrap(), permute_pairs(&sg.edges, &perm).unwrap());
    pn.max_abs_diff(&permute_rows(&hn, &perm).unwrap()).max(pe.max_abs_diff(&permute_pairs(&he, &perm).unwrap()))
}
