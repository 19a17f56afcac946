#![allow(dead_code)]

pub mod metric_oracle;

use ebsg_core::graph::{Edge, GtLabels, ImageGraph, SceneGraphState, SceneRecord};
use ebsg_core::rng::Rng;
use ebsg_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    t
}

pub fn image(n: usize, f: usize, rng: &mut Rng) -> ImageGraph {
    ImageGraph::new(uniform(&[n, f], -1.0, 1.0, rng)).unwrap()
}

/// Random scores in `[0, 1]` with a zero diagonal.
pub fn state(n: usize, d: usize, dp: usize, rng: &mut Rng) -> SceneGraphState {
    let mut sg = SceneGraphState::new(uniform(&[n, d], 0.0, 1.0, rng), uniform(&[n, n, dp], 0.0, 1.0, rng)).unwrap();
    sg.zero_diagonal();
    sg
}

pub fn labels(n: usize, d: usize, dp: usize, density: f64, rng: &mut Rng) -> GtLabels {
    let nodes = (0..n).map(|_| rng.random_range(0..d)).collect();
    let mut edges = Vec::new();
    for s in 0..n {
        for o in 0..n {
            if s != o && rng.random_bool(density) {
                edges.push(Edge { subject: s, object: o, predicate: rng.random_range(1..dp) });
            }
        }
    }
    GtLabels { nodes, edges }
}

pub fn record(n: usize, d: usize, dp: usize, f: usize, rng: &mut Rng) -> SceneRecord {
    SceneRecord { image: image(n, f, rng), labels: labels(n, d, dp, 0.3, rng), scene_type: 0, seed: 0 }
}

pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub mod checks;
