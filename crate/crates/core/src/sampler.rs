//! Langevin refinement of a predicted label graph under the energy model.

use alloc::vec::Vec;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::graph::{ImageGraph, SceneGraphState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldConfig {
    pub tau: usize,
    pub step_lambda: f64,
    pub clip: f64,
    pub noise_scale: f64,
    pub project: bool,
    /// Keep the refined state connected to the initial state on the tape.
    pub record_gradients_through_chain: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            tau: 20,
            step_lambda: 1.0,
            clip: 0.01,
            noise_scale: 1.0,
            project: true,
            record_gradients_through_chain: true,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_lambda > 0.0 && self.step_lambda.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("step_lambda must be positive, got {}", self.step_lambda)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("noise_scale must be non-negative, got {}", self.noise_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldTrajectory {
    /// Energy of every iterate, the initial state included.
    pub energies: Vec<f64>,
    pub final_state: SceneGraphState,
}

/// Clamps every entry to `[0, 1]` and zeroes the diagonal of `R`.
pub fn project_unit_interval(sg: &SceneGraphState) -> SceneGraphState {
    let mut out = SceneGraphState { nodes: sg.nodes.map(clamp01), edges: sg.edges.map(clamp01) };
    out.zero_diagonal();
    out
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Draws `noise_scale * eps` with `eps ~ N(0, step_lambda)` for every entry.
pub fn sample_noise(shape: &[usize], cfg: &SgldConfig, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if cfg.noise_scale == 0.0 {
        return t;
    }
    let std = libm::sqrt(cfg.step_lambda);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = cfg.noise_scale * std * z;
    }
    t
}

/// Unprojected increment `-(lambda/2) clip(g) + noise`.
fn increment(grad: &Tensor, cfg: &SgldConfig, rng: &mut Rng, what: &str) -> Result<Tensor> {
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient(what.into()));
    }
    let noise = sample_noise(grad.shape(), cfg, rng);
    let half = cfg.step_lambda / 2.0;
    let mut inc = grad.map(|g| -half * g.clamp(-cfg.clip, cfg.clip));
    for (a, b) in inc.data_mut().iter_mut().zip(noise.data()) {
        *a += b;
    }
    Ok(inc)
}

/// Mask and fill such that `(x + inc) * mask + fill` is the next iterate.
fn pass_mask(y: &Tensor, project: bool, edge_n: Option<usize>) -> (Tensor, Tensor) {
    let mut mask = Tensor::filled(y.shape(), 1.0);
    let mut fill = Tensor::zeros(y.shape());
    if project {
        for (k, v) in y.data().iter().enumerate() {
            if *v < 0.0 {
                mask.data_mut()[k] = 0.0;
            } else if *v > 1.0 {
                mask.data_mut()[k] = 0.0;
                fill.data_mut()[k] = 1.0;
            }
        }
    }
    if let Some(n) = edge_n {
        let dp = y.shape()[2];
        for i in 0..n {
            let off = (i * n + i) * dp;
            mask.data_mut()[off..off + dp].iter_mut().for_each(|m| *m = 0.0);
            fill.data_mut()[off..off + dp].iter_mut().for_each(|m| *m = 0.0);
        }
    }
    (mask, fill)
}

fn advance(tape: &mut Tape, x: Var, inc: Tensor, project: bool, edge_n: Option<usize>) -> Result<Var> {
    let mut y = tape.value(x).clone();
    for (a, b) in y.data_mut().iter_mut().zip(inc.data()) {
        *a += b;
    }
    let (mask, fill) = pass_mask(&y, project, edge_n);
    let inc = tape.constant(inc)?;
    let mask = tape.constant(mask)?;
    let fill = tape.constant(fill)?;
    let y = tape.add(x, inc)?;
    let y = tape.mul(y, mask)?;
    tape.add(y, fill)
}

/// Runs `cfg.tau` steps on the tape starting from `(nodes, edges)`.
///
/// Langevin increments are recorded as constants, so derivatives of the
/// final state with respect to the initial one pass through the identity
/// and projection masks only. Returns the energy of each pre-step iterate
/// (`tau` values) and the final state.
pub fn sgld_chain(
    tape: &mut Tape,
    model: &EnergyModel,
    ig: &ImageGraph,
    nodes: Var,
    edges: Var,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Var, Var)> {
    cfg.validate()?;
    let n = tape.shape(nodes)[0];
    let (mut o, mut r) = if cfg.record_gradients_through_chain {
        (nodes, edges)
    } else {
        let o = tape.constant(tape.value(nodes).clone())?;
        let r = tape.constant(tape.value(edges).clone())?;
        (o, r)
    };
    let mut energies = Vec::with_capacity(cfg.tau);
    for _ in 0..cfg.tau {
        let state = SceneGraphState { nodes: tape.value(o).clone(), edges: tape.value(r).clone() };
        let (e, go, gr) = model.energy_with_state_grads(ig, &state)?;
        energies.push(e);
        let inc_o = increment(&go, cfg, rng, "node scores")?;
        let inc_r = increment(&gr, cfg, rng, "edge scores")?;
        o = advance(tape, o, inc_o, cfg.project, None)?;
        r = advance(tape, r, inc_r, cfg.project, Some(n))?;
    }
    Ok((energies, o, r))
}

/// One update of `sg`.
pub fn sgld_step(
    model: &EnergyModel,
    ig: &ImageGraph,
    sg: &SceneGraphState,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<SceneGraphState> {
    let one = SgldConfig { tau: 1, ..cfg.clone() };
    Ok(sgld_run(model, ig, sg, &one, rng)?.final_state)
}

pub fn sgld_run(
    model: &EnergyModel,
    ig: &ImageGraph,
    sg0: &SceneGraphState,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<SgldTrajectory> {
    sg0.check()?;
    let mut tape = Tape::new();
    let o = tape.constant(sg0.nodes.clone())?;
    let r = tape.constant(sg0.edges.clone())?;
    let (mut energies, o, r) = sgld_chain(&mut tape, model, ig, o, r, cfg, rng)?;
    let final_state = SceneGraphState { nodes: tape.value(o).clone(), edges: tape.value(r).clone() };
    energies.push(model.energy(ig, &final_state)?);
    Ok(SgldTrajectory { energies, final_state })
}

/// Single update with a caller-supplied gradient. Used to check the step
/// arithmetic without an energy model.
pub fn apply_update(
    sg: &SceneGraphState,
    grad_nodes: &Tensor,
    grad_edges: &Tensor,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<SceneGraphState> {
    cfg.validate()?;
    if grad_nodes.shape() != sg.nodes.shape() || grad_edges.shape() != sg.edges.shape() {
        return Err(Error::Shape("gradient shape differs from state".into()));
    }
    let mut tape = Tape::new();
    let o = tape.constant(sg.nodes.clone())?;
    let r = tape.constant(sg.edges.clone())?;
    let inc_o = increment(grad_nodes, cfg, rng, "node scores")?;
    let inc_r = increment(grad_edges, cfg, rng, "edge scores")?;
    let o = advance(&mut tape, o, inc_o, cfg.project, None)?;
    let r = advance(&mut tape, r, inc_r, cfg.project, Some(sg.n()))?;
    Ok(SceneGraphState { nodes: tape.value(o).clone(), edges: tape.value(r).clone() })
}
