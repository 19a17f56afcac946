//! Factorized predictor, losses, SGD and the per-epoch training loop.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::{energy_forward, EnergyConfig, EnergyModel};
use crate::error::{Error, Result};
use crate::graph::{argmax, off_diagonal_mask, one_hot_dims, GtLabels, ImageGraph, SceneGraphState, SceneRecord};
use crate::params::{Bound, NamedTensor, ParamId, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::sampler::{sgld_chain, SgldConfig};
use crate::tensor::Tensor;

const TAG_PREDICTOR: u64 = 0x5052;
const TAG_ENERGY: u64 = 0x454e;
const TAG_SHUFFLE: u64 = 0x5348;
const TAG_CHAIN: u64 = 0x4348;
const TAG_AUDIT: u64 = 0x4144;

/// Probability floor inside the value-level task loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ce,
    Ebm,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ce => "ce",
            Mode::Ebm => "ebm",
        }
    }
}

/// Predicate classification (object labels given) or scene graph
/// classification (object labels predicted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Predcls,
    Sgcls,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Predcls => "predcls",
            Setting::Sgcls => "sgcls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_r: f64,
    pub lambda_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_e: 1.0, lambda_r: 0.1, lambda_t: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_e, self.lambda_r, self.lambda_t];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidConfig("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// Per-node and per-pair linear classifier with an optional fixed
/// log-frequency prior on edge logits.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub store: ParamStore,
    pub node_w: ParamId,
    pub node_b: ParamId,
    pub edge_w: ParamId,
    pub edge_b: ParamId,
    /// `[d, d, d']`, indexed by (subject class, object class).
    pub frequency_bias: Option<Tensor>,
    pub num_objects: usize,
    pub num_predicates: usize,
    pub feature_width: usize,
}

/// Tape handles produced by [`Predictor::forward`].
#[derive(Debug, Clone, Copy)]
pub struct PredictorOutput {
    pub node_logits: Var,
    /// `O`: one-hot of the given labels, or softmax of the node logits.
    pub nodes: Var,
    pub edge_logits: Var,
    /// `R`: softmax of the edge logits with a zero diagonal.
    pub edges: Var,
}

impl Predictor {
    pub fn new(num_objects: usize, num_predicates: usize, feature_width: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[TAG_PREDICTOR]);
        let mut store = ParamStore::new();
        let f = feature_width;
        let node_w = store.uniform("predictor.node_w", &[f, num_objects], f, &mut rng);
        let node_b = store.zeros("predictor.node_b", &[num_objects]);
        let edge_w = store.uniform("predictor.edge_w", &[2 * f, num_predicates], 2 * f, &mut rng);
        let edge_b = store.zeros("predictor.edge_b", &[num_predicates]);
        Self {
            store,
            node_w,
            node_b,
            edge_w,
            edge_b,
            frequency_bias: None,
            num_objects,
            num_predicates,
            feature_width,
        }
    }

    pub fn with_frequency_bias(mut self, bias: Tensor) -> Result<Self> {
        let want = [self.num_objects, self.num_objects, self.num_predicates];
        if bias.shape() != want {
            return Err(Error::Shape(alloc::format!("frequency bias {:?}, expected {want:?}", bias.shape())));
        }
        self.frequency_bias = Some(bias);
        Ok(self)
    }

    fn pair_features(&self, ig: &ImageGraph) -> Result<Tensor> {
        let (n, f) = (ig.n(), ig.width());
        let mut data = Vec::with_capacity(n * n * 2 * f);
        for i in 0..n {
            for j in 0..n {
                data.extend_from_slice(ig.features.row(&[i]));
                data.extend_from_slice(ig.features.row(&[j]));
            }
        }
        Tensor::new(vec![n, n, 2 * f], data)
    }

    fn bias_for(&self, labels: &[usize]) -> Option<Tensor> {
        let table = self.frequency_bias.as_ref()?;
        let n = labels.len();
        let dp = self.num_predicates;
        let mut out = Tensor::zeros(&[n, n, dp]);
        for (i, &a) in labels.iter().enumerate() {
            for (j, &b) in labels.iter().enumerate() {
                if i != j {
                    let off = (i * n + j) * dp;
                    out.data_mut()[off..off + dp].copy_from_slice(table.row(&[a, b]));
                }
            }
        }
        Some(out)
    }

    /// Records the prediction on `tape`. With `given` labels, `O` is their
    /// one-hot encoding and the frequency prior is looked up with them;
    /// otherwise the prior uses the argmax of the predicted `O`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, ig: &ImageGraph, given: Option<&[usize]>) -> Result<PredictorOutput> {
        let n = ig.n();
        if ig.width() != self.feature_width {
            return Err(Error::Shape(alloc::format!("feature width {}, predictor expects {}", ig.width(), self.feature_width)));
        }
        let feats = tape.constant(ig.features.clone())?;
        let node_logits = tape.affine(feats, b[self.node_w], b[self.node_b])?;
        let (nodes, labels) = match given {
            Some(labels) => {
                if labels.len() != n {
                    return Err(Error::Shape(alloc::format!("{} labels for {n} nodes", labels.len())));
                }
                let gt = GtLabels { nodes: labels.to_vec(), edges: Vec::new() };
                let oh = one_hot_dims(&gt, self.num_objects, self.num_predicates)?;
                (tape.constant(oh.nodes)?, labels.to_vec())
            }
            None => {
                let o = tape.softmax(node_logits)?;
                let v = tape.value(o);
                let labels = (0..n).map(|i| argmax(v.row(&[i]))).collect::<Vec<_>>();
                (o, labels)
            }
        };
        let pairs = tape.constant(self.pair_features(ig)?)?;
        let mut edge_logits = tape.affine(pairs, b[self.edge_w], b[self.edge_b])?;
        if let Some(bias) = self.bias_for(&labels) {
            let bias = tape.constant(bias)?;
            edge_logits = tape.add(edge_logits, bias)?;
        }
        let probs = tape.softmax(edge_logits)?;
        let mask = tape.constant(off_diagonal_mask(n))?;
        let edges = tape.mul(probs, mask)?;
        Ok(PredictorOutput { node_logits, nodes, edge_logits, edges })
    }

    /// Value-level prediction `G_SG^0`.
    pub fn predict(&self, ig: &ImageGraph, given: Option<&[usize]>) -> Result<SceneGraphState> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &b, ig, given)?;
        SceneGraphState::new(tape.value(out.nodes).clone(), tape.value(out.edges).clone())
    }
}

/// `bias[a, b, p] = ln(count(a,b,p) + 1) - ln(sum_p count(a,b,p) + d')`.
///
/// Every ordered pair of distinct nodes counts once: under its labeled
/// predicate, or under no-relation when unlabeled.
pub fn frequency_bias_from(records: &[SceneRecord], num_objects: usize, num_predicates: usize) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let (d, dp) = (num_objects, num_predicates);
    let mut counts = vec![0u64; d * d * dp];
    for r in records {
        let m = r.labels.predicate_matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                let (a, b) = (r.labels.nodes[i], r.labels.nodes[j]);
                if a >= d || b >= d || p >= dp {
                    return Err(Error::IndexOutOfRange { what: "label", index: a.max(b).max(p), bound: d.max(dp) });
                }
                counts[(a * d + b) * dp + p] += 1;
            }
        }
    }
    let mut out = Tensor::zeros(&[d, d, dp]);
    for pair in 0..d * d {
        let row = &counts[pair * dp..(pair + 1) * dp];
        let total: u64 = row.iter().sum();
        let denom = libm::log(total as f64 + dp as f64);
        for (p, &c) in row.iter().enumerate() {
            out.data_mut()[pair * dp + p] = libm::log(c as f64 + 1.0) - denom;
        }
    }
    Ok(out)
}

/// Mean negative log-probability of the true node classes plus the same
/// over off-diagonal pairs, with probabilities floored at [`PROB_FLOOR`].
pub fn task_loss(sg: &SceneGraphState, gt: &GtLabels) -> Result<f64> {
    let n = sg.n();
    if gt.n() != n {
        return Err(Error::Shape(alloc::format!("{} labels for {n} nodes", gt.n())));
    }
    let nll = |p: f64| -libm::log(p.max(PROB_FLOOR));
    let mut node = 0.0;
    for (i, &c) in gt.nodes.iter().enumerate() {
        node += nll(sg.nodes.get(&[i, c]));
    }
    node /= n as f64;
    let mut edge = 0.0;
    let m = gt.predicate_matrix();
    for (i, row) in m.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if i != j {
                edge += nll(sg.edges.get(&[i, j, p]));
            }
        }
    }
    if n > 1 {
        edge /= (n * (n - 1)) as f64;
    }
    Ok(node + edge)
}

pub fn energy_loss(e_plus: f64, e_min: f64) -> Result<f64> {
    if !(e_plus.is_finite() && e_min.is_finite()) {
        return Err(Error::NonFinite("energy".into()));
    }
    Ok(e_plus - e_min)
}

pub fn regularization_loss(e_plus: f64, e_min: f64) -> f64 {
    e_plus * e_plus + e_min * e_min
}

/// `w <- w - lr * g` for every tensor. Checks all gradients first; on a
/// non-finite entry nothing is updated and the parameter is named.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape(alloc::format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape(alloc::format!("gradient for {}", store.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).into()));
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        for (w, d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub setting: Setting,
    pub weights: LossWeights,
    pub sgld: SgldConfig,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub rounds: usize,
    pub alpha: f64,
    pub frequency_bias: bool,
    /// Finite-difference check of the first update's gradients.
    pub fd_audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ebm,
            setting: Setting::Predcls,
            weights: LossWeights::default(),
            sgld: SgldConfig { noise_scale: 0.01, ..SgldConfig::default() },
            lr: 1e-2,
            epochs: 10,
            seed: 0,
            hidden: 64,
            rounds: 3,
            alpha: 0.5,
            frequency_bias: true,
            fd_audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sgld.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(alloc::format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub predictor: Predictor,
    pub energy: EnergyModel,
    /// Completed epochs.
    pub epoch: usize,
    /// Applied SGD steps.
    pub step: u64,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainState {
    /// Fresh parameters for the given dimensions.
    pub fn init(
        cfg: &TrainConfig,
        num_objects: usize,
        num_predicates: usize,
        feature_width: usize,
        frequency_bias: Option<Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut predictor = Predictor::new(num_objects, num_predicates, feature_width, derive_seed(cfg.seed, &[TAG_PREDICTOR]));
        if let Some(bias) = frequency_bias {
            predictor = predictor.with_frequency_bias(bias)?;
        }
        let ecfg = EnergyConfig {
            num_objects,
            num_predicates,
            feature_width,
            hidden: cfg.hidden,
            rounds: cfg.rounds,
            alpha: cfg.alpha,
        };
        let energy = EnergyModel::new(ecfg, derive_seed(cfg.seed, &[TAG_ENERGY]))?;
        Ok(Self { predictor, energy, epoch: 0, step: 0, seed: cfg.seed, mode: cfg.mode })
    }

    /// [`TrainState::init`] with the frequency prior counted from `train`
    /// when the config enables it.
    pub fn init_from_data(
        cfg: &TrainConfig,
        num_objects: usize,
        num_predicates: usize,
        feature_width: usize,
        train: &[SceneRecord],
    ) -> Result<Self> {
        let bias = if cfg.frequency_bias {
            Some(frequency_bias_from(train, num_objects, num_predicates)?)
        } else {
            None
        };
        Self::init(cfg, num_objects, num_predicates, feature_width, bias)
    }

    /// Every trainable tensor, predictor first.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = self.predictor.store.entries().to_vec();
        out.extend_from_slice(self.energy.store.entries());
        out
    }

    /// Loads tensors produced by [`TrainState::named_tensors`].
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let np = self.predictor.store.len();
        if tensors.len() != np + self.energy.store.len() {
            return Err(Error::Shape(alloc::format!("checkpoint holds {} tensors", tensors.len())));
        }
        self.predictor.store.load(&tensors[..np])?;
        self.energy.store.load(&tensors[np..])
    }
}

/// Loss terms of one record. Energy terms are zero in ce mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_e: f64,
    pub l_r: f64,
    pub l_t: f64,
    pub total: f64,
    pub e_plus: f64,
    pub e_min: f64,
}

struct Recorded {
    tape: Tape,
    total: Var,
    losses: Losses,
    pred: Bound,
    energy: Option<Bound>,
}

fn record_losses(
    state: &TrainState,
    cfg: &TrainConfig,
    record: &SceneRecord,
    rng: &mut crate::rng::Rng,
) -> Result<Recorded> {
    let labels = &record.labels;
    let ig = &record.image;
    let mut tape = Tape::new();
    let pred = state.predictor.store.bind(&mut tape, true)?;
    let given = match cfg.setting {
        Setting::Predcls => Some(labels.nodes.as_slice()),
        Setting::Sgcls => None,
    };
    let out = state.predictor.forward(&mut tape, &pred, ig, given)?;

    let edge_ce = tape.softmax_cross_entropy(out.edge_logits, labels.edge_targets())?;
    let l_t = match cfg.setting {
        Setting::Predcls => edge_ce,
        Setting::Sgcls => {
            let node_ce = tape.softmax_cross_entropy(out.node_logits, labels.node_targets())?;
            tape.add(node_ce, edge_ce)?
        }
    };
    let weighted_t = tape.scale(l_t, cfg.weights.lambda_t)?;
    let mut losses = Losses { l_t: tape.value(l_t).data()[0], ..Losses::default() };

    if cfg.mode == Mode::Ce {
        let total = weighted_t;
        losses.total = tape.value(total).data()[0];
        return Ok(Recorded { tape, total, losses, pred, energy: None });
    }

    let model = &state.energy;
    let eb = model.store.bind(&mut tape, true)?;
    let (_, fo, fr) = sgld_chain(&mut tape, model, ig, out.nodes, out.edges, &cfg.sgld, rng)?;
    let gt = one_hot_dims(labels, model.config.num_objects, model.config.num_predicates)?;
    let feats = tape.constant(ig.features.clone())?;
    let go = tape.constant(gt.nodes)?;
    let ge = tape.constant(gt.edges)?;
    let e_plus = energy_forward(&mut tape, feats, go, ge, model, &eb)?;
    let e_min = energy_forward(&mut tape, feats, fo, fr, model, &eb)?;
    let l_e = tape.sub(e_plus, e_min)?;
    let sq_plus = tape.mul(e_plus, e_plus)?;
    let sq_min = tape.mul(e_min, e_min)?;
    let l_r = tape.add(sq_plus, sq_min)?;
    let weighted_e = tape.scale(l_e, cfg.weights.lambda_e)?;
    let weighted_r = tape.scale(l_r, cfg.weights.lambda_r)?;
    let total = tape.add(weighted_e, weighted_r)?;
    let total = tape.add(total, weighted_t)?;

    losses.e_plus = tape.value(e_plus).data()[0];
    losses.e_min = tape.value(e_min).data()[0];
    losses.l_e = tape.value(l_e).data()[0];
    losses.l_r = tape.value(l_r).data()[0];
    losses.total = tape.value(total).data()[0];
    Ok(Recorded { tape, total, losses, pred, energy: Some(eb) })
}

/// Chain randomness for the record at `position` of `epoch`.
pub fn chain_rng(seed: u64, epoch: usize, position: usize) -> crate::rng::Rng {
    stream(seed, &[TAG_CHAIN, epoch as u64, position as u64])
}

/// Loss terms without updating anything.
pub fn evaluate_losses(
    state: &TrainState,
    cfg: &TrainConfig,
    record: &SceneRecord,
    rng: &mut crate::rng::Rng,
) -> Result<Losses> {
    Ok(record_losses(state, cfg, record, rng)?.losses)
}

/// Gradients of one record's total loss.
#[derive(Debug, Clone)]
pub struct RecordGradients {
    pub losses: Losses,
    pub predictor: Vec<Tensor>,
    /// `None` in ce mode.
    pub energy: Option<Vec<Tensor>>,
    /// Worst relative error of the finite-difference audit, when run.
    pub audit: Option<f64>,
}

pub fn record_gradients(
    state: &TrainState,
    cfg: &TrainConfig,
    record: &SceneRecord,
    rng: &mut crate::rng::Rng,
    audit: Option<u64>,
) -> Result<RecordGradients> {
    let Recorded { mut tape, total, losses, pred, energy } = record_losses(state, cfg, record, rng)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let grads = tape.backward(total)?;
    let collect = |store: &ParamStore, b: &Bound| -> Vec<Tensor> {
        store.iter().map(|(id, e)| grads.get_or_zeros(b[id], e.value.shape())).collect()
    };
    let predictor = collect(&state.predictor.store, &pred);
    let energy_grads = energy.as_ref().map(|eb| collect(&state.energy.store, eb));

    let audit = match audit {
        None => None,
        Some(audit_seed) => {
            let mut leaves: Vec<(Var, Tensor, Tensor)> = Vec::new();
            for (id, e) in state.predictor.store.iter() {
                leaves.push((pred[id], e.value.clone(), predictor[id.0].clone()));
            }
            if let (Some(eb), Some(eg)) = (&energy, &energy_grads) {
                for (id, e) in state.energy.store.iter() {
                    leaves.push((eb[id], e.value.clone(), eg[id.0].clone()));
                }
            }
            Some(fd_audit(&tape, total, &leaves, audit_seed)?)
        }
    };
    Ok(RecordGradients { losses, predictor, energy: energy_grads, audit })
}

/// Central differences on about 1% of coordinates (at least one per
/// tensor), replaying the recorded computation with perturbed leaves.
fn fd_audit(tape: &Tape, total: Var, leaves: &[(Var, Tensor, Tensor)], seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let mut rng = stream(seed, &[TAG_AUDIT]);
    let mut worst: f64 = 0.0;
    for (var, value, grad) in leaves {
        let picks = (value.len() / 100).max(1);
        for _ in 0..picks {
            let k = rng.random_range(0..value.len());
            let eval = |delta: f64| -> Result<f64> {
                let mut v = value.clone();
                v.data_mut()[k] += delta;
                Ok(tape.replay(&[(*var, v)])?.value(total).data()[0])
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let analytic = grad.data()[k];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Epochs completed, this one included.
    pub epoch: usize,
    pub mode: Mode,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    pub total: f64,
    /// Largest `|E|` seen during the epoch; `None` in ce mode.
    pub max_abs_energy: Option<f64>,
    pub fd_audit_max_rel_error: Option<f64>,
}

/// Record order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch as u64]));
    order
}

/// One pass over `records` with per-record updates. On divergence the
/// state is left as it was before the failing record.
pub fn train_epoch(state: &mut TrainState, cfg: &TrainConfig, records: &[SceneRecord]) -> Result<EpochReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if state.mode != cfg.mode {
        return Err(Error::InvalidConfig(alloc::format!(
            "state was trained in {} mode, config asks for {}",
            state.mode.as_str(),
            cfg.mode.as_str()
        )));
    }
    let epoch = state.epoch;
    let mut sums = Losses::default();
    let mut max_abs: f64 = 0.0;
    let mut audit_result = None;
    for (pos, &idx) in epoch_order(state.seed, epoch, records.len()).iter().enumerate() {
        let mut rng = chain_rng(state.seed, epoch, pos);
        let audit = (cfg.fd_audit && state.step == 0).then(|| derive_seed(state.seed, &[epoch as u64, pos as u64]));
        let diverged = |detail: String| Error::Diverged { epoch, position: pos, detail };
        let g = match record_gradients(state, cfg, &records[idx], &mut rng, audit) {
            Ok(g) => g,
            Err(e @ (Error::NonFinite(_) | Error::NonFiniteGradient(_))) => return Err(diverged(alloc::format!("{e}"))),
            Err(e) => return Err(e),
        };
        if let Some(a) = g.audit {
            audit_result = Some(a);
        }
        let mut next_pred = state.predictor.store.clone();
        sgd_step(&mut next_pred, &g.predictor, cfg.lr).map_err(|e| diverged(alloc::format!("{e}")))?;
        if let Some(eg) = &g.energy {
            let mut next_energy = state.energy.store.clone();
            sgd_step(&mut next_energy, eg, cfg.lr).map_err(|e| diverged(alloc::format!("{e}")))?;
            state.energy.store = next_energy;
        }
        state.predictor.store = next_pred;
        state.step += 1;

        let l = g.losses;
        sums.l_e += l.l_e;
        sums.l_r += l.l_r;
        sums.l_t += l.l_t;
        sums.total += l.total;
        max_abs = max_abs.max(l.e_plus.abs()).max(l.e_min.abs());
    }
    state.epoch += 1;
    let count = records.len() as f64;
    Ok(EpochReport {
        epoch: epoch + 1,
        mode: cfg.mode,
        l_e: sums.l_e / count,
        l_r: sums.l_r / count,
        l_t: sums.l_t / count,
        total: sums.total / count,
        max_abs_energy: (cfg.mode == Mode::Ebm).then_some(max_abs),
        fd_audit_max_rel_error: audit_result,
    })
}

/// Runs the remaining epochs up to `cfg.epochs`, calling `after_epoch`
/// once per completed epoch (for checkpoints and validation).
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    records: &[SceneRecord],
    mut after_epoch: impl FnMut(&TrainState, &EpochReport) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::new();
    while state.epoch < cfg.epochs {
        let report = train_epoch(state, cfg, records)?;
        after_epoch(state, &report)?;
        reports.push(report);
    }
    Ok(reports)
}
