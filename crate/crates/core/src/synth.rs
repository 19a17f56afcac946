//! Synthetic constrained relational scenes.
//!
//! Each scene draws a type, node classes from that type's class weights,
//! and relations whose predicates follow a Zipf law over `1..d'`. Subject
//! and object nodes are proposed by class affinity and rejected when they
//! break a rule (or, in the training split, form a held-out triplet).
//! Node features are a class embedding plus a scene-type offset plus
//! Gaussian noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate, Edge, GtLabels, ImageGraph, LabelSpace, Rule, SceneRecord, Triplet};
use crate::metrics::{census, TripletCensus};
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;

const TAG_WORLD: u64 = 0x574f;
const TAG_TRIAL: u64 = 0x5452;
/// Proposals of subject/object pairs per predicate draw.
const PAIR_PROPOSALS: usize = 50;
/// Predicate draws per relation.
const PREDICATE_DRAWS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472,
            Split::Val => 0x7661,
            Split::Test => 0x7465,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 2000, val: 300, test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_objects: usize,
    /// Includes no-relation.
    pub num_predicates: usize,
    pub feature_width: usize,
    pub n_range: [usize; 2],
    pub zipf_s: f64,
    pub feature_noise_sigma: f64,
    /// Standard deviation of the per-type feature offset.
    pub scene_offset_scale: f64,
    pub rules: Vec<Rule>,
    pub num_scene_types: usize,
    pub holdout_triplets: Vec<Triplet>,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let range = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
        Self {
            num_objects: 10,
            num_predicates: 7,
            feature_width: 16,
            n_range: [3, 6],
            zipf_s: 1.5,
            feature_noise_sigma: 0.75,
            scene_offset_scale: 0.5,
            rules: vec![
                Rule::MutualExclusion { predicates: vec![1, 2] },
                Rule::MutualExclusion { predicates: vec![3, 5] },
                Rule::TypeConstraint { predicate: 4, subjects: range(0, 5), objects: range(3, 9) },
                Rule::TypeConstraint { predicate: 5, subjects: range(2, 9), objects: range(0, 6) },
                Rule::TypeConstraint { predicate: 6, subjects: vec![0, 1, 2, 3, 6, 7, 8, 9], objects: vec![0, 1, 2, 4, 5, 7, 8, 9] },
            ],
            num_scene_types: 3,
            holdout_triplets: vec![
                Triplet { subject: 1, predicate: 3, object: 6 },
                Triplet { subject: 7, predicate: 2, object: 2 },
                Triplet { subject: 4, predicate: 4, object: 8 },
                Triplet { subject: 8, predicate: 6, object: 0 },
            ],
            counts: SplitCounts::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::synthetic(self.num_objects, self.num_predicates)
    }

    /// Target predicate marginal over `1..d'` (index 0 is no-relation, 0).
    pub fn zipf_targets(&self) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.num_predicates)
            .map(|p| if p == 0 { 0.0 } else { libm::pow(p as f64, -self.zipf_s) })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }

    /// Static checks: dimensions, rule indices, per-predicate
    /// realizability under the type constraints, and holdout admissibility.
    pub fn validate(&self) -> Result<()> {
        let ls = self.label_space()?;
        let [lo, hi] = self.n_range;
        if lo < 2 || lo > hi {
            return Err(Error::InvalidConfig(format!("n_range [{lo}, {hi}] must satisfy 2 <= min <= max")));
        }
        if self.feature_width == 0 || self.num_scene_types == 0 {
            return Err(Error::InvalidConfig("feature_width and num_scene_types must be positive".into()));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(Error::InvalidConfig(format!("zipf_s must be non-negative, got {}", self.zipf_s)));
        }
        if !(self.feature_noise_sigma.is_finite() && self.feature_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("feature_noise_sigma must be non-negative".into()));
        }
        if !(self.scene_offset_scale.is_finite() && self.scene_offset_scale >= 0.0) {
            return Err(Error::InvalidConfig("scene_offset_scale must be non-negative".into()));
        }
        if self.counts.train == 0 || self.counts.val == 0 || self.counts.test == 0 {
            return Err(Error::InvalidConfig("split counts must be positive".into()));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            rule.check(&ls).map_err(|e| Error::InvalidConfig(format!("rule #{i} ({}): {e}", rule.kind())))?;
        }
        for p in 1..self.num_predicates {
            let mut subjects: Vec<bool> = vec![true; self.num_objects];
            let mut objects: Vec<bool> = vec![true; self.num_objects];
            let mut involved: Vec<usize> = Vec::new();
            for (i, rule) in self.rules.iter().enumerate() {
                if let Rule::TypeConstraint { predicate, subjects: s, objects: o } = rule {
                    if *predicate == p {
                        involved.push(i);
                        subjects.iter_mut().enumerate().for_each(|(c, ok)| *ok &= s.contains(&c));
                        objects.iter_mut().enumerate().for_each(|(c, ok)| *ok &= o.contains(&c));
                    }
                }
            }
            if !subjects.contains(&true) || !objects.contains(&true) {
                let names: Vec<String> = involved.iter().map(|i| format!("#{i}")).collect();
                return Err(Error::InvalidConfig(format!(
                    "type_constraint rules {} leave predicate {p} with no admissible {}",
                    names.join(" and "),
                    if subjects.contains(&true) { "object class" } else { "subject class" }
                )));
            }
        }
        for h in &self.holdout_triplets {
            if h.subject >= self.num_objects || h.object >= self.num_objects || h.predicate == 0 || h.predicate >= self.num_predicates {
                return Err(Error::InvalidConfig(format!("holdout triplet {h:?} outside the label space")));
            }
            if let Some((i, r)) = self.rules.iter().enumerate().find(|(_, r)| !r.permits(h)) {
                return Err(Error::InvalidConfig(format!("holdout triplet {h:?} is forbidden by rule #{i} ({})", r.kind())));
            }
        }
        Ok(())
    }
}

/// Fixed random quantities shared by all scenes of one configuration.
#[derive(Debug, Clone)]
pub struct World {
    /// `[d, f]`
    pub class_embeddings: Tensor,
    /// `[types, f]`
    pub type_offsets: Tensor,
    pub class_weights: Vec<Vec<f64>>,
    /// Per-predicate subject and object class preferences.
    pub subject_affinity: Vec<Vec<f64>>,
    pub object_affinity: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = stream(cfg.seed, &[TAG_WORLD]);
        let (d, f) = (cfg.num_objects, cfg.feature_width);
        let mut emb = Tensor::zeros(&[d, f]);
        for v in emb.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut off = Tensor::zeros(&[cfg.num_scene_types, f]);
        for v in off.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = cfg.scene_offset_scale * z;
        }
        let mut table = |rows: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..d).map(|_| rng.random_range(0.1..1.0)).collect()).collect()
        };
        let class_weights = table(cfg.num_scene_types);
        let subject_affinity = table(cfg.num_predicates);
        let object_affinity = table(cfg.num_predicates);
        Self { class_embeddings: emb, type_offsets: off, class_weights, subject_affinity, object_affinity }
    }
}

/// Generated splits plus the training census.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
    pub census: TripletCensus,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub world: World,
    label_space: LabelSpace,
    zipf: WeightedIndex<f64>,
}

impl Generator {
    /// Validates `config` and samples 100 trial scenes.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let label_space = config.label_space()?;
        let world = World::new(&config);
        let targets = config.zipf_targets();
        let zipf = WeightedIndex::new(&targets[1..]).map_err(|e| Error::InvalidConfig(format!("predicate weights: {e}")))?;
        let generator = Self { config, world, label_space, zipf };
        let trial_seed = derive_seed(generator.config.seed, &[TAG_TRIAL]);
        for id in 0..100u64 {
            let mut rng = stream(trial_seed, &[id]);
            generator.sample_with(&mut rng, derive_seed(trial_seed, &[id]), true, None)?;
        }
        Ok(generator)
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    /// Seed of scene `id` in `split`; also stored on the record.
    pub fn scene_seed(&self, split: Split, id: usize) -> u64 {
        derive_seed(self.config.seed, &[split.tag(), id as u64])
    }

    /// Scene `id` of `split`. The first test scenes each contain one
    /// held-out triplet, in holdout order.
    pub fn sample_scene(&self, split: Split, id: usize) -> Result<SceneRecord> {
        let seed = self.scene_seed(split, id);
        let mut rng = stream(seed, &[]);
        let forced = match split {
            Split::Test => self.config.holdout_triplets.get(id).copied(),
            _ => None,
        };
        self.sample_with(&mut rng, seed, split == Split::Train, forced)
    }

    fn sample_with(&self, rng: &mut Rng, seed: u64, reject_holdout: bool, forced: Option<Triplet>) -> Result<SceneRecord> {
        let cfg = &self.config;
        let w = &self.world;
        let scene_type = rng.random_range(0..cfg.num_scene_types);
        let n = rng.random_range(cfg.n_range[0]..=cfg.n_range[1]);
        let class_dist = WeightedIndex::new(&w.class_weights[scene_type]).expect("positive class weights");
        let mut nodes: Vec<usize> = (0..n).map(|_| class_dist.sample(rng)).collect();
        let mut labels = GtLabels { nodes: Vec::new(), edges: Vec::new() };
        if let Some(h) = forced {
            nodes[0] = h.subject;
            nodes[1] = h.object;
            labels.edges.push(Edge { subject: 0, object: 1, predicate: h.predicate });
        }
        labels.nodes = nodes;

        let wanted = rng.random_range(1..=n);
        let mut taken = vec![false; n * n];
        for e in &labels.edges {
            taken[e.subject * n + e.object] = true;
        }
        'relations: while labels.edges.len() < wanted {
            for _ in 0..PREDICATE_DRAWS {
                let p = 1 + self.zipf.sample(rng);
                let mut weights = vec![0.0; n * n];
                for s in 0..n {
                    for o in 0..n {
                        if s != o && !taken[s * n + o] {
                            weights[s * n + o] =
                                w.subject_affinity[p][labels.nodes[s]] * w.object_affinity[p][labels.nodes[o]];
                        }
                    }
                }
                let Ok(pairs) = WeightedIndex::new(&weights) else { break 'relations };
                for _ in 0..PAIR_PROPOSALS {
                    let k = pairs.sample(rng);
                    let edge = Edge { subject: k / n, object: k % n, predicate: p };
                    if self.admissible(&labels, edge, reject_holdout) {
                        labels.edges.push(edge);
                        taken[k] = true;
                        continue 'relations;
                    }
                }
                // Redrawing the predicate would skew the marginal towards
                // easy predicates, so a scene that already has relations
                // stops here instead.
                if !labels.edges.is_empty() {
                    break 'relations;
                }
            }
            break;
        }
        if labels.edges.is_empty() {
            return Err(Error::RejectionBudget(format!(
                "no admissible relation after {} proposals in a scene with classes {:?}",
                PREDICATE_DRAWS * PAIR_PROPOSALS,
                labels.nodes
            )));
        }
        labels.edges.sort();

        let f = cfg.feature_width;
        let mut feats = Tensor::zeros(&[n, f]);
        for (i, &c) in labels.nodes.iter().enumerate() {
            let emb = w.class_embeddings.row(&[c]);
            let off = w.type_offsets.row(&[scene_type]);
            for k in 0..f {
                let z: f64 = StandardNormal.sample(rng);
                feats.data_mut()[i * f + k] = emb[k] + off[k] + cfg.feature_noise_sigma * z;
            }
        }
        let record = SceneRecord { image: ImageGraph::new(feats)?, labels, scene_type, seed };
        let problems = validate(&record, &self.label_space, &cfg.rules);
        if let Some(v) = problems.first() {
            return Err(Error::InvalidConfig(format!("generated scene fails validation: {v:?}")));
        }
        Ok(record)
    }

    fn admissible(&self, labels: &GtLabels, edge: Edge, reject_holdout: bool) -> bool {
        let t = Triplet { subject: labels.nodes[edge.subject], predicate: edge.predicate, object: labels.nodes[edge.object] };
        if reject_holdout && self.config.holdout_triplets.contains(&t) {
            return false;
        }
        for rule in &self.config.rules {
            match rule {
                Rule::TypeConstraint { .. } => {
                    if !rule.permits(&t) {
                        return false;
                    }
                }
                Rule::MutualExclusion { predicates } => {
                    if predicates.contains(&edge.predicate)
                        && labels.edges.iter().any(|e| e.subject == edge.subject && predicates.contains(&e.predicate))
                    {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn generate_split(&self, split: Split) -> Result<Vec<SceneRecord>> {
        (0..self.config.counts.get(split)).map(|id| self.sample_scene(split, id)).collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.config.counts.test < self.config.holdout_triplets.len() {
            return Err(Error::InvalidConfig(format!(
                "test split of {} scenes cannot hold {} held-out triplets",
                self.config.counts.test,
                self.config.holdout_triplets.len()
            )));
        }
        let train = self.generate_split(Split::Train)?;
        let val = self.generate_split(Split::Val)?;
        let test = self.generate_split(Split::Test)?;
        let census = census(train.iter().map(|r| &r.labels));
        Ok(Dataset { train, val, test, census })
    }
}

/// Predicate frequencies (index 0 unused) over a set of scenes.
pub fn predicate_frequencies(records: &[SceneRecord], num_predicates: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_predicates];
    for r in records {
        for e in &r.labels.edges {
            counts[e.predicate] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Nearest-class-mean classifier fitted on `train`, accuracy on `test`.
pub fn linear_probe_accuracy(train: &[SceneRecord], test: &[SceneRecord], num_objects: usize) -> Result<f64> {
    let f = train.first().ok_or(Error::EmptyInput("probe training set"))?.image.width();
    let mut sums = vec![vec![0.0; f]; num_objects];
    let mut counts = vec![0usize; num_objects];
    for r in train {
        for (i, &c) in r.labels.nodes.iter().enumerate() {
            counts[c] += 1;
            sums[c].iter_mut().zip(r.image.features.row(&[i])).for_each(|(s, v)| *s += v);
        }
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let (mut right, mut total) = (0usize, 0usize);
    for r in test {
        for (i, &c) in r.labels.nodes.iter().enumerate() {
            let x = r.image.features.row(&[i]);
            let guess = means
                .iter()
                .enumerate()
                .filter_map(|(k, m)| m.as_ref().map(|m| (k, m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            right += usize::from(guess == Some(c));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("probe test set"));
    }
    Ok(right as f64 / total as f64)
}
