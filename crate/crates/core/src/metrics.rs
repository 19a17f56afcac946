//! Relation recall metrics and the rule-violation diagnostic.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rule_violations, Edge, GtLabels, Rule, SceneGraphState, Triplet, NO_RELATION};
use crate::training::Setting;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

impl RankedTriplet {
    pub fn edge(&self) -> Edge {
        Edge { subject: self.subject, object: self.object, predicate: self.predicate }
    }
}

/// Training occurrence count of every class-level triplet.
pub type TripletCensus = BTreeMap<Triplet, u64>;

/// Counts class-level triplets over labeled scenes.
pub fn census<'a>(labels: impl IntoIterator<Item = &'a GtLabels>) -> TripletCensus {
    let mut out = TripletCensus::new();
    for l in labels {
        for t in l.triplets() {
            *out.entry(t).or_default() += 1;
        }
    }
    out
}

/// Every `(i, j, p)` with `i != j` and `p` not no-relation, scored
/// `s(i) * R[i, j, p] * s(j)` and sorted by descending score; ties keep
/// lexicographic `(i, j, p)` order. `s` is 1 in predcls and the largest
/// node probability in sgcls.
pub fn rank_triplets(sg: &SceneGraphState, setting: Setting) -> Vec<RankedTriplet> {
    let n = sg.n();
    let s: Vec<f64> = (0..n)
        .map(|i| match setting {
            Setting::Predcls => 1.0,
            Setting::Sgcls => sg.nodes.row(&[i]).iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) * sg.num_predicates());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (p, &r) in sg.edges.row(&[i, j]).iter().enumerate() {
                if p != NO_RELATION {
                    out.push(RankedTriplet { subject: i, object: j, predicate: p, score: s[i] * r * s[j] });
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Share of `gt` found in the first `k` entries; `None` for empty `gt`.
pub fn recall_at_k(ranked: &[RankedTriplet], gt: &[Edge], k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    if gt.is_empty() {
        return Ok(None);
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = gt.iter().filter(|e| top.iter().any(|t| t.edge() == **e)).count();
    Ok(Some(hits as f64 / gt.len() as f64))
}

/// One ground-truth relation and where the prediction ranked it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtHit {
    pub edge: Edge,
    pub key: Triplet,
    /// Zero-based position in the ranking; `None` when not ranked at all.
    pub rank: Option<usize>,
}

impl GtHit {
    pub fn hit(&self, k: usize) -> bool {
        self.rank.is_some_and(|r| r < k)
    }
}

/// Per-image ingredient of every corpus metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub gt: Vec<GtHit>,
}

impl ImageResult {
    pub fn new(ranked: &[RankedTriplet], gt: &GtLabels) -> Self {
        let pos: BTreeMap<Edge, usize> = ranked.iter().enumerate().map(|(r, t)| (t.edge(), r)).collect();
        let gt = gt
            .edges
            .iter()
            .map(|e| GtHit { edge: *e, key: gt.triplet(e), rank: pos.get(e).copied() })
            .collect();
        Self { gt }
    }
}

/// Mean over images of recall on the gt relations selected by `keep`;
/// images with nothing selected are skipped. `None` if all are skipped.
pub fn filtered_recall(results: &[ImageResult], k: usize, keep: impl Fn(&GtHit) -> bool) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    let mut sum = 0.0;
    let mut images = 0usize;
    for r in results {
        let sel: Vec<&GtHit> = r.gt.iter().filter(|g| keep(g)).collect();
        if sel.is_empty() {
            continue;
        }
        sum += sel.iter().filter(|g| g.hit(k)).count() as f64 / sel.len() as f64;
        images += 1;
    }
    Ok((images > 0).then(|| sum / images as f64))
}

/// R@K over a corpus.
pub fn corpus_recall(results: &[ImageResult], k: usize) -> Result<Option<f64>> {
    filtered_recall(results, k, |_| true)
}

/// Per-predicate recall pooled over images, averaged over predicates
/// that occur at least once. `None` when no image has gt relations.
pub fn mean_recall_at_k(results: &[ImageResult], num_predicates: usize, k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    let mut hits = alloc::vec![0u64; num_predicates];
    let mut totals = alloc::vec![0u64; num_predicates];
    for r in results {
        for g in &r.gt {
            let p = g.edge.predicate;
            if p >= num_predicates {
                return Err(Error::IndexOutOfRange { what: "predicate", index: p, bound: num_predicates });
            }
            totals[p] += 1;
            hits[p] += u64::from(g.hit(k));
        }
    }
    let per: Vec<f64> = (0..num_predicates)
        .filter(|&p| totals[p] > 0)
        .map(|p| hits[p] as f64 / totals[p] as f64)
        .collect();
    Ok((!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64))
}

/// Recall on gt relations whose class triplet never occurs in `census`.
pub fn zero_shot_recall(results: &[ImageResult], census: &TripletCensus, k: usize) -> Result<Option<f64>> {
    filtered_recall(results, k, |g| !census.contains_key(&g.key))
}

/// Inclusive range of training counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: u64,
    pub hi: u64,
}

impl Bucket {
    pub fn contains(&self, count: u64) -> bool {
        self.lo <= count && count <= self.hi
    }
}

pub fn default_buckets() -> Vec<Bucket> {
    [(1, 5), (6, 10), (11, 15), (16, 20), (21, 25)].iter().map(|&(lo, hi)| Bucket { lo, hi }).collect()
}

pub fn check_buckets(buckets: &[Bucket]) -> Result<()> {
    for b in buckets {
        if b.lo > b.hi {
            return Err(Error::InvalidConfig(alloc::format!("bucket {}-{} is empty", b.lo, b.hi)));
        }
    }
    for (i, a) in buckets.iter().enumerate() {
        for b in &buckets[i + 1..] {
            if a.lo <= b.hi && b.lo <= a.hi {
                return Err(Error::OverlappingBuckets { first: (a.lo, a.hi), second: (b.lo, b.hi) });
            }
        }
    }
    Ok(())
}

/// Recall per bucket on gt relations whose training count lies in it.
pub fn few_shot_recall(
    results: &[ImageResult],
    census: &TripletCensus,
    buckets: &[Bucket],
    k: usize,
) -> Result<Vec<(Bucket, Option<f64>)>> {
    check_buckets(buckets)?;
    buckets
        .iter()
        .map(|b| {
            let r = filtered_recall(results, k, |g| census.get(&g.key).is_some_and(|&c| b.contains(c)))?;
            Ok((*b, r))
        })
        .collect()
}

/// Fraction of decoded scenes with at least one rule violation.
pub fn constraint_violation_rate(decoded: &[GtLabels], rules: &[Rule]) -> Option<f64> {
    if decoded.is_empty() {
        return None;
    }
    let bad = decoded.iter().filter(|l| !rule_violations(l, rules).is_empty()).count();
    Some(bad as f64 / decoded.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRecall {
    pub lo: u64,
    pub hi: u64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    #[serde(rename = "mR")]
    pub mr: Option<f64>,
    #[serde(rename = "zsR")]
    pub zsr: Option<f64>,
    /// Set when no gt relation is unseen in training.
    pub zsr_zero_denominator: bool,
    #[serde(rename = "fsR")]
    pub fsr: Vec<BucketRecall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub k_values: Vec<usize>,
    pub at_k: Vec<RecallAtK>,
    pub violation_rate: Option<f64>,
    pub num_images: usize,
    /// Images without gt relations, left out of recall averages.
    pub skipped: usize,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&RecallAtK> {
        self.at_k.iter().find(|a| a.k == k)
    }
}

/// Full report for predictions paired with their ground truth.
pub fn evaluate(
    predictions: &[(SceneGraphState, GtLabels)],
    setting: Setting,
    census: &TripletCensus,
    buckets: &[Bucket],
    ks: &[usize],
    rules: &[Rule],
) -> Result<MetricsReport> {
    check_buckets(buckets)?;
    if ks.contains(&0) {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    let mut results = Vec::with_capacity(predictions.len());
    let mut decoded = Vec::with_capacity(predictions.len());
    let mut num_predicates = 0;
    for (sg, gt) in predictions {
        if gt.n() != sg.n() {
            return Err(Error::Shape(alloc::format!("{} labels for {} nodes", gt.n(), sg.n())));
        }
        num_predicates = sg.num_predicates();
        results.push(ImageResult::new(&rank_triplets(sg, setting), gt));
        let mut d = sg.decode();
        if setting == Setting::Predcls {
            d.nodes = gt.nodes.clone();
        }
        decoded.push(d);
    }
    let skipped = results.iter().filter(|r| r.gt.is_empty()).count();
    let mut at_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let zsr = zero_shot_recall(&results, census, k)?;
        let fsr = few_shot_recall(&results, census, buckets, k)?
            .into_iter()
            .map(|(b, recall)| BucketRecall { lo: b.lo, hi: b.hi, recall })
            .collect();
        at_k.push(RecallAtK {
            k,
            r: corpus_recall(&results, k)?,
            mr: mean_recall_at_k(&results, num_predicates, k)?,
            zsr,
            zsr_zero_denominator: zsr.is_none(),
            fsr,
        });
    }
    Ok(MetricsReport {
        setting,
        k_values: ks.to_vec(),
        at_k,
        violation_rate: constraint_violation_rate(&decoded, rules),
        num_images: predictions.len(),
        skipped,
    })
}
