//! Brute-force recall metrics. No sorting: the rank of a gt relation is
//! the number of candidates that beat it (higher score, or equal score
//! and smaller `(subject, object, predicate)`).

use std::collections::BTreeMap;

use ebsg_core::graph::{GtLabels, SceneGraphState, Triplet};
use ebsg_core::training::Setting;

pub struct Candidate {
    pub key: (usize, usize, usize),
    pub score: f64,
}

pub fn candidates(sg: &SceneGraphState, setting: Setting) -> Vec<Candidate> {
    let n = sg.n();
    let dp = sg.num_predicates();
    let node_score = |i: usize| -> f64 {
        match setting {
            Setting::Predcls => 1.0,
            Setting::Sgcls => {
                let mut m = f64::NEG_INFINITY;
                for c in 0..sg.num_objects() {
                    m = m.max(sg.nodes.get(&[i, c]));
                }
                m
            }
        }
    };
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for p in 1..dp {
                if i != j {
                    out.push(Candidate { key: (i, j, p), score: node_score(i) * sg.edges.get(&[i, j, p]) * node_score(j) });
                }
            }
        }
    }
    out
}

/// Zero-based rank of `key`, or `None` if it is not a candidate.
pub fn rank_of(cands: &[Candidate], key: (usize, usize, usize)) -> Option<usize> {
    let me = cands.iter().find(|c| c.key == key)?;
    Some(cands.iter().filter(|c| c.score > me.score || (c.score == me.score && c.key < me.key)).count())
}

/// Per image: (triplet key, predicate, hit@k) for every gt relation.
pub fn hits(corpus: &[(SceneGraphState, GtLabels)], setting: Setting, k: usize) -> Vec<Vec<(Triplet, usize, bool)>> {
    corpus
        .iter()
        .map(|(sg, gt)| {
            let cands = candidates(sg, setting);
            gt.edges
                .iter()
                .map(|e| {
                    let hit = rank_of(&cands, (e.subject, e.object, e.predicate)).is_some_and(|r| r < k);
                    let key = Triplet { subject: gt.nodes[e.subject], predicate: e.predicate, object: gt.nodes[e.object] };
                    (key, e.predicate, hit)
                })
                .collect()
        })
        .collect()
}

/// Mean per-image recall over the selected relations.
pub fn recall(per_image: &[Vec<(Triplet, usize, bool)>], select: impl Fn(&Triplet) -> bool) -> Option<f64> {
    let mut total = 0.0;
    let mut images = 0;
    for img in per_image {
        let chosen: Vec<bool> = img.iter().filter(|(t, _, _)| select(t)).map(|x| x.2).collect();
        if !chosen.is_empty() {
            total += chosen.iter().filter(|&&h| h).count() as f64 / chosen.len() as f64;
            images += 1;
        }
    }
    if images == 0 {
        None
    } else {
        Some(total / images as f64)
    }
}

pub fn mean_recall(per_image: &[Vec<(Triplet, usize, bool)>], num_predicates: usize) -> Option<f64> {
    let mut ratios = Vec::new();
    for p in 0..num_predicates {
        let all: Vec<bool> = per_image.iter().flatten().filter(|x| x.1 == p).map(|x| x.2).collect();
        if !all.is_empty() {
            ratios.push(all.iter().filter(|&&h| h).count() as f64 / all.len() as f64);
        }
    }
    if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

/// R, mR, zsR and per-bucket fsR at `k`.
pub struct OracleReport {
    pub r: Option<f64>,
    pub mr: Option<f64>,
    pub zsr: Option<f64>,
    pub fsr: Vec<Option<f64>>,
}

pub fn report(
    corpus: &[(SceneGraphState, GtLabels)],
    setting: Setting,
    census: &BTreeMap<Triplet, u64>,
    buckets: &[(u64, u64)],
    num_predicates: usize,
    k: usize,
) -> OracleReport {
    let h = hits(corpus, setting, k);
    OracleReport {
        r: recall(&h, |_| true),
        mr: mean_recall(&h, num_predicates),
        zsr: recall(&h, |t| !census.contains_key(t)),
        fsr: buckets
            .iter()
            .map(|&(lo, hi)| recall(&h, |t| census.get(t).is_some_and(|&c| lo <= c && c <= hi)))
            .collect(),
    }
}

/// Random corpus with quantized scores (many ties), some images without
/// relations, and a census that covers a random part of the gt triplets.
/// With `census_covers_all` every gt triplet is seen, so zsR has no
/// denominator.
pub fn random_corpus(
    rng: &mut ebsg_core::rng::Rng,
    census_covers_all: bool,
) -> (Vec<(SceneGraphState, GtLabels)>, BTreeMap<Triplet, u64>) {
    use rand::Rng as _;
    let (d, dp) = (3, 4);
    let images = rng.random_range(1..6);
    let mut corpus = Vec::new();
    for _ in 0..images {
        let n = rng.random_range(1..5);
        let mut sg = super::state(n, d, dp, rng);
        for v in sg.nodes.data_mut().iter_mut().chain(sg.edges.data_mut().iter_mut()) {
            *v = (*v * 4.0).round() / 4.0;
        }
        sg.zero_diagonal();
        let density = if rng.random_bool(0.2) { 0.0 } else { 0.5 };
        corpus.push((sg, super::labels(n, d, dp, density, rng)));
    }
    let mut census = BTreeMap::new();
    for (_, gt) in &corpus {
        for e in &gt.edges {
            let t = Triplet { subject: gt.nodes[e.subject], predicate: e.predicate, object: gt.nodes[e.object] };
            if census_covers_all || rng.random_bool(0.6) {
                census.insert(t, rng.random_range(1..30));
            }
        }
    }
    (corpus, census)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

/// Every disagreement between `evaluate` and the brute-force report.
pub fn mismatches(
    corpus: &[(SceneGraphState, GtLabels)],
    census: &BTreeMap<Triplet, u64>,
    setting: Setting,
    ks: &[usize],
) -> Vec<String> {
    use ebsg_core::metrics::{default_buckets, evaluate};
    let buckets: Vec<(u64, u64)> = default_buckets().iter().map(|b| (b.lo, b.hi)).collect();
    let dp = corpus[0].0.num_predicates();
    let got = evaluate(corpus, setting, census, &default_buckets(), ks, &[]).unwrap();
    let mut out = Vec::new();
    for &k in ks {
        let want = report(corpus, setting, census, &buckets, dp, k);
        let at = got.at(k).unwrap();
        let mut check = |name: String, a: Option<f64>, b: Option<f64>| {
            if !close(a, b) {
                out.push(format!("{name}@{k}: {a:?} vs {b:?}"));
            }
        };
        check("R".into(), at.r, want.r);
        check("mR".into(), at.mr, want.mr);
        check("zsR".into(), at.zsr, want.zsr);
        for (b, w) in at.fsr.iter().zip(&want.fsr) {
            check(format!("fsR[{}-{}]", b.lo, b.hi), b.recall, *w);
        }
        if at.zsr_zero_denominator != want.zsr.is_none() {
            out.push(format!("zsR@{k} zero-denominator flag"));
        }
    }
    out
}
