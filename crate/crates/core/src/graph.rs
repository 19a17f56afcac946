//! Label graphs, input graphs, dataset records and structural rules.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NO_RELATION: usize = 0;

/// Object and predicate vocabularies. Predicate 0 is always `no-relation`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub object_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
}

impl LabelSpace {
    pub fn new(object_classes: Vec<String>, predicate_classes: Vec<String>) -> Result<Self> {
        let ls = Self { object_classes, predicate_classes };
        ls.check()?;
        Ok(ls)
    }

    /// `obj0..obj{d-1}` and `no-relation, pred1..pred{d'-1}`.
    pub fn synthetic(d: usize, d_pred: usize) -> Result<Self> {
        let objects = (0..d).map(|i| format!("obj{i}")).collect();
        let mut predicates = vec!["no-relation".to_string()];
        predicates.extend((1..d_pred).map(|i| format!("pred{i}")));
        Self::new(objects, predicates)
    }

    pub fn check(&self) -> Result<()> {
        if self.object_classes.len() < 2 || self.predicate_classes.len() < 2 {
            return Err(Error::InvalidConfig("label space needs d >= 2 and d' >= 2".into()));
        }
        if self.predicate_classes[0] != "no-relation" {
            return Err(Error::InvalidConfig("predicate 0 must be `no-relation`".into()));
        }
        for names in [&self.object_classes, &self.predicate_classes] {
            for (i, a) in names.iter().enumerate() {
                if names[i + 1..].contains(a) {
                    return Err(Error::InvalidConfig(format!("duplicate class name `{a}`")));
                }
            }
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.object_classes.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_classes.len()
    }

    /// FNV-1a over the class names; used to detect checkpoint/data mismatch.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for name in self.object_classes.iter().chain(&self.predicate_classes) {
            eat(name.as_bytes());
            eat(&[0xff]);
        }
        eat(&(self.object_classes.len() as u64).to_le_bytes());
        h
    }
}

/// Node label scores `[n, d]` and directed edge label scores `[n, n, d']`.
///
/// The self-edge fibres `edges[i, i, :]` are kept at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphState {
    pub nodes: Tensor,
    pub edges: Tensor,
}

impl SceneGraphState {
    pub fn new(nodes: Tensor, edges: Tensor) -> Result<Self> {
        let s = Self { nodes, edges };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        let ns = self.nodes.shape();
        let es = self.edges.shape();
        if ns.len() != 2 || es.len() != 3 || es[0] != ns[0] || es[1] != ns[0] {
            return Err(Error::Shape(format!("scene graph nodes {ns:?} edges {es:?}")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.nodes.shape()[0]
    }

    pub fn num_objects(&self) -> usize {
        self.nodes.shape()[1]
    }

    pub fn num_predicates(&self) -> usize {
        self.edges.shape()[2]
    }

    pub fn zero_diagonal(&mut self) {
        let (n, dp) = (self.n(), self.num_predicates());
        let data = self.edges.data_mut();
        for i in 0..n {
            let off = (i * n + i) * dp;
            data[off..off + dp].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Argmax labels: node classes and every off-diagonal non-background edge.
    pub fn decode(&self) -> GtLabels {
        let n = self.n();
        let nodes = (0..n).map(|i| argmax(self.nodes.row(&[i]))).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let p = argmax(self.edges.row(&[i, j]));
                if p != NO_RELATION {
                    edges.push(Edge { subject: i, object: j, predicate: p });
                }
            }
        }
        GtLabels { nodes, edges }
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mask `[n, n, 1]` with zeros on the diagonal.
pub fn off_diagonal_mask(n: usize) -> Tensor {
    let mut m = Tensor::filled(&[n, n, 1], 1.0);
    for i in 0..n {
        m.set(&[i, i, 0], 0.0);
    }
    m
}

/// Input graph: per-node feature vectors, fully connected without self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGraph {
    pub features: Tensor,
}

impl ImageGraph {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::Shape(format!("node features must be [n, f], got {:?}", features.shape())));
        }
        Ok(Self { features })
    }

    pub fn n(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// A directed labeled edge between node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

/// Class-level relation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

/// Ground-truth (or decoded) labels. Pairs not listed carry `no-relation`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GtLabels {
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl GtLabels {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Dense `[n][n]` predicate matrix, `NO_RELATION` where absent.
    pub fn predicate_matrix(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut m = vec![vec![NO_RELATION; n]; n];
        for e in &self.edges {
            m[e.subject][e.object] = e.predicate;
        }
        m
    }

    pub fn triplet(&self, e: &Edge) -> Triplet {
        Triplet { subject: self.nodes[e.subject], predicate: e.predicate, object: self.nodes[e.object] }
    }

    pub fn triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.edges.iter().map(|e| self.triplet(e))
    }

    /// Per-row targets for `softmax_cross_entropy` over the `[n, n, d']`
    /// edge fibres; diagonal rows are `None`.
    pub fn edge_targets(&self) -> Vec<Option<usize>> {
        let n = self.n();
        let m = self.predicate_matrix();
        let mut out = Vec::with_capacity(n * n);
        for (i, row) in m.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                out.push(if i == j { None } else { Some(p) });
            }
        }
        out
    }

    pub fn node_targets(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|&c| Some(c)).collect()
    }

    fn sorted(mut self) -> Self {
        self.edges.sort();
        self
    }
}

/// One dataset example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image: ImageGraph,
    pub labels: GtLabels,
    pub scene_type: usize,
    pub seed: u64,
}

impl SceneRecord {
    pub fn n(&self) -> usize {
        self.labels.n()
    }
}

/// Structural law of the synthetic task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// A subject carries at most one outgoing edge labeled from `predicates`.
    MutualExclusion { predicates: Vec<usize> },
    /// `predicate` may only link an allowed subject class to an allowed object class.
    TypeConstraint { predicate: usize, subjects: Vec<usize>, objects: Vec<usize> },
}

impl Rule {
    pub fn kind(&self) -> &'static str {
        match self {
            Rule::MutualExclusion { .. } => "mutual_exclusion",
            Rule::TypeConstraint { .. } => "type_constraint",
        }
    }

    pub fn check(&self, ls: &LabelSpace) -> Result<()> {
        let (d, dp) = (ls.num_objects(), ls.num_predicates());
        let pred_ok = |p: usize| -> Result<()> {
            if p == NO_RELATION || p >= dp {
                Err(Error::InvalidConfig(format!("rule predicate {p} outside 1..{dp}")))
            } else {
                Ok(())
            }
        };
        match self {
            Rule::MutualExclusion { predicates } => {
                if predicates.len() < 2 {
                    return Err(Error::InvalidConfig("mutual exclusion needs at least two predicates".into()));
                }
                predicates.iter().try_for_each(|&p| pred_ok(p))
            }
            Rule::TypeConstraint { predicate, subjects, objects } => {
                pred_ok(*predicate)?;
                if let Some(&c) = subjects.iter().chain(objects).find(|&&c| c >= d) {
                    return Err(Error::InvalidConfig(format!("rule class {c} outside 0..{d}")));
                }
                Ok(())
            }
        }
    }

    /// Whether a single edge is allowed in isolation.
    pub fn permits(&self, t: &Triplet) -> bool {
        match self {
            Rule::MutualExclusion { .. } => true,
            Rule::TypeConstraint { predicate, subjects, objects } => {
                t.predicate != *predicate || (subjects.contains(&t.subject) && objects.contains(&t.object))
            }
        }
    }
}

/// Loosely typed rule as found in header files; see [`RuleSpec::into_rule`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subjects: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<usize>,
}

impl RuleSpec {
    pub fn into_rule(self) -> Result<Rule> {
        match self.kind.as_str() {
            "mutual_exclusion" => Ok(Rule::MutualExclusion { predicates: self.predicates }),
            "type_constraint" => Ok(Rule::TypeConstraint {
                predicate: self
                    .predicate
                    .ok_or_else(|| Error::InvalidConfig("type_constraint without predicate".into()))?,
                subjects: self.subjects,
                objects: self.objects,
            }),
            other => Err(Error::UnknownRule(other.to_string())),
        }
    }

    pub fn from_rule(rule: &Rule) -> Self {
        match rule {
            Rule::MutualExclusion { predicates } => Self {
                kind: rule.kind().into(),
                predicates: predicates.clone(),
                predicate: None,
                subjects: Vec::new(),
                objects: Vec::new(),
            },
            Rule::TypeConstraint { predicate, subjects, objects } => Self {
                kind: rule.kind().into(),
                predicates: Vec::new(),
                predicate: Some(*predicate),
                subjects: subjects.clone(),
                objects: objects.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NodeClassOutOfRange { node: usize, class: usize },
    NodeOutOfRange { edge: Edge },
    PredicateOutOfRange { edge: Edge },
    SelfEdge { node: usize },
    DuplicateEdge { subject: usize, object: usize },
    ExplicitNoRelation { subject: usize, object: usize },
    FeatureRows { features: usize, labels: usize },
    /// `subject` has more than one outgoing edge from the rule's set.
    MutualExclusion { rule: usize, subject: usize },
    TypeConstraint { rule: usize, edge: Edge },
}

impl Violation {
    pub fn is_rule(&self) -> bool {
        matches!(self, Violation::MutualExclusion { .. } | Violation::TypeConstraint { .. })
    }
}

/// Rule violations of a labeling whose indices are already known valid.
pub fn rule_violations(labels: &GtLabels, rules: &[Rule]) -> Vec<Violation> {
    let mut out = Vec::new();
    for (r, rule) in rules.iter().enumerate() {
        match rule {
            Rule::MutualExclusion { predicates } => {
                let mut per_subject: BTreeMap<usize, usize> = BTreeMap::new();
                for e in labels.edges.iter().filter(|e| predicates.contains(&e.predicate)) {
                    *per_subject.entry(e.subject).or_default() += 1;
                }
                out.extend(
                    per_subject
                        .into_iter()
                        .filter(|&(_, c)| c > 1)
                        .map(|(subject, _)| Violation::MutualExclusion { rule: r, subject }),
                );
            }
            Rule::TypeConstraint { .. } => {
                out.extend(
                    labels
                        .edges
                        .iter()
                        .filter(|e| !rule.permits(&labels.triplet(e)))
                        .map(|&edge| Violation::TypeConstraint { rule: r, edge }),
                );
            }
        }
    }
    out
}

/// Every problem with a record: index ranges, shapes, and rule violations.
pub fn validate(record: &SceneRecord, ls: &LabelSpace, rules: &[Rule]) -> Vec<Violation> {
    let labels = &record.labels;
    let n = labels.n();
    let mut out = Vec::new();
    if record.image.n() != n {
        out.push(Violation::FeatureRows { features: record.image.n(), labels: n });
    }
    for (node, &class) in labels.nodes.iter().enumerate() {
        if class >= ls.num_objects() {
            out.push(Violation::NodeClassOutOfRange { node, class });
        }
    }
    let mut seen = BTreeMap::new();
    for &edge in &labels.edges {
        if edge.subject >= n || edge.object >= n {
            out.push(Violation::NodeOutOfRange { edge });
            continue;
        }
        if edge.subject == edge.object {
            out.push(Violation::SelfEdge { node: edge.subject });
        }
        if edge.predicate >= ls.num_predicates() {
            out.push(Violation::PredicateOutOfRange { edge });
        }
        if edge.predicate == NO_RELATION {
            out.push(Violation::ExplicitNoRelation { subject: edge.subject, object: edge.object });
        }
        if seen.insert((edge.subject, edge.object), ()).is_some() {
            out.push(Violation::DuplicateEdge { subject: edge.subject, object: edge.object });
        }
    }
    if out.is_empty() {
        out.extend(rule_violations(labels, rules));
    }
    out
}

/// One-hot label graph for ground-truth labels.
pub fn one_hot(labels: &GtLabels, ls: &LabelSpace) -> Result<SceneGraphState> {
    one_hot_dims(labels, ls.num_objects(), ls.num_predicates())
}

/// [`one_hot`] with explicit class counts.
pub fn one_hot_dims(labels: &GtLabels, d: usize, dp: usize) -> Result<SceneGraphState> {
    let n = labels.n();
    if n == 0 {
        return Err(Error::EmptyInput("scene without nodes"));
    }
    let mut nodes = Tensor::zeros(&[n, d]);
    for (i, &c) in labels.nodes.iter().enumerate() {
        if c >= d {
            return Err(Error::IndexOutOfRange { what: "object class", index: c, bound: d });
        }
        nodes.set(&[i, c], 1.0);
    }
    let mut edges = Tensor::zeros(&[n, n, dp]);
    for (i, row) in labels.predicate_matrix_checked(dp)?.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if i != j {
                edges.set(&[i, j, p], 1.0);
            }
        }
    }
    SceneGraphState::new(nodes, edges)
}

impl GtLabels {
    fn predicate_matrix_checked(&self, dp: usize) -> Result<Vec<Vec<usize>>> {
        let n = self.n();
        for e in &self.edges {
            if e.subject >= n || e.object >= n {
                return Err(Error::IndexOutOfRange { what: "node", index: e.subject.max(e.object), bound: n });
            }
            if e.predicate >= dp {
                return Err(Error::IndexOutOfRange { what: "predicate", index: e.predicate, bound: dp });
            }
        }
        Ok(self.predicate_matrix())
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation);
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation);
        }
        seen[p] = true;
    }
    Ok(())
}

/// Row permutation of a `[n, ...]` tensor: `out[k] = t[perm[k]]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    check_perm(perm, n)?;
    let width = t.len() / n;
    let mut out = Vec::with_capacity(t.len());
    for &p in perm {
        out.extend_from_slice(&t.data()[p * width..(p + 1) * width]);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Permutation of both node axes of a `[n, n, ...]` tensor.
pub fn permute_pairs(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    check_perm(perm, n)?;
    if t.ndim() < 2 || t.shape()[1] != n {
        return Err(Error::Shape(format!("expected [n, n, ...], got {:?}", t.shape())));
    }
    let width = t.len() / (n * n);
    let mut out = Vec::with_capacity(t.len());
    for &pi in perm {
        for &pj in perm {
            let off = (pi * n + pj) * width;
            out.extend_from_slice(&t.data()[off..off + width]);
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Relabels nodes so that new node `k` is old node `perm[k]`.
pub fn permute_nodes(
    sg: &SceneGraphState,
    ig: &ImageGraph,
    perm: &[usize],
) -> Result<(SceneGraphState, ImageGraph)> {
    if sg.n() != ig.n() {
        return Err(Error::Shape(format!("scene graph has {} nodes, image graph {}", sg.n(), ig.n())));
    }
    let sg = SceneGraphState::new(permute_rows(&sg.nodes, perm)?, permute_pairs(&sg.edges, perm)?)?;
    let ig = ImageGraph::new(permute_rows(&ig.features, perm)?)?;
    Ok((sg, ig))
}

/// Applies the same relabeling as [`permute_nodes`] to discrete labels.
pub fn permute_labels(labels: &GtLabels, perm: &[usize]) -> Result<GtLabels> {
    let n = labels.n();
    check_perm(perm, n)?;
    let mut inverse = vec![0; n];
    for (k, &p) in perm.iter().enumerate() {
        inverse[p] = k;
    }
    let nodes = perm.iter().map(|&p| labels.nodes[p]).collect();
    let edges = labels
        .edges
        .iter()
        .map(|e| Edge { subject: inverse[e.subject], object: inverse[e.object], predicate: e.predicate })
        .collect();
    Ok(GtLabels { nodes, edges }.sorted())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls() -> LabelSpace {
        LabelSpace::synthetic(4, 5).unwrap()
    }

    #[test]
    fn one_hot_single_node() {
        let labels = GtLabels { nodes: vec![2], edges: vec![] };
        let sg = one_hot(&labels, &ls()).unwrap();
        assert_eq!(sg.nodes.data(), &[0., 0., 1., 0.]);
        assert!(sg.edges.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_two_nodes() {
        let labels = GtLabels { nodes: vec![0, 1], edges: vec![Edge { subject: 0, object: 1, predicate: 3 }] };
        let sg = one_hot(&labels, &ls()).unwrap();
        assert_eq!(sg.edges.get(&[0, 1, 3]), 1.0);
        assert_eq!(sg.edges.get(&[1, 0, 0]), 1.0);
        assert_eq!(sg.edges.row(&[0, 0]), &[0.0; 5]);
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = sg.edges.row(&[i, j]).iter().sum();
                assert_eq!(s, if i == j { 0.0 } else { 1.0 });
            }
        }
        assert_eq!(sg.decode(), labels);
    }

    #[test]
    fn one_hot_rejects_bad_index() {
        let labels = GtLabels { nodes: vec![4], edges: vec![] };
        assert!(matches!(one_hot(&labels, &ls()), Err(Error::IndexOutOfRange { .. })));
        let labels = GtLabels { nodes: vec![0, 1], edges: vec![Edge { subject: 0, object: 1, predicate: 5 }] };
        assert!(matches!(one_hot(&labels, &ls()), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn label_space_rules() {
        assert!(LabelSpace::synthetic(1, 3).is_err());
        assert!(LabelSpace::new(vec!["a".into(), "a".into()], vec!["no-relation".into(), "x".into()]).is_err());
        assert!(LabelSpace::new(vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]).is_err());
        assert_ne!(ls().fingerprint(), LabelSpace::synthetic(4, 6).unwrap().fingerprint());
    }

    #[test]
    fn permutation_swap_is_involution() {
        let labels = GtLabels { nodes: vec![0, 3], edges: vec![Edge { subject: 0, object: 1, predicate: 2 }] };
        let sg = one_hot(&labels, &ls()).unwrap();
        let ig = ImageGraph::new(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let (sg1, ig1) = permute_nodes(&sg, &ig, &[1, 0]).unwrap();
        assert_eq!(sg1.edges.get(&[1, 0, 2]), 1.0);
        assert_eq!(ig1.features.data(), &[3., 4., 1., 2.]);
        let (sg2, ig2) = permute_nodes(&sg1, &ig1, &[1, 0]).unwrap();
        assert_eq!((sg2, ig2), (sg.clone(), ig.clone()));
        let (sg3, ig3) = permute_nodes(&sg, &ig, &[0, 1]).unwrap();
        assert_eq!((sg3, ig3), (sg, ig));
        assert_eq!(permute_nodes(&one_hot(&labels, &ls()).unwrap(), &ImageGraph::new(Tensor::zeros(&[2, 1])).unwrap(), &[0, 0]).unwrap_err(), Error::InvalidPermutation);
    }

    #[test]
    fn validate_reports_range_and_rules() {
        let ls = ls();
        let rules = vec![Rule::MutualExclusion { predicates: vec![1, 2] }];
        let record = |edges: Vec<Edge>| SceneRecord {
            image: ImageGraph::new(Tensor::zeros(&[3, 2])).unwrap(),
            labels: GtLabels { nodes: vec![0, 1, 2], edges },
            scene_type: 0,
            seed: 0,
        };
        let ok = record(vec![Edge { subject: 0, object: 1, predicate: 1 }, Edge { subject: 1, object: 2, predicate: 2 }]);
        assert!(validate(&ok, &ls, &rules).is_empty());

        let bad_range = record(vec![Edge { subject: 0, object: 1, predicate: 5 }]);
        let v = validate(&bad_range, &ls, &rules);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::PredicateOutOfRange { .. }));

        let exclusive = record(vec![Edge { subject: 0, object: 1, predicate: 1 }, Edge { subject: 0, object: 2, predicate: 2 }]);
        assert_eq!(validate(&exclusive, &ls, &rules), vec![Violation::MutualExclusion { rule: 0, subject: 0 }]);
    }

    #[test]
    fn type_constraint_checks_classes() {
        let rule = Rule::TypeConstraint { predicate: 3, subjects: vec![0], objects: vec![1, 2] };
        assert!(rule.permits(&Triplet { subject: 0, predicate: 3, object: 2 }));
        assert!(!rule.permits(&Triplet { subject: 1, predicate: 3, object: 2 }));
        assert!(rule.permits(&Triplet { subject: 1, predicate: 2, object: 3 }));
        assert!(rule.check(&ls()).is_ok());
        assert!(Rule::MutualExclusion { predicates: vec![1] }.check(&ls()).is_err());
    }

    #[test]
    fn rule_spec_round_trip_and_unknown_kind() {
        let rules = [
            Rule::MutualExclusion { predicates: vec![1, 2] },
            Rule::TypeConstraint { predicate: 3, subjects: vec![0], objects: vec![1] },
        ];
        for r in rules {
            assert_eq!(RuleSpec::from_rule(&r).into_rule().unwrap(), r);
        }
        let spec = RuleSpec { kind: "transitivity".into(), predicates: vec![], predicate: None, subjects: vec![], objects: vec![] };
        assert_eq!(spec.into_rule(), Err(Error::UnknownRule("transitivity".into())));
    }
}
