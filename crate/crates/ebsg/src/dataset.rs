//! JSON-lines dataset files and the sidecar header.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ebsg_core::graph::{validate, Edge, GtLabels, ImageGraph, LabelSpace, Rule, RuleSpec, SceneRecord};
use ebsg_core::metrics::{census, default_buckets, Bucket, TripletCensus};
use ebsg_core::synth::{predicate_frequencies, Dataset, GeneratorConfig, Split, SplitCounts};
use ebsg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{parse_json, read_bytes, read_json, to_pretty};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.as_str())
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordRow {
    pub n: usize,
    pub node_features: Vec<Vec<f64>>,
    pub node_labels: Vec<usize>,
    /// `[subject, object, predicate]`; absent pairs are no-relation.
    pub edges: Vec<[usize; 3]>,
    pub scene_type: usize,
    pub seed: u64,
}

impl RecordRow {
    pub fn from_record(r: &SceneRecord) -> Self {
        let f = r.image.width();
        Self {
            n: r.n(),
            node_features: r.image.features.data().chunks(f.max(1)).map(<[f64]>::to_vec).collect(),
            node_labels: r.labels.nodes.clone(),
            edges: r.labels.edges.iter().map(|e| [e.subject, e.object, e.predicate]).collect(),
            scene_type: r.scene_type,
            seed: r.seed,
        }
    }

    pub fn into_record(self) -> Result<SceneRecord, String> {
        if self.node_features.len() != self.n || self.node_labels.len() != self.n {
            return Err(format!(
                "n = {} but {} feature rows and {} labels",
                self.n,
                self.node_features.len(),
                self.node_labels.len()
            ));
        }
        let f = self.node_features.first().map_or(0, Vec::len);
        if self.node_features.iter().any(|row| row.len() != f) {
            return Err("ragged node_features".into());
        }
        let features = Tensor::new(vec![self.n, f], self.node_features.concat()).map_err(|e| e.to_string())?;
        let image = ImageGraph::new(features).map_err(|e| e.to_string())?;
        let edges = self.edges.iter().map(|&[subject, object, predicate]| Edge { subject, object, predicate }).collect();
        Ok(SceneRecord {
            image,
            labels: GtLabels { nodes: self.node_labels, edges },
            scene_type: self.scene_type,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusEntry {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketCount {
    pub lo: u64,
    pub hi: u64,
    /// Distinct training triplets whose count falls in the bucket.
    pub triplets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub label_space: LabelSpace,
    pub label_space_hash: String,
    pub feature_width: usize,
    pub counts: SplitCounts,
    pub rules: Vec<RuleSpec>,
    pub generator: Option<GeneratorConfig>,
    /// Training-split triplet counts.
    pub census: Vec<CensusEntry>,
    /// Realized training predicate frequencies over labeled edges.
    pub predicate_marginals: Vec<f64>,
    pub zipf_targets: Option<Vec<f64>>,
    pub bucket_occupancy: Vec<BucketCount>,
}

pub fn label_space_hash(ls: &LabelSpace) -> String {
    format!("{:016x}", ls.fingerprint())
}

pub fn census_entries(c: &TripletCensus) -> Vec<CensusEntry> {
    c.iter()
        .map(|(t, &count)| CensusEntry { subject: t.subject, predicate: t.predicate, object: t.object, count })
        .collect()
}

pub fn bucket_occupancy(c: &TripletCensus, buckets: &[Bucket]) -> Vec<BucketCount> {
    buckets
        .iter()
        .map(|b| BucketCount { lo: b.lo, hi: b.hi, triplets: c.values().filter(|&&n| b.contains(n)).count() })
        .collect()
}

impl DatasetHeader {
    pub fn for_generated(cfg: &GeneratorConfig, ls: &LabelSpace, data: &Dataset) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            label_space: ls.clone(),
            label_space_hash: label_space_hash(ls),
            feature_width: cfg.feature_width,
            counts: cfg.counts,
            rules: cfg.rules.iter().map(RuleSpec::from_rule).collect(),
            generator: Some(cfg.clone()),
            census: census_entries(&data.census),
            predicate_marginals: predicate_frequencies(&data.train, cfg.num_predicates),
            zipf_targets: Some(cfg.zipf_targets()),
            bucket_occupancy: bucket_occupancy(&data.census, &default_buckets()),
        }
    }
}

pub fn render_split(records: &[SceneRecord]) -> Vec<u8> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(&RecordRow::from_record(r)).expect("serializable row");
        writeln!(out, "{line}").expect("string write");
    }
    out.into_bytes()
}

/// File name and bytes of every dataset file, header last.
pub fn render_dataset(header: &DatasetHeader, data: &Dataset) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = Split::ALL.iter().map(|&s| (split_file(s), render_split(data.split(s)))).collect();
    files.push((HEADER_FILE.to_string(), to_pretty(header)));
    files
}

/// A dataset directory loaded and checked against its header.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub header: DatasetHeader,
    pub rules: Vec<Rule>,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
    /// Recounted from the training split.
    pub census: TripletCensus,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> &[SceneRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.header.label_space
    }

    pub fn num_objects(&self) -> usize {
        self.header.label_space.num_objects()
    }

    pub fn num_predicates(&self) -> usize {
        self.header.label_space.num_predicates()
    }
}

pub fn read_split(path: &Path, ls: &LabelSpace, rules: &[Rule], width: usize) -> CliResult<Vec<SceneRecord>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: String| CliError::Config(format!("{}:{}: {msg}", path.display(), i + 1));
        let row: RecordRow = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let record = row.into_record().map_err(bad)?;
        if record.n() > 0 && record.image.width() != width {
            return Err(bad(format!("feature width {} but header says {width}", record.image.width())));
        }
        if let Some(v) = validate(&record, ls, rules).into_iter().next() {
            return Err(bad(format!("{v:?}")));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> CliResult<LoadedDataset> {
    let header: DatasetHeader = read_json(&dir.join(HEADER_FILE))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::Config(format!("unsupported dataset format version {}", header.format_version)));
    }
    header.label_space.check()?;
    if header.label_space_hash != label_space_hash(&header.label_space) {
        return Err(CliError::Config("header label_space_hash does not match its label space".into()));
    }
    let mut rules = Vec::with_capacity(header.rules.len());
    for spec in &header.rules {
        let rule = spec.clone().into_rule()?;
        rule.check(&header.label_space)?;
        rules.push(rule);
    }
    let ls = &header.label_space;
    let w = header.feature_width;
    let train = read_split(&dir.join(split_file(Split::Train)), ls, &rules, w)?;
    let val = read_split(&dir.join(split_file(Split::Val)), ls, &rules, w)?;
    let test = read_split(&dir.join(split_file(Split::Test)), ls, &rules, w)?;
    let census = census(train.iter().map(|r| &r.labels));
    Ok(LoadedDataset { dir: dir.to_path_buf(), header, rules, train, val, test, census })
}

/// Parses a generator config file.
pub fn read_generator_config(path: &Path) -> CliResult<GeneratorConfig> {
    parse_json(path, &read_bytes(path)?)
}
