//! Command implementations. Each returns the path of the manifest it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use ebsg_core::graph::{one_hot_dims, rule_violations, GtLabels, SceneGraphState};
use ebsg_core::metrics::{default_buckets, evaluate, MetricsReport};
use ebsg_core::rng::stream;
use ebsg_core::sampler::{sgld_run, SgldConfig};
use ebsg_core::synth::{predicate_frequencies, total_variation, Generator, GeneratorConfig, Split};
use ebsg_core::training::{train, EpochReport, Mode, Setting, TrainConfig, TrainState};
use ebsg_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{config_identity, epoch_file, Checkpoint, LATEST};
use crate::cli::{Cli, Command};
use crate::dataset::{load_dataset, read_generator_config, render_dataset, DatasetHeader, LoadedDataset};
use crate::error::{CliError, CliResult};
use crate::files::{create_dir, read_bytes, read_json, sha256_hex, to_pretty, write_atomic};
use crate::manifest::{config_hash, Manifest};

pub const REPORT_FILE: &str = "report.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEED_ENV: &str = "EBSG_SEED";
const VAL_KS: [usize; 3] = [20, 50, 100];
const TAG_INSPECT: u64 = 0x494e;

/// Reads the seed override from the environment.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::Config(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// Runs a parsed command line. `argv` excludes the program name.
pub fn execute(cli: Cli, argv: &[String], seed: Option<u64>) -> CliResult<PathBuf> {
    match cli.command {
        Command::Generate { config, out } => generate(config.as_deref(), &out, argv, seed),
        Command::Train { config, mode, out, resume, epochs } => {
            let job = TrainJob::from_file(&config, mode.into(), epochs, seed)?;
            run_training(&job, &out, resume.as_deref(), argv).map(|(m, _)| m)
        }
        Command::Eval { ckpt, data, split, setting, k, out } => {
            eval(&ckpt, &data, split.into(), setting.map(Into::into), &k, out.as_deref(), argv, seed)
                .map(|(m, _)| m)
        }
        Command::Inspect { ckpt, data, split, record, tau, noise_scale, step_lambda, out } => {
            let req = InspectRequest { split: split.into(), record, tau, noise_scale, step_lambda };
            inspect(&ckpt, &data, &req, &out, argv, seed).map(|(m, _)| m)
        }
        Command::Ablate { config, out, taus, record } => ablate(&config, &out, &taus, record, argv, seed),
        Command::Rerun { manifest } => rerun(&manifest),
    }
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub counts: [usize; 3],
    pub distinct_triplets: usize,
    pub relations: u64,
    pub predicate_tv: f64,
    pub bucket_occupancy: Vec<(u64, u64, usize)>,
    pub reproduced: bool,
}

fn generate(config: Option<&Path>, out: &Path, argv: &[String], seed: Option<u64>) -> CliResult<PathBuf> {
    let mut cfg = match config {
        Some(path) => read_generator_config(path)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let generator = Generator::new(cfg.clone())?;
    let data = generator.generate()?;
    let header = DatasetHeader::for_generated(&cfg, generator.label_space(), &data);
    let files = render_dataset(&header, &data);

    let reproduced = files.iter().all(|(name, bytes)| fs::read(out.join(name)).is_ok_and(|old| &old == bytes));
    create_dir(out)?;
    let mut manifest = Manifest::new("generate", argv, config_hash(&cfg), cfg.seed);
    for (name, bytes) in &files {
        let path = out.join(name);
        write_atomic(&path, bytes)?;
        manifest.add(&path, bytes);
    }
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;

    let summary = GenerateSummary {
        counts: [data.train.len(), data.val.len(), data.test.len()],
        distinct_triplets: data.census.len(),
        relations: data.census.values().sum(),
        predicate_tv: total_variation(&predicate_frequencies(&data.train, cfg.num_predicates), &cfg.zipf_targets()),
        bucket_occupancy: header.bucket_occupancy.iter().map(|b| (b.lo, b.hi, b.triplets)).collect(),
        reproduced,
    };
    print_generate_summary(out, &summary);
    Ok(manifest_path)
}

fn print_generate_summary(out: &Path, s: &GenerateSummary) {
    println!("dataset written to {}", out.display());
    println!("scenes: train {} / val {} / test {}", s.counts[0], s.counts[1], s.counts[2]);
    println!(
        "training census: {} distinct triplets over {} relations; predicate TV to Zipf target {:.4}",
        s.distinct_triplets, s.relations, s.predicate_tv
    );
    let occ: Vec<String> = s.bucket_occupancy.iter().map(|(lo, hi, n)| format!("{lo}-{hi}: {n}")).collect();
    println!("bucket occupancy (triplets): {}", occ.join(", "));
    if s.reproduced {
        println!("reproduced: output identical to the existing files");
    }
}

// ---------------------------------------------------------------- train

/// Effective training request: dataset location plus trainer config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainJob {
    pub data: PathBuf,
    pub config: TrainConfig,
}

impl TrainJob {
    /// Parses a config file; `data` is resolved against the file's directory.
    pub fn from_file(path: &Path, mode: Mode, epochs: Option<usize>, seed: Option<u64>) -> CliResult<Self> {
        let value: Value = read_json(path)?;
        let Value::Object(mut map) = value else {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        };
        let data = match map.remove("data") {
            Some(Value::String(s)) => s,
            _ => return Err(CliError::Config(format!("{}: missing string key \"data\"", path.display()))),
        };
        let base = path.parent().unwrap_or(Path::new(""));
        let data = base.join(data);
        let mut config: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.mode = mode;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(Self { data, config })
    }
}

/// One line of `report.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    #[serde(flatten)]
    pub losses: EpochReport,
    pub val_metrics: Option<MetricsReport>,
}

/// Scene-graph predictions paired with ground truth.
pub fn predict_split(
    state: Option<&TrainState>,
    records: &[ebsg_core::graph::SceneRecord],
    setting: Setting,
    d: usize,
    dp: usize,
) -> CliResult<Vec<(SceneGraphState, GtLabels)>> {
    records
        .iter()
        .map(|r| {
            let sg = match state {
                Some(st) => {
                    let given = (setting == Setting::Predcls).then_some(r.labels.nodes.as_slice());
                    st.predictor.predict(&r.image, given)?
                }
                None => one_hot_dims(&r.labels, d, dp)?,
            };
            Ok((sg, r.labels.clone()))
        })
        .collect()
}

fn split_metrics(
    state: Option<&TrainState>,
    data: &LoadedDataset,
    split: Split,
    setting: Setting,
    ks: &[usize],
) -> CliResult<MetricsReport> {
    let preds = predict_split(state, data.split(split), setting, data.num_objects(), data.num_predicates())?;
    Ok(evaluate(&preds, setting, &data.census, &default_buckets(), ks, &data.rules)?)
}

fn read_report_lines(path: &Path, upto_epoch: usize) -> CliResult<Vec<String>> {
    let Ok(bytes) = fs::read(path) else { return Ok(Vec::new()) };
    let text = String::from_utf8(bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut kept = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let epoch = v.get("epoch").and_then(Value::as_u64).unwrap_or(u64::MAX);
        if epoch <= upto_epoch as u64 {
            kept.push(line.to_string());
        }
    }
    if kept.len() != upto_epoch {
        return Err(CliError::Config(format!(
            "{} holds {} lines up to epoch {upto_epoch}",
            path.display(),
            kept.len()
        )));
    }
    Ok(kept)
}

/// Trains `job` into `out`, optionally resuming. Returns the manifest path
/// and the epoch reports of this invocation.
pub fn run_training(
    job: &TrainJob,
    out: &Path,
    resume: Option<&Path>,
    argv: &[String],
) -> CliResult<(PathBuf, Vec<ReportLine>)> {
    let cfg = &job.config;
    let data = load_dataset(&job.data)?;
    if data.train.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    let (d, dp) = (data.num_objects(), data.num_predicates());
    let width = data.header.feature_width;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            ckpt.check_data(&data)?;
            if ckpt.config != config_identity(cfg) {
                return Err(CliError::Config(format!("{} was written under a different config", path.display())));
            }
            ckpt.restore()?
        }
        None => TrainState::init_from_data(cfg, d, dp, width, &data.train)?,
    };
    create_dir(out)?;
    let report_path = out.join(REPORT_FILE);
    let mut lines = if resume.is_some() { read_report_lines(&report_path, state.epoch)? } else { Vec::new() };
    let first_epoch = state.epoch;
    let mut new_lines = Vec::new();
    let mut io_error = None;

    let result = train(&mut state, cfg, &data.train, |st, rep| {
        let mut step = || -> CliResult<ReportLine> {
            let val_metrics = if data.val.is_empty() {
                None
            } else {
                Some(split_metrics(Some(st), &data, Split::Val, cfg.setting, &VAL_KS)?)
            };
            let line = ReportLine { losses: rep.clone(), val_metrics };
            let ckpt = Checkpoint::capture(st, cfg, data.label_space());
            let bytes = to_pretty(&ckpt);
            write_atomic(&out.join(epoch_file(st.epoch)), &bytes)?;
            write_atomic(&out.join(LATEST), &bytes)?;
            lines.push(serde_json::to_string(&line).expect("serializable report"));
            write_atomic(&report_path, (lines.join("\n") + "\n").as_bytes())?;
            print_epoch(&line);
            Ok(line)
        };
        match step() {
            Ok(line) => {
                new_lines.push(line);
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                io_error = Some(e);
                Err(CoreError::InvalidConfig(msg))
            }
        }
    });

    let mut manifest = Manifest::new("train", argv, config_hash(job), cfg.seed);
    for epoch in 1..=state.epoch {
        let p = out.join(epoch_file(epoch));
        if p.exists() {
            manifest.add_file(&p)?;
        }
    }
    for p in [out.join(LATEST), report_path] {
        if p.exists() {
            manifest.add_file(&p)?;
        }
    }
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;

    if let Some(e) = io_error {
        return Err(e);
    }
    match result {
        Ok(_) => {
            if state.epoch == first_epoch {
                println!("nothing to do: checkpoint already at epoch {}", state.epoch);
            }
            Ok((manifest_path, new_lines))
        }
        Err(e @ CoreError::Diverged { .. }) => Err(CliError::Diverged(format!(
            "{e}; last good checkpoint: {} (epoch {})",
            out.join(LATEST).display(),
            state.epoch
        ))),
        Err(e) => Err(e.into()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.4}", x))
}

fn print_epoch(line: &ReportLine) {
    let r = &line.losses;
    let mut msg = format!(
        "epoch {} [{}] total {:.5} L_t {:.5} L_e {:.5} L_r {:.5}",
        r.epoch,
        r.mode.as_str(),
        r.total,
        r.l_t,
        r.l_e,
        r.l_r
    );
    if let Some(m) = line.val_metrics.as_ref().and_then(|m| m.at(20)) {
        msg.push_str(&format!(" | val R@20 {} mR@20 {}", fmt_opt(m.r), fmt_opt(m.mr)));
    }
    println!("{msg}");
}

// ---------------------------------------------------------------- eval

fn with_extension_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn ckpt_dir(ckpt: &Path) -> PathBuf {
    ckpt.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ckpt_path: &Path,
    data_dir: &Path,
    split: Split,
    setting: Option<Setting>,
    ks: &[usize],
    out: Option<&Path>,
    argv: &[String],
    seed: Option<u64>,
) -> CliResult<(PathBuf, MetricsReport)> {
    if ks.is_empty() {
        return Err(CliError::Config("--k needs at least one value".into()));
    }
    let ckpt = Checkpoint::read(ckpt_path)?;
    let data = load_dataset(data_dir)?;
    ckpt.check_data(&data)?;
    let (state, setting) = if ckpt.oracle {
        (None, setting.unwrap_or(Setting::Predcls))
    } else {
        let st = ckpt.restore()?;
        let s = setting.unwrap_or(ckpt.train_config()?.setting);
        (Some(st), s)
    };
    let report = split_metrics(state.as_ref(), &data, split, setting, ks)?;
    let bytes = to_pretty(&report);
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => ckpt_dir(ckpt_path).join(format!("eval_{}_{}.json", split.as_str(), setting.as_str())),
    };
    write_atomic(&out_path, &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));

    #[derive(Serialize)]
    struct EvalIdentity<'a> {
        checkpoint_sha256: String,
        data: &'a Path,
        split: &'a str,
        setting: &'a str,
        k: &'a [usize],
    }
    let identity = EvalIdentity {
        checkpoint_sha256: sha256_hex(&read_bytes(ckpt_path)?),
        data: data_dir,
        split: split.as_str(),
        setting: setting.as_str(),
        k: ks,
    };
    let mut manifest = Manifest::new("eval", argv, config_hash(&identity), seed.unwrap_or(ckpt.seed));
    manifest.add(&out_path, &bytes);
    let manifest_path = with_extension_suffix(&out_path, ".manifest.json");
    manifest.write(&manifest_path)?;
    Ok((manifest_path, report))
}

// ---------------------------------------------------------------- inspect

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectRequest {
    pub split: Split,
    pub record: usize,
    pub tau: usize,
    pub noise_scale: f64,
    pub step_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeChange {
    pub node: usize,
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeChange {
    pub subject: usize,
    pub object: usize,
    pub before: usize,
    pub after: usize,
}

/// Decoded-label difference between the first and last sampler iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectDiff {
    pub split: String,
    pub record: usize,
    pub tau: usize,
    pub noise_scale: f64,
    pub step_lambda: f64,
    pub seed: u64,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub node_changes: Vec<NodeChange>,
    pub edge_changes: Vec<EdgeChange>,
    pub rule_violations_before: usize,
    pub rule_violations_after: usize,
    pub gt_edges_recovered_before: usize,
    pub gt_edges_recovered_after: usize,
}

pub fn trajectory_file(record: usize, tau: usize) -> String {
    format!("trajectory_r{record}_tau{tau}.csv")
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

fn label_diff(a: &GtLabels, b: &GtLabels) -> (Vec<NodeChange>, Vec<EdgeChange>) {
    let nodes = a
        .nodes
        .iter()
        .zip(&b.nodes)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(node, (&before, &after))| NodeChange { node, before, after })
        .collect();
    let (ma, mb) = (a.predicate_matrix(), b.predicate_matrix());
    let mut edges = Vec::new();
    for (i, (ra, rb)) in ma.iter().zip(&mb).enumerate() {
        for (j, (&before, &after)) in ra.iter().zip(rb).enumerate() {
            if before != after {
                edges.push(EdgeChange { subject: i, object: j, before, after });
            }
        }
    }
    (nodes, edges)
}

fn recovered(decoded: &GtLabels, gt: &GtLabels) -> usize {
    let m = decoded.predicate_matrix();
    gt.edges.iter().filter(|e| m[e.subject][e.object] == e.predicate).count()
}

pub fn inspect(
    ckpt_path: &Path,
    data_dir: &Path,
    req: &InspectRequest,
    out: &Path,
    argv: &[String],
    seed: Option<u64>,
) -> CliResult<(PathBuf, InspectDiff)> {
    let ckpt = Checkpoint::read(ckpt_path)?;
    let data = load_dataset(data_dir)?;
    ckpt.check_data(&data)?;
    let records = data.split(req.split);
    let record = records.get(req.record).ok_or_else(|| {
        CliError::Config(format!(
            "record {} out of range: {} split has {} records",
            req.record,
            req.split.as_str(),
            records.len()
        ))
    })?;
    let cfg = ckpt.train_config()?;
    let state = ckpt.restore()?;
    let sgld = SgldConfig {
        tau: req.tau,
        noise_scale: req.noise_scale,
        step_lambda: req.step_lambda.unwrap_or(cfg.sgld.step_lambda),
        ..cfg.sgld.clone()
    };
    sgld.validate()?;
    let seed = seed.unwrap_or(ckpt.seed);
    let given = (cfg.setting == Setting::Predcls).then_some(record.labels.nodes.as_slice());
    let sg0 = state.predictor.predict(&record.image, given)?;
    let mut rng = stream(seed, &[TAG_INSPECT, split_tag(req.split), req.record as u64]);
    let traj = sgld_run(&state.energy, &record.image, &sg0, &sgld, &mut rng)?;

    let mut csv = String::from("step,energy\n");
    for (i, e) in traj.energies.iter().enumerate() {
        csv.push_str(&format!("{i},{e}\n"));
    }
    let (before, after) = (sg0.decode(), traj.final_state.decode());
    let (node_changes, edge_changes) = label_diff(&before, &after);
    let diff = InspectDiff {
        split: req.split.as_str().into(),
        record: req.record,
        tau: req.tau,
        noise_scale: sgld.noise_scale,
        step_lambda: sgld.step_lambda,
        seed,
        initial_energy: traj.energies[0],
        final_energy: *traj.energies.last().expect("tau + 1 energies"),
        node_changes,
        edge_changes,
        rule_violations_before: rule_violations(&before, &data.rules).len(),
        rule_violations_after: rule_violations(&after, &data.rules).len(),
        gt_edges_recovered_before: recovered(&before, &record.labels),
        gt_edges_recovered_after: recovered(&after, &record.labels),
    };

    create_dir(out)?;
    let csv_path = out.join(trajectory_file(req.record, req.tau));
    let diff_path = out.join(format!("diff_r{}_tau{}.json", req.record, req.tau));
    let diff_bytes = to_pretty(&diff);
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&diff_path, &diff_bytes)?;

    #[derive(Serialize)]
    struct InspectIdentity<'a> {
        checkpoint_sha256: String,
        data: &'a Path,
        request: &'a InspectRequest,
        sgld: &'a SgldConfig,
    }
    let identity = InspectIdentity {
        checkpoint_sha256: sha256_hex(&read_bytes(ckpt_path)?),
        data: data_dir,
        request: req,
        sgld: &sgld,
    };
    let mut manifest = Manifest::new("inspect", argv, config_hash(&identity), seed);
    manifest.add(&csv_path, csv.as_bytes());
    manifest.add(&diff_path, &diff_bytes);
    let manifest_path = out.join(format!("manifest_r{}_tau{}.json", req.record, req.tau));
    manifest.write(&manifest_path)?;
    println!(
        "record {} tau {}: energy {:.6} -> {:.6}, {} node and {} edge label changes",
        req.record,
        req.tau,
        diff.initial_energy,
        diff.final_energy,
        diff.node_changes.len(),
        diff.edge_changes.len()
    );
    Ok((manifest_path, diff))
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tau: usize,
    pub final_total_loss: Option<f64>,
    pub max_abs_energy: Option<f64>,
    #[serde(rename = "R@20")]
    pub r20: Option<f64>,
    #[serde(rename = "mR@20")]
    pub mr20: Option<f64>,
    #[serde(rename = "zsR@20")]
    pub zsr20: Option<f64>,
    pub violation_rate: Option<f64>,
    pub inspect_initial_energy: f64,
    pub inspect_final_energy: f64,
    pub trajectory: PathBuf,
}

fn ablate(
    config: &Path,
    out: &Path,
    taus: &[usize],
    record: usize,
    argv: &[String],
    seed: Option<u64>,
) -> CliResult<PathBuf> {
    if taus.is_empty() {
        return Err(CliError::Config("--taus needs at least one value".into()));
    }
    let base = TrainJob::from_file(config, Mode::Ebm, None, seed)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut manifest = Manifest::new("ablate", argv, config_hash(&(&base, taus, record)), base.config.seed);
    for &tau in taus {
        let dir = out.join(format!("tau_{tau}"));
        let mut job = base.clone();
        job.config.sgld.tau = tau;
        println!("== tau {tau}");
        let (train_manifest, lines) = run_training(&job, &dir, None, argv)?;
        let ckpt = dir.join(LATEST);
        let setting = job.config.setting;
        let (eval_manifest, metrics) =
            eval(&ckpt, &job.data, Split::Test, Some(setting), &[20, 50, 100], None, argv, seed)?;
        let req = InspectRequest {
            split: Split::Test,
            record,
            tau,
            noise_scale: job.config.sgld.noise_scale,
            step_lambda: None,
        };
        let (inspect_manifest, diff) = inspect(&ckpt, &job.data, &req, &dir.join("inspect"), argv, seed)?;
        for m in [train_manifest, eval_manifest, inspect_manifest] {
            let sub: Manifest = read_json(&m)?;
            manifest.artifacts.extend(sub.artifacts);
            manifest.add_file(&m)?;
        }
        let at = metrics.at(20);
        let last = lines.last().map(|l| &l.losses);
        rows.push(AblationRow {
            tau,
            final_total_loss: last.map(|l| l.total),
            max_abs_energy: last.and_then(|l| l.max_abs_energy),
            r20: at.and_then(|a| a.r),
            mr20: at.and_then(|a| a.mr),
            zsr20: at.and_then(|a| a.zsr),
            violation_rate: metrics.violation_rate,
            inspect_initial_energy: diff.initial_energy,
            inspect_final_energy: diff.final_energy,
            trajectory: dir.join("inspect").join(trajectory_file(record, tau)),
        });
    }
    let json_path = out.join("ablation.json");
    let json = to_pretty(&rows);
    write_atomic(&json_path, &json)?;
    let mut csv = String::from("tau,final_total_loss,max_abs_energy,R@20,mR@20,zsR@20,violation_rate,inspect_initial_energy,inspect_final_energy\n");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.tau,
            cell(r.final_total_loss),
            cell(r.max_abs_energy),
            cell(r.r20),
            cell(r.mr20),
            cell(r.zsr20),
            cell(r.violation_rate),
            r.inspect_initial_energy,
            r.inspect_final_energy
        ));
    }
    let csv_path = out.join("ablation.csv");
    write_atomic(&csv_path, csv.as_bytes())?;
    manifest.add(&json_path, &json);
    manifest.add(&csv_path, csv.as_bytes());
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    println!("tau,R@20,mR@20,violation_rate");
    for r in &rows {
        println!("{},{},{},{}", r.tau, fmt_opt(r.r20), fmt_opt(r.mr20), fmt_opt(r.violation_rate));
    }
    Ok(manifest_path)
}

// ---------------------------------------------------------------- rerun

fn rerun(path: &Path) -> CliResult<PathBuf> {
    let recorded: Manifest = read_json(path)?;
    if recorded.command == "rerun" {
        return Err(CliError::Config("refusing to rerun a rerun".into()));
    }
    let cli = Cli::try_parse_from(std::iter::once("ebsg".to_string()).chain(recorded.argv.iter().cloned()))
        .map_err(|e| CliError::Config(format!("{}: recorded argv does not parse: {e}", path.display())))?;
    let written = execute(cli, &recorded.argv, Some(recorded.seed))?;
    let fresh: Manifest = read_json(&written)?;
    if fresh.config_sha256 != recorded.config_sha256 {
        return Err(CliError::Config("effective config differs from the recorded one".into()));
    }
    let changed: Vec<String> = recorded
        .artifacts
        .iter()
        .filter(|a| !fresh.artifacts.contains(a))
        .map(|a| a.path.display().to_string())
        .collect();
    if !changed.is_empty() || fresh.artifacts.len() != recorded.artifacts.len() {
        return Err(CliError::Config(format!("outputs differ from the manifest: {}", changed.join(", "))));
    }
    println!("reproduced: {} artifacts match {}", recorded.artifacts.len(), path.display());
    Ok(path.to_path_buf())
}
