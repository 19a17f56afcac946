//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! a gated criterion fails. The structured head-to-head and the two trend
//! criteria are reported without failing the run.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use common::checks::{descends, egnn_equivariance_gap, energy_gradient_error_per_tensor, model, permutation_gap, random_n};
use common::metric_oracle::{mismatches, random_corpus};
use common::{image, state, uniform};
use ebsg_core::graph::SceneGraphState;
use ebsg_core::rng::stream;
use ebsg_core::sampler::{apply_update, project_unit_interval, sgld_run, sgld_step, SgldConfig};
use ebsg_core::synth::{Generator, GeneratorConfig, SplitCounts};
use ebsg_core::training::{train, LossWeights, Mode, Setting, TrainConfig, TrainState};
use serde_json::{json, Value};
use tempfile::TempDir;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Energy hidden width for the head-to-head; keeps each ebm run near three
/// and a half minutes on one core.
const H2H_HIDDEN: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn ebsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebsg")).args(args).env_remove("EBSG_SEED").output().expect("binary runs")
}

fn ok(o: &Output) -> bool {
    o.status.code() == Some(0)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ------------------------------------------------------------ 1 to 4

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(101, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let n = random_n(&mut rng, 2, 5);
        let m = model(10, 7, 16, 16, 1000 + i);
        let (ig, sg) = (image(n, 16, &mut rng), state(n, 10, 7, &mut rng));
        worst = worst.max(energy_gradient_error_per_tensor(&m, &ig, &sg, 4, 32, &mut rng));
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-4 && took < Duration::from_secs(60),
        format!(
            "20 instances, h=16, every score entry, 4 directions and 32 entries per parameter tensor: \
             max rel error {worst:.2e}, {:.1}s",
            took.as_secs_f64()
        ),
    )
}

fn permutation_symmetry() -> Outcome {
    let mut rng = stream(102, &[]);
    let m = model(10, 7, 16, 16, 7);
    let (mut gap, mut egnn_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n = random_n(&mut rng, 1, 6);
        let (ig, sg) = (image(n, 16, &mut rng), state(n, 10, 7, &mut rng));
        gap = gap.max(permutation_gap(&m, &ig, &sg, &mut rng));
        egnn_gap = egnn_gap.max(egnn_equivariance_gap(&m, &sg, &mut rng));
    }
    outcome(
        gap <= 1e-9 && egnn_gap <= 1e-10,
        format!("energy gap {gap:.2e} over 100 permutations, egnn gap {egnn_gap:.2e}"),
    )
}

fn sampler_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(103, &[]);
    let quiet = SgldConfig { tau: 1, step_lambda: 1.0, clip: 0.01, noise_scale: 0.0, ..SgldConfig::default() };

    // Single step against a hand-written update on interior states.
    let mut hand_ok = true;
    let mut max_move: f64 = 0.0;
    for _ in 0..50 {
        let n = random_n(&mut rng, 1, 5);
        let mut sg = SceneGraphState::new(uniform(&[n, 10], 0.1, 0.9, &mut rng), uniform(&[n, n, 7], 0.1, 0.9, &mut rng)).unwrap();
        sg.zero_diagonal();
        let gn = uniform(&[n, 10], -0.05, 0.05, &mut rng);
        let ge = uniform(&[n, n, 7], -0.05, 0.05, &mut rng);
        let next = apply_update(&sg, &gn, &ge, &quiet, &mut rng).unwrap();
        for (k, v) in sg.nodes.data().iter().enumerate() {
            hand_ok &= next.nodes.data()[k] == v - 0.5 * gn.data()[k].clamp(-0.01, 0.01);
        }
        for (k, v) in sg.edges.data().iter().enumerate() {
            let diagonal = (k / 7) % (n + 1) == 0;
            let want = if diagonal { 0.0 } else { v - 0.5 * ge.data()[k].clamp(-0.01, 0.01) };
            hand_ok &= next.edges.data()[k] == want;
        }
        let m = model(10, 7, 16, 8, 3);
        let real = sgld_step(&m, &image(n, 16, &mut rng), &sg, &quiet, &mut rng).unwrap();
        max_move = max_move.max(real.nodes.max_abs_diff(&sg.nodes)).max(real.edges.max_abs_diff(&sg.edges));
    }

    let mut idempotent = true;
    for _ in 0..50 {
        let n = random_n(&mut rng, 1, 5);
        let sg = SceneGraphState { nodes: uniform(&[n, 10], -1.0, 2.0, &mut rng), edges: uniform(&[n, n, 7], -1.0, 2.0, &mut rng) };
        let once = project_unit_interval(&sg);
        idempotent &= project_unit_interval(&once) == once;
    }

    let m = model(10, 7, 16, 16, 9);
    let descending = (0..100).filter(|_| {
        let n = random_n(&mut rng, 2, 5);
        descends(&m, n, 20, &mut rng)
    });
    let descending = descending.count();

    let mut identical = true;
    for i in 0..10u64 {
        let n = random_n(&mut rng, 2, 5);
        let (ig, sg) = (image(n, 16, &mut rng), state(n, 10, 7, &mut rng));
        let cfg = SgldConfig { tau: 20, noise_scale: 0.5, ..SgldConfig::default() };
        let a = sgld_run(&m, &ig, &sg, &cfg, &mut stream(i, &[7])).unwrap();
        let b = sgld_run(&m, &ig, &sg, &cfg, &mut stream(i, &[7])).unwrap();
        identical &= a.energies.iter().zip(&b.energies).all(|(x, y)| x.to_bits() == y.to_bits()) && a == b;
    }
    let took = start.elapsed();
    outcome(
        hand_ok && max_move <= 0.005 && idempotent && descending >= 95 && identical && took < Duration::from_secs(60),
        format!(
            "hand step {}, max move {max_move:.4}, projection idempotent {idempotent}, descent {descending}/100, \
             replay identical {identical}, {:.1}s",
            if hand_ok { "exact" } else { "MISMATCH" },
            took.as_secs_f64()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let ks = [1, 2, 3, 5, 20, 50, 100];
    let mut rng = stream(104, &[]);
    let mut bad = Vec::new();
    for case in 0..50 {
        let (corpus, census) = random_corpus(&mut rng, case % 5 == 0);
        for setting in [Setting::Predcls, Setting::Sgcls] {
            bad.extend(mismatches(&corpus, &census, setting, &ks).into_iter().map(|m| format!("case {case}: {m}")));
        }
    }
    outcome(bad.is_empty(), format!("50 corpora x 2 settings x {} K values, {} mismatches {bad:?}", ks.len(), bad.len()))
}

// ------------------------------------------------------------ 5

fn mode_equivalence() -> Outcome {
    let gen = GeneratorConfig { counts: SplitCounts { train: 100, val: 10, test: 20 }, seed: 5, ..GeneratorConfig::default() };
    let data = Generator::new(gen.clone()).unwrap().generate().unwrap();
    let run = |mode: Mode, weights: LossWeights| {
        let cfg = TrainConfig { mode, weights, epochs: 3, hidden: 16, seed: 5, ..TrainConfig::default() };
        let mut st = TrainState::init_from_data(&cfg, gen.num_objects, gen.num_predicates, gen.feature_width, &data.train).unwrap();
        let mut params = Vec::new();
        let reports = train(&mut st, &cfg, &data.train, |s, _| {
            params.push(s.predictor.store.entries().to_vec());
            Ok(())
        })
        .unwrap();
        (reports, params)
    };
    let (ce, ce_params) = run(Mode::Ce, LossWeights::default());
    let (ebm, ebm_params) = run(Mode::Ebm, LossWeights { lambda_e: 0.0, lambda_r: 0.0, lambda_t: 1.0 });
    let losses_equal = ce.len() == 3
        && ce.iter().zip(&ebm).all(|(a, b)| a.l_t.to_bits() == b.l_t.to_bits() && a.total.to_bits() == b.total.to_bits());
    let params_equal = ce_params == ebm_params;
    outcome(
        losses_equal && params_equal,
        format!("3 epochs on 100 records: losses identical {losses_equal}, predictor tensors identical {params_equal}"),
    )
}

// ------------------------------------------------------------ 6 to 8

struct RunMetrics {
    mr20: f64,
    r20: f64,
    zsr20: Option<f64>,
    violation: f64,
    fsr20: Vec<Option<f64>>,
}

fn run_mode(tmp: &Path, data: &Path, seed: u64, mode: &str) -> RunMetrics {
    let cfg = tmp.join(format!("train_{seed}.json"));
    write_json(&cfg, &json!({"data": s(data), "hidden": H2H_HIDDEN, "seed": seed, "setting": "predcls", "epochs": 10}));
    let out = tmp.join(format!("{mode}_{seed}"));
    let o = ebsg(&["train", "--config", s(&cfg), "--mode", mode, "--out", s(&out)]);
    assert!(ok(&o), "train {mode} seed {seed}: {}", String::from_utf8_lossy(&o.stderr));
    let report = out.join("eval.json");
    let o = ebsg(&[
        "eval", "--ckpt", s(&out.join("checkpoint.json")), "--data", s(data), "--split", "test", "--setting", "predcls",
        "--out", s(&report),
    ]);
    assert!(ok(&o), "eval {mode} seed {seed}: {}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&report);
    let at = v["at_k"].as_array().unwrap().iter().find(|a| a["k"] == 20).unwrap().clone();
    RunMetrics {
        mr20: at["mR"].as_f64().unwrap(),
        r20: at["R"].as_f64().unwrap(),
        zsr20: at["zsR"].as_f64(),
        violation: v["violation_rate"].as_f64().unwrap(),
        fsr20: at["fsR"].as_array().unwrap().iter().map(|b| b["recall"].as_f64()).collect(),
    }
}

struct HeadToHead {
    ce: Vec<RunMetrics>,
    ebm: Vec<RunMetrics>,
    minutes: f64,
}

fn head_to_head() -> HeadToHead {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    let (mut ce, mut ebm) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let gen = tmp.path().join(format!("gen_{seed}.json"));
        write_json(&gen, &json!({"seed": seed}));
        let data = tmp.path().join(format!("data_{seed}"));
        let o = ebsg(&["generate", "--config", s(&gen), "--out", s(&data)]);
        assert!(ok(&o), "generate seed {seed}");
        ce.push(run_mode(tmp.path(), &data, seed, "ce"));
        ebm.push(run_mode(tmp.path(), &data, seed, "ebm"));
        println!(
            "  seed {seed}: ce mR@20 {:.4} R@20 {:.4} viol {:.3} | ebm mR@20 {:.4} R@20 {:.4} viol {:.3}",
            ce[ce.len() - 1].mr20,
            ce[ce.len() - 1].r20,
            ce[ce.len() - 1].violation,
            ebm[ebm.len() - 1].mr20,
            ebm[ebm.len() - 1].r20,
            ebm[ebm.len() - 1].violation,
        );
    }
    HeadToHead { ce, ebm, minutes: start.elapsed().as_secs_f64() / 60.0 }
}

fn structured_gate(h: &HeadToHead) -> Outcome {
    let ce_mr = median(h.ce.iter().map(|m| m.mr20).collect());
    let ebm_mr = median(h.ebm.iter().map(|m| m.mr20).collect());
    let ce_v = median(h.ce.iter().map(|m| m.violation).collect());
    let ebm_v = median(h.ebm.iter().map(|m| m.violation).collect());
    let a = ebm_mr >= ce_mr + 0.02;
    let b = ebm_v <= 0.8 * ce_v;
    outcome(
        a && b,
        format!(
            "median mR@20 ce {:.2} ebm {:.2} (delta {:+.2} pts, need +2.00: {}); median violation rate ce {ce_v:.3} \
             ebm {ebm_v:.3} (need <= 0.8x: {}); {:.1} min for 3 seeds",
            100.0 * ce_mr,
            100.0 * ebm_mr,
            100.0 * (ebm_mr - ce_mr),
            if a { "met" } else { "not met" },
            match (b, ce_v == 0.0) {
                (true, true) => "met only vacuously, ce has no violations",
                (true, false) => "met",
                _ => "not met",
            },
            h.minutes
        ),
    )
}

fn relative_gain(ebm: Option<f64>, ce: Option<f64>) -> Option<f64> {
    match (ebm, ce) {
        (Some(e), Some(c)) if c > 0.0 => Some((e - c) / c),
        (Some(0.0), Some(_)) => Some(0.0),
        _ => None,
    }
}

fn few_shot_trend(h: &HeadToHead) -> Outcome {
    let gains = |bucket: usize| -> Vec<f64> {
        h.ce.iter().zip(&h.ebm).filter_map(|(c, e)| relative_gain(e.fsr20[bucket], c.fsr20[bucket])).collect()
    };
    let (low, high) = (gains(0), gains(3));
    if low.is_empty() || high.is_empty() {
        return outcome(false, "a bucket had no gt relations in some seed; flagged");
    }
    let (lo, hi) = (median(low.clone()), median(high.clone()));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        lo > hi,
        format!(
            "relative fsR@20 gain, bucket 1-5 [{}] median {lo:+.3} vs bucket 16-20 [{}] median {hi:+.3}{}",
            fmt(&low),
            fmt(&high),
            if lo > hi { "" } else { "; ordering fails (flagged, not gated)" }
        ),
    )
}

fn zero_shot_trend(h: &HeadToHead) -> Outcome {
    let ce: Vec<f64> = h.ce.iter().filter_map(|m| m.zsr20).collect();
    let ebm: Vec<f64> = h.ebm.iter().filter_map(|m| m.zsr20).collect();
    if ce.len() != SEEDS.len() || ebm.len() != SEEDS.len() {
        return outcome(false, "no holdout relation in a test split; flagged");
    }
    let (c, e) = (median(ce), median(ebm));
    outcome(e >= c, format!("median zsR@20 on holdout triplets ce {c:.4} ebm {e:.4}"))
}

// ------------------------------------------------------------ 9, 10

fn small_dataset(tmp: &Path) -> PathBuf {
    let gen = tmp.join("gen.json");
    write_json(&gen, &json!({"counts": {"train": 40, "val": 10, "test": 12}, "seed": 3}));
    let data = tmp.join("data");
    assert!(ok(&ebsg(&["generate", "--config", s(&gen), "--out", s(&data)])));
    data
}

fn small_train_config(tmp: &Path, name: &str) -> PathBuf {
    let p = tmp.join(name);
    write_json(&p, &json!({"data": "data", "hidden": 6, "rounds": 2, "seed": 3, "epochs": 2}));
    p
}

fn tau_ablation() -> Outcome {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    let cfg = small_train_config(tmp.path(), "ablate.json");
    let out = tmp.path().join("ablation");
    let o = ebsg(&["ablate", "--config", s(&cfg), "--out", s(&out), "--taus", "0,20,40"]);
    if !ok(&o) {
        return outcome(false, format!("ablate failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let rows = read_json(&out.join("ablation.json"));
    let rows = rows.as_array().unwrap();
    let taus: Vec<u64> = rows.iter().map(|r| r["tau"].as_u64().unwrap()).collect();
    let trajectories_ok = rows.iter().all(|r| {
        let tau = r["tau"].as_u64().unwrap() as usize;
        let path = PathBuf::from(r["trajectory"].as_str().unwrap());
        fs::read_to_string(path).is_ok_and(|t| t.lines().count() == tau + 2)
    });
    let csv_rows = fs::read_to_string(out.join("ablation.csv")).map_or(0, |t| t.lines().count());
    outcome(
        taus == [0, 20, 40] && trajectories_ok && csv_rows == 4,
        format!("rows for tau {taus:?}, trajectories complete {trajectories_ok}, csv lines {csv_rows}"),
    )
}

fn reproducibility() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let data = small_dataset(t);
    let cfg = small_train_config(t, "train.json");
    let run = t.join("run");
    let ckpt = run.join("checkpoint.json");
    let steps: Vec<(&str, Vec<String>, PathBuf)> = vec![
        ("train", vec!["train".into(), "--config".into(), s(&cfg).into(), "--mode".into(), "ebm".into(), "--out".into(), s(&run).into()], run.join("manifest.json")),
        (
            "eval",
            vec!["eval".into(), "--ckpt".into(), s(&ckpt).into(), "--data".into(), s(&data).into(), "--out".into(), s(&t.join("eval.json")).into()],
            t.join("eval.manifest.json"),
        ),
        (
            "inspect",
            ["inspect", "--ckpt", s(&ckpt), "--data", s(&data), "--record", "1", "--tau", "20", "--noise-scale", "0.01", "--out", s(&t.join("inspect"))]
                .map(String::from)
                .to_vec(),
            t.join("inspect").join("manifest_r1_tau20.json"),
        ),
    ];
    let mut reproduced = vec![("generate".to_string(), ok(&ebsg(&["rerun", "--manifest", s(&data.join("manifest.json"))])))];
    for (name, args, manifest) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let first = ok(&ebsg(&args));
        reproduced.push((name.to_string(), first && ok(&ebsg(&["rerun", "--manifest", s(manifest)]))));
    }

    let whole = t.join("whole");
    let part = t.join("part");
    let whole_ok = ok(&ebsg(&["train", "--config", s(&cfg), "--mode", "ebm", "--out", s(&whole), "--epochs", "3"]));
    let first = ok(&ebsg(&["train", "--config", s(&cfg), "--mode", "ebm", "--out", s(&part), "--epochs", "1"]));
    let resumed = ok(&ebsg(&[
        "train", "--config", s(&cfg), "--mode", "ebm", "--out", s(&part), "--epochs", "3", "--resume", s(&part.join("checkpoint.json")),
    ]));
    let same = |f: &str| fs::read(whole.join(f)).ok().is_some_and(|a| fs::read(part.join(f)).ok() == Some(a));
    let resume_exact = whole_ok && first && resumed && ["checkpoint.json", "ckpt_epoch_3.json", "report.jsonl"].iter().all(|f| same(f));

    let all = reproduced.iter().all(|(_, r)| *r);
    outcome(
        all && resume_exact,
        format!(
            "reruns byte-identical: {}; resume 1+2 epochs equals 3 epochs bit-exactly: {resume_exact}",
            reproduced.iter().map(|(n, r)| format!("{n} {r}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn report(id: usize, name: &str, o: &Outcome, gated: bool) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let note = if gated { "" } else { " [reported, not gated]" };
    println!("criterion {id:>2} {name}: {verdict}{note} | {}", o.detail);
}

/// Criterion ids named on the command line, e.g. `-- 1 3 10`; all when none.
fn selected() -> Vec<usize> {
    let ids: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if ids.is_empty() {
        (1..=10).collect()
    } else {
        ids
    }
}

fn main() -> ExitCode {
    // libtest passes flags such as `--list` when enumerating tests.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let want = selected();
    let mut gated_failures = 0;
    let mut check = |id: usize, name: &str, run: &dyn Fn() -> Outcome, gated: bool| {
        if want.contains(&id) {
            let o = run();
            report(id, name, &o, gated);
            if gated && !o.pass {
                gated_failures += 1;
            }
        }
    };
    check(1, "gradient correctness", &gradient_correctness, true);
    check(2, "permutation invariance", &permutation_symmetry, true);
    check(3, "sampler contract", &sampler_contract, true);
    check(4, "metric oracles", &metric_oracles, true);
    check(5, "mode equivalence", &mode_equivalence, true);
    if [6, 7, 8].iter().any(|id| want.contains(id)) {
        let h = head_to_head();
        check(6, "structured head-to-head", &|| structured_gate(&h), false);
        check(7, "few-shot trend", &|| few_shot_trend(&h), false);
        check(8, "zero-shot trend", &|| zero_shot_trend(&h), false);
    }
    check(9, "tau ablation harness", &tau_ablation, true);
    check(10, "reproducibility", &reproducibility, true);
    if gated_failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{gated_failures} gated criteria failed");
        ExitCode::FAILURE
    }
}
