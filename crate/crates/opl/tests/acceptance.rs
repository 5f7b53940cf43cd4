//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2, 6, 7 and 8 are correctness properties: a FAIL there
//! exits nonzero. Criteria 3, 4 and 5 score calibrated training outcomes
//! at pinned hyperparameters; their lines report the measured values and
//! the verdict against the fixed thresholds without aborting the run.

use std::fs;
use std::path::Path;
use std::time::Instant;

use opl::analysis;
use opl::commands::{self, DatagenArgs, EvalArgs, GradcheckArgs, ModeChoice, Split, TrainArgs};
use opl::config::{MetricOptions, RunConfig};
use opl::format;
use opl::hash::content_hash;
use opl_core::autodiff::eval_eager;
use opl_core::linalg::{self, frobenius_sq, matmul, qr_thin};
use opl_core::metrics::{self, ArdOptions};
use opl_core::model::{BasisMode, FrozenNetwork, Placement};
use opl_core::objectives::{AttributeBatch, Batch, NetworkObjective};
use opl_core::synth::{self, LabeledDataset, SynthSpec, SyntheticData};
use opl_core::train::{self, TrainConfig, TrainObserver};
use opl_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: u64 = 5;

#[derive(Default)]
struct Tally {
    hard_failures: usize,
    soft_failures: usize,
}

impl Tally {
    fn line(&mut self, id: &str, hard: bool, pass: bool, detail: String, started: Instant) {
        if !pass {
            if hard {
                self.hard_failures += 1;
            } else {
                self.soft_failures += 1;
            }
        }
        println!(
            "criterion {:<16} {}  {}  [{:.1}s]",
            id,
            if pass { "PASS" } else { "FAIL" },
            detail,
            started.elapsed().as_secs_f64()
        );
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn fro(m: &Matrix) -> f64 {
    frobenius_sq(m).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Thin QR and projector identities on random full-rank instances.
fn criterion_1(t: &mut Tally) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut qr_worst, mut proj_worst) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let d = if i < 10 {
            1024
        } else {
            rng.random_range(2..=1024)
        };
        let k = if i < 10 {
            16
        } else {
            rng.random_range(1..=16.min(d - 1))
        };
        let m = gaussian(d, k, &mut rng);
        let f = qr_thin(&m).unwrap();
        let recon = fro(&linalg::sub(&matmul(&f.q, &f.r).unwrap(), &m).unwrap()) / fro(&m);
        qr_worst = qr_worst.max(recon).max(linalg::orthonormality_defect(&f.q));
        let x: Vec<f64> = gaussian(1, d, &mut rng).into_data();
        let nx2: f64 = x.iter().map(|v| v * v).sum();
        let px = linalg::project_out(&f.q, &x).unwrap();
        let ppx = linalg::project_out(&f.q, &px).unwrap();
        let rest: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
        let n2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let idem = px
            .iter()
            .zip(&ppx)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / nx2.sqrt();
        let pyth = (nx2 - n2(&px) - n2(&rest)).abs() / nx2;
        let orth = linalg::dot(&px, &rest).abs() / nx2;
        // Symmetry: <P x, y> = <x, P y>.
        let y: Vec<f64> = gaussian(1, d, &mut rng).into_data();
        let py = linalg::project_out(&f.q, &y).unwrap();
        let sym =
            (linalg::dot(&px, &y) - linalg::dot(&x, &py)).abs() / (nx2.sqrt() * n2(&y).sqrt());
        proj_worst = proj_worst.max(idem).max(pyth).max(orth).max(sym);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = qr_worst <= 1e-10 && proj_worst <= 1e-9 && secs < 10.0;
    t.line(
        "1 linalg",
        true,
        pass,
        format!(
            "qr residual {:.2e} (<= 1e-10), projector residual {:.2e} (<= 1e-9)",
            qr_worst, proj_worst
        ),
        start,
    );
}

/// Gradient check through the command entry point, both basis modes.
fn criterion_2(t: &mut Tally) {
    let start = Instant::now();
    let args = GradcheckArgs {
        d: 10,
        t: 3,
        s: 2,
        k: 2,
        placement: "G1O1".parse().unwrap(),
        n: 40,
        lambda_face: 1.0,
        lambda_orth: 1.0,
        mode: ModeChoice::Both,
        seed: 0,
        out: Some(std::env::temp_dir().join(format!(
            "opl-acceptance-gradcheck-{}.json",
            std::process::id()
        ))),
    };
    let res = commands::gradcheck(&args);
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match &res {
        Ok(rs) => {
            let worst = rs
                .iter()
                .map(|r| r.report.max_rel_error)
                .fold(0.0, f64::max);
            (
                rs.len() == 2
                    && rs
                        .iter()
                        .all(|r| r.report.pass && r.report.max_rel_error <= 1e-4)
                    && secs < 60.0,
                format!(
                    "max rel error {:.2e} over recompute_qr and direct_q (<= 1e-4)",
                    worst
                ),
            )
        }
        Err(e) => (false, format!("error: {}", e)),
    };
    t.line("2 gradcheck", true, pass, detail, start);
}

struct RunOutcome {
    network: FrozenNetwork,
    auc: f64,
}

fn run(data: &SyntheticData, placement: Placement, k: Option<usize>, seed: u64) -> RunOutcome {
    let cfg = TrainConfig {
        placement,
        k_gopl: k,
        lambda_face: 1e-3,
        lambda_orth: 1e-3,
        max_epochs: 100,
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    };
    let ck = train::train(&cfg, &data.train, None).unwrap();
    let auc = train::evaluate(&ck.network, &data.test.features, &data.test.labels)
        .unwrap()
        .auc;
    RunOutcome {
        network: ck.network,
        auc,
    }
}

fn planted(seed: u64) -> SyntheticData {
    synth::generate(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// Suppression, utility and ablation criteria share one set of runs.
fn criteria_3_to_5(t: &mut Tally) {
    let g1o0 = Placement {
        guided: 1,
        plain: 0,
    };
    let g0o0 = Placement {
        guided: 0,
        plain: 0,
    };
    let opts = MetricOptions::default();
    let ks = [2usize, 4, 8, 16, 32];

    let start3 = Instant::now();
    let (mut align, mut ssc, mut fpd, mut raw) = (vec![], vec![], vec![], vec![]);
    let mut datasets = vec![];
    let mut at_k: Vec<Vec<RunOutcome>> = ks.iter().map(|_| vec![]).collect();
    for seed in 0..SEEDS {
        let data = planted(seed);
        let r = run(&data, g1o0, Some(4), seed);
        let rep =
            analysis::evaluate_network(&r.network, &data.test, Some(&data.truth), None, &opts)
                .unwrap();
        let probe = analysis::probe_network(&r.network, &data.test, &opts).unwrap();
        align.push(rep.metrics.subspace_alignment.unwrap());
        ssc.push(rep.metrics.ssc.unwrap());
        fpd.push(probe.fpd);
        raw.push(probe.raw_accuracy);
        at_k[1].push(r);
        datasets.push(data);
    }
    let secs = start3.elapsed().as_secs_f64();
    let (a, s, f, r) = (mean(&align), mean(&ssc), mean(&fpd), mean(&raw));
    let pass = a >= 0.9 && s >= 0.8 && r - f >= 0.25 && r >= 0.9 && secs < 300.0;
    t.line(
        "3 suppression",
        false,
        pass,
        format!(
            "alignment {:.3} (>= 0.9), ssc {:.3} (>= 0.8), fpd {:.3} vs raw {:.3}: drop {:.3} (>= 0.25)",
            a,
            s,
            f,
            r,
            r - f
        ),
        start3,
    );

    let start4 = Instant::now();
    let mut base_auc = vec![];
    let mut baselines = vec![];
    for (seed, data) in datasets.iter().enumerate() {
        let b = run(data, g0o0, None, seed as u64);
        base_auc.push(b.auc);
        baselines.push(b.network);
        at_k[4].push(run(data, g1o0, Some(32), seed as u64));
    }
    let ard_vs_base = |runs: &[RunOutcome]| -> f64 {
        let v: Vec<f64> = runs
            .iter()
            .zip(&baselines)
            .zip(&datasets)
            .map(|((r, b), d)| {
                let bs = b.inference_forward(&d.test.features).unwrap();
                let ps = r.network.inference_forward(&d.test.features).unwrap();
                metrics::ard(&bs, &ps, ArdOptions::default()).unwrap().value
            })
            .collect();
        mean(&v)
    };
    let auc4 = mean(&at_k[1].iter().map(|r| r.auc).collect::<Vec<_>>());
    let auc0 = mean(&base_auc);
    let (ard4, ard32) = (ard_vs_base(&at_k[1]), ard_vs_base(&at_k[4]));
    let pass = (auc4 - auc0).abs() <= 0.05 && ard4 < ard32;
    t.line(
        "4 utility",
        false,
        pass,
        format!(
            "auc G1O0 {:.4} vs G0O0 {:.4} (|gap| <= 0.05); ard k=4 {:.4} < ard k=32 {:.4}",
            auc4, auc0, ard4, ard32
        ),
        start4,
    );

    let start5 = Instant::now();
    for (i, &k) in ks.iter().enumerate() {
        if at_k[i].is_empty() {
            for (seed, data) in datasets.iter().enumerate() {
                at_k[i].push(run(data, g1o0, Some(k), seed as u64));
            }
        }
    }
    let aucs: Vec<f64> = at_k
        .iter()
        .map(|rs| mean(&rs.iter().map(|r| r.auc).collect::<Vec<_>>()))
        .collect();
    let table: Vec<String> = ks
        .iter()
        .zip(&aucs)
        .map(|(k, a)| format!("k={}:{:.4}", k, a))
        .collect();
    t.line(
        "5 ablation",
        false,
        aucs[1] > aucs[4],
        format!(
            "auc at k=4 {:.4} > k=32 {:.4}; sweep {}",
            aucs[1],
            aucs[4],
            table.join(" ")
        ),
        start5,
    );

    // Monitored invariant of the direct parameterization on the same data.
    let start = Instant::now();
    let mut grew = 0;
    let (mut first, mut last) = (vec![], vec![]);
    for (seed, data) in datasets.iter().enumerate() {
        let cfg = TrainConfig {
            mode: BasisMode::DirectQ,
            k_gopl: Some(4),
            max_epochs: 100,
            eval_every: 0,
            seed: seed as u64,
            ..TrainConfig::default()
        };
        let ck = train::train(&cfg, &data.train, None).unwrap();
        let fin = ck.curve.last().unwrap().orth_defect;
        if fin > ck.initial_orth_defect {
            grew += 1;
        }
        first.push(ck.initial_orth_defect);
        last.push(fin);
    }
    t.line(
        "inv direct_q",
        false,
        grew == 0,
        format!(
            "direct_q defect final <= initial on {}/{} seeds (mean {:.2e} -> {:.3})",
            SEEDS as usize - grew,
            SEEDS,
            mean(&first),
            mean(&last)
        ),
        start,
    );
}

/// Collects parameters after every optimizer step.
#[derive(Default)]
struct Trajectory(Vec<Vec<Matrix>>);

impl TrainObserver for Trajectory {
    fn step_done(&mut self, _epoch: usize, _batch: usize, params: &[Matrix]) {
        self.0.push(params.to_vec());
    }
}

fn scramble_absent(ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> LabeledDataset {
    let mut out = ds.clone();
    for i in (0..ds.len()).filter(|&i| !ds.presence[i]) {
        for j in 0..ds.dim() {
            out.attributes
                .set(i, j, 1e3 * rng.sample::<f64, _>(StandardNormal))
                .unwrap();
        }
    }
    out
}

/// Absent-row attributes change neither the loss nor one epoch of training.
fn criterion_6(t: &mut Tally) {
    let start = Instant::now();
    let data = planted(0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noisy = scramble_absent(&data.train, &mut rng);
    let cfg = TrainConfig {
        placement: Placement {
            guided: 1,
            plain: 1,
        },
        k_gopl: Some(4),
        k_opl: Some(2),
        lambda_face: 1e-3,
        lambda_orth: 1e-3,
        max_epochs: 1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let net = train::initial_network(&cfg, data.train.dim()).unwrap();
    let loss = |ds: &LabeledDataset| {
        let batch = Batch {
            features: ds.features.clone(),
            labels: ds.labels.clone(),
            attributes: vec![AttributeBatch {
                embeddings: ds.attributes.clone(),
                mask: ds.presence.clone(),
            }],
        };
        let obj = NetworkObjective {
            network: &net,
            batch: &batch,
            weights: cfg.weights(),
        };
        eval_eager(&obj, &net.params()).unwrap()
    };
    let dl = (loss(&data.train) - loss(&noisy)).abs();
    let mut a = Trajectory::default();
    let mut b = Trajectory::default();
    let ca = train::train_observed(&cfg, &data.train, None, &mut a).unwrap();
    let cb = train::train_observed(&cfg, &noisy, None, &mut b).unwrap();
    let bits = |ps: &[Vec<Matrix>]| -> Vec<u64> {
        ps.iter()
            .flatten()
            .flat_map(|m| m.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    let identical = !a.0.is_empty() && bits(&a.0) == bits(&b.0) && ca == cb;
    t.line(
        "6 gating",
        true,
        dl <= 1e-12 && identical,
        format!(
            "loss change {:.1e} (<= 1e-12); {} steps bit-identical: {}",
            dl,
            a.0.len(),
            identical
        ),
        start,
    );
}

/// Metric oracles.
fn criterion_7(t: &mut Tally) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..50);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 * 0.1)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut twice, mut p, mut q) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if labels[i] {
                p += 1;
                for j in 0..n {
                    if !labels[j] {
                        twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                            std::cmp::Ordering::Greater => 2,
                            std::cmp::Ordering::Equal => 1,
                            std::cmp::Ordering::Less => 0,
                        };
                    }
                }
            } else {
                q += 1;
            }
        }
        if metrics::roc_auc(&scores, &labels).unwrap() != twice as f64 / (2 * p * q) as f64 {
            mismatches += 1;
        }
    }
    let x: Vec<f64> = (0..500)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let self_ard = metrics::ard(&x, &x, ArdOptions::default()).unwrap().value;
    // Two bins: (1/2, 1/2) against (1/4, 3/4).
    let kl = metrics::ard(
        &[0.0, 1.0],
        &[0.0, 1.0, 1.0, 1.0],
        ArdOptions {
            bins: 2,
            eps: 1e-12,
        },
    )
    .unwrap()
    .value;
    let ppc = metrics::privacy_per_cost(0.42, 0.28, 1.0, 1.6).unwrap();
    let pass = mismatches == 0
        && self_ard == 0.0
        && (kl - 0.143841).abs() <= 1e-6
        && (ppc - 0.2333).abs() <= 5e-4;
    t.line(
        "7 metrics",
        true,
        pass,
        format!(
            "auc mismatches {}/1000, ard(x,x) {}, two-bin kl {:.6}, privacy_per_cost {:.4}",
            mismatches, self_ard, kl, ppc
        ),
        start,
    );
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Repeated runs are bit-identical; scoring never depends on attributes.
fn criterion_8(t: &mut Tally) {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("config.json");
    let mut cfg = RunConfig::default();
    cfg.train.max_epochs = 5;
    cfg.train.eval_every = 2;
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let mut trees = vec![];
    let mut reports = vec![];
    for rep in 0..2 {
        let root = tmp.path().join(format!("run{}", rep));
        let data = root.join("data");
        let ck = root.join("ck");
        commands::datagen(&DatagenArgs {
            config: Some(cfg_path.clone()),
            out: data.clone(),
            seed: None,
            csv: false,
        })
        .unwrap();
        commands::train_cmd(&TrainArgs {
            config: Some(cfg_path.clone()),
            data: data.clone(),
            out: ck.clone(),
            seed: None,
            report: Some(root.join("train.json")),
        })
        .unwrap();
        commands::eval(&EvalArgs {
            checkpoint: ck,
            data,
            baseline: None,
            config: Some(cfg_path.clone()),
            split: Split::Test,
            scores: true,
            out: Some(root.join("eval.json")),
        })
        .unwrap();
        reports.push(fs::read(root.join("eval.json")).unwrap());
        trees.push(dir_bytes(&root));
    }
    let deterministic = trees[0] == trees[1];

    // Interface: the inference entry point takes features only.
    let _: fn(&FrozenNetwork, &Matrix) -> opl_core::Result<Vec<f64>> =
        FrozenNetwork::inference_forward;
    // Report hash: rewrite attributes and presence of the scored split.
    let root = tmp.path().join("run0");
    let loaded = opl::checkpoint::load_checkpoint(&root.join("ck")).unwrap();
    let ds = opl::dataset::Dataset::open(&root.join("data")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut forged = ds.test.clone();
    forged.attributes = gaussian(forged.len(), forged.dim(), &mut rng);
    forged.presence.iter_mut().for_each(|p| *p = !*p);
    let score_hash = |d: &LabeledDataset| {
        let s = loaded
            .checkpoint
            .network
            .inference_forward(&d.features)
            .unwrap();
        content_hash([format::encode(&Matrix::column(&s).unwrap()).as_slice()])
    };
    let pure = score_hash(&ds.test) == score_hash(&forged);
    t.line(
        "8 determinism",
        true,
        deterministic && pure,
        format!(
            "two runs bit-identical over {} files: {}; eval report hash {}; score hash invariant to attributes: {}",
            trees[0].len(),
            deterministic,
            &content_hash([reports[0].as_slice()])[..16],
            pure
        ),
        start,
    );
}

fn main() {
    // `cargo test -- --list` and filters pass through here; run the suite
    // only for a plain invocation or an explicit `acceptance` filter.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut t = Tally::default();
    criterion_1(&mut t);
    criterion_2(&mut t);
    criterion_6(&mut t);
    criterion_7(&mut t);
    criterion_8(&mut t);
    criteria_3_to_5(&mut t);
    println!(
        "acceptance: {} correctness failures, {} calibrated-outcome failures",
        t.hard_failures, t.soft_failures
    );
    if t.hard_failures > 0 {
        std::process::exit(1);
    }
}
