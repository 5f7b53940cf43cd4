//! Command-line behaviour: exit statuses, determinism and file round trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use opl::analysis::EvalReport;
use opl::checkpoint::{load_checkpoint, save_checkpoint};
use opl::dataset::Dataset;
use opl::format;
use opl_core::synth::{self, SynthSpec};
use opl_core::train::{self, TrainConfig};
use opl_core::Matrix;
use proptest::prelude::*;

fn opl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OPL_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = r#"{
  "schema_version": 1,
  "data": { "d": 12, "t": 3, "s": 2, "n_train": 120, "n_test": 80 },
  "train": { "k_gopl": 2, "max_epochs": 3, "eval_every": 1 }
}"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    (tmp, cfg)
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((
                p.strip_prefix(root).unwrap().to_path_buf(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn datagen_is_byte_deterministic() {
    let (tmp, _) = setup();
    for d in ["a", "b"] {
        ok(&opl(
            &["datagen", "--config", "cfg.json", "--out", d, "--csv"],
            tmp.path(),
        ));
    }
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert!(a.iter().any(|(p, _)| p.ends_with("train.csv")));
    assert_eq!(a, b);
    ok(&opl(
        &[
            "datagen", "--config", "cfg.json", "--out", "c", "--seed", "1",
        ],
        tmp.path(),
    ));
    assert_ne!(
        fs::read(tmp.path().join("a/train/features.oplm")).unwrap(),
        fs::read(tmp.path().join("c/train/features.oplm")).unwrap()
    );
}

#[test]
fn configuration_errors_exit_with_status_2() {
    let (tmp, _) = setup();
    fs::write(
        tmp.path().join("bad.json"),
        r#"{"schema_version": 1, "train": {"lr": 0.1}}"#,
    )
    .unwrap();
    let out = opl(
        &["datagen", "--config", "bad.json", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
    fs::write(tmp.path().join("nov.json"), r#"{"data": {}}"#).unwrap();
    assert_eq!(
        opl(
            &["datagen", "--config", "nov.json", "--out", "x"],
            tmp.path()
        )
        .status
        .code(),
        Some(2)
    );
    fs::write(
        tmp.path().join("neg.json"),
        r#"{"schema_version": 1, "train": {"lambda_face": -1}}"#,
    )
    .unwrap();
    assert_eq!(
        opl(
            &["datagen", "--config", "neg.json", "--out", "x"],
            tmp.path()
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        opl(&["train", "--bogus"], tmp.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        opl(&["sweep", "--grid", "width=3", "--out", "s"], tmp.path())
            .status
            .code(),
        Some(2)
    );
    // Missing inputs are runtime failures.
    assert_eq!(
        opl(&["train", "--data", "missing", "--out", "ck"], tmp.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn train_eval_probe_round_trip() {
    let (tmp, _) = setup();
    let run = |args: &[&str]| ok(&opl(args, tmp.path()));
    run(&["datagen", "--config", "cfg.json", "--out", "data"]);
    run(&[
        "train",
        "--config",
        "cfg.json",
        "--data",
        "data",
        "--out",
        "ck",
        "--report",
        "train.json",
    ]);
    run(&[
        "train", "--config", "cfg.json", "--data", "data", "--out", "ck2",
    ]);
    assert_eq!(
        files(&tmp.path().join("ck")),
        files(&tmp.path().join("ck2"))
    );
    run(&[
        "eval",
        "--checkpoint",
        "ck",
        "--data",
        "data",
        "--scores",
        "--out",
        "eval.json",
    ]);
    run(&[
        "eval",
        "--checkpoint",
        "ck",
        "--data",
        "data",
        "--scores",
        "--out",
        "eval2.json",
    ]);
    let text = fs::read_to_string(tmp.path().join("eval.json")).unwrap();
    assert_eq!(
        text,
        fs::read_to_string(tmp.path().join("eval2.json")).unwrap()
    );
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["command"], "eval");
    assert_eq!(doc["config"]["ard"]["bins"], 32);
    assert_eq!(doc["input_hash"].as_str().unwrap().len(), 64);
    let report: EvalReport = serde_json::from_value(doc["result"].clone()).unwrap();
    assert!(report.metrics.subspace_alignment.is_some());
    assert_eq!(report.scores.as_ref().unwrap().len(), 80);

    // Scores from the reloaded checkpoint equal a fresh in-process run.
    let ds = Dataset::open(&tmp.path().join("data")).unwrap();
    let mut cfg = TrainConfig {
        k_gopl: Some(2),
        max_epochs: 3,
        eval_every: 1,
        ..TrainConfig::default()
    };
    cfg.seed = 0;
    let fresh = train::train(&cfg, &ds.train, Some(&ds.test)).unwrap();
    let scores = fresh.network.inference_forward(&ds.test.features).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&scores), bits(report.scores.as_ref().unwrap()));
    let loaded = load_checkpoint(&tmp.path().join("ck")).unwrap();
    assert_eq!(loaded.checkpoint, fresh);

    run(&[
        "probe",
        "--checkpoint",
        "ck",
        "--data",
        "data",
        "--out",
        "probe.json",
    ]);
    let probe: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("probe.json")).unwrap()).unwrap();
    let points = probe["result"]["pd"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);

    // A baseline enables the cost ratio.
    fs::write(
        tmp.path().join("base.json"),
        SMALL.replace(r#""k_gopl": 2"#, r#""placement": "G0O0""#),
    )
    .unwrap();
    run(&[
        "train",
        "--config",
        "base.json",
        "--data",
        "data",
        "--out",
        "base",
    ]);
    run(&[
        "eval",
        "--checkpoint",
        "ck",
        "--data",
        "data",
        "--baseline",
        "base",
        "--out",
        "vs.json",
    ]);
    let vs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("vs.json")).unwrap()).unwrap();
    assert_eq!(vs["result"]["ard_reference"], "baseline");
    assert!(vs["result"]["privacy_per_cost"].is_number());
    assert!(vs["result"].get("scores").is_none());
}

#[test]
fn training_never_reads_the_sidecar() {
    let (tmp, _) = setup();
    ok(&opl(
        &["datagen", "--config", "cfg.json", "--out", "data"],
        tmp.path(),
    ));
    fs::remove_dir_all(tmp.path().join("data/sidecar")).unwrap();
    ok(&opl(
        &[
            "train", "--config", "cfg.json", "--data", "data", "--out", "ck",
        ],
        tmp.path(),
    ));
    ok(&opl(
        &[
            "eval",
            "--checkpoint",
            "ck",
            "--data",
            "data",
            "--out",
            "e.json",
        ],
        tmp.path(),
    ));
    let e: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e.json")).unwrap()).unwrap();
    assert!(e["result"]["subspace_alignment"].is_null());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (tmp, _) = setup();
    ok(&opl(
        &["datagen", "--config", "cfg.json", "--out", "data"],
        tmp.path(),
    ));
    ok(&opl(
        &[
            "train", "--config", "cfg.json", "--data", "data", "--out", "ck",
        ],
        tmp.path(),
    ));
    let scorer = tmp.path().join("ck/scorer.oplm");
    let mut m = format::load_matrix(&scorer).unwrap();
    let v = m.get(0, 0);
    m.set(0, 0, v + 1.0).unwrap();
    format::save_matrix(&scorer, &m).unwrap();
    assert!(load_checkpoint(&tmp.path().join("ck")).is_err());
    let out = opl(
        &["eval", "--checkpoint", "ck", "--data", "data"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_in_both_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = opl(&["gradcheck", "--out", "g.json"], tmp.path());
    ok(&out);
    let g: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("g.json")).unwrap()).unwrap();
    let results = g["result"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert!(results.iter().all(|r| r["report"]["pass"] == true));
    // A rank that leaves no complement is a configuration error.
    assert_eq!(
        opl(&["gradcheck", "--k", "10"], tmp.path()).status.code(),
        Some(2)
    );
}

#[test]
fn sweep_rows_do_not_depend_on_worker_count() {
    let (tmp, _) = setup();
    let grid = "k_gopl=1,2;placement=G1O0,G0O0,G5O0";
    ok(&opl(
        &[
            "sweep", "--config", "cfg.json", "--grid", grid, "--out", "one", "--jobs", "1",
        ],
        tmp.path(),
    ));
    let out = Command::new(env!("CARGO_BIN_EXE_opl"))
        .args([
            "sweep", "--config", "cfg.json", "--grid", grid, "--out", "three",
        ])
        .env("OPL_JOBS", "3")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    ok(&out);
    let a = fs::read_to_string(tmp.path().join("one/sweep.csv")).unwrap();
    assert_eq!(
        a,
        fs::read_to_string(tmp.path().join("three/sweep.csv")).unwrap()
    );
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(
        lines[0],
        "k_gopl,placement,seed,auc,ap,ssc,ard,fpd,subspace_alignment,error"
    );
    assert_eq!(lines.len(), 7);
    // The oversized placement fails alone; its siblings still ran.
    assert!(lines
        .iter()
        .filter(|l| l.contains("G5O0"))
        .all(|l| !l.ends_with(',')));
    assert!(lines
        .iter()
        .filter(|l| l.contains("G1O0"))
        .all(|l| l.ends_with(',')));
    let bad = Command::new(env!("CARGO_BIN_EXE_opl"))
        .args(["sweep", "--grid", "k_gopl=1", "--out", "z"])
        .env("OPL_JOBS", "zero")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn library_checkpoint_round_trip_is_exact() {
    let spec = SynthSpec {
        d: 10,
        t: 3,
        s: 2,
        n_train: 60,
        n_test: 40,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec).unwrap();
    for mode in [
        opl_core::model::BasisMode::RecomputeQr,
        opl_core::model::BasisMode::DirectQ,
    ] {
        let cfg = TrainConfig {
            placement: "G1O1".parse().unwrap(),
            k_gopl: Some(2),
            k_opl: Some(1),
            mode,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let ck = train::train(&cfg, &data.train, None).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_checkpoint(tmp.path(), &ck, None).unwrap();
        assert_eq!(load_checkpoint(tmp.path()).unwrap().checkpoint, ck);
    }
}

proptest! {
    #[test]
    fn oplm_round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let mut state = seed;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(state)
            })
            .filter(|x| x.is_finite())
            .chain(std::iter::repeat(0.5))
            .take(rows * cols)
            .collect();
        let m = Matrix::new(rows, cols, data).unwrap();
        let bytes = format::encode(&m);
        prop_assert_eq!(bytes.len(), format::HEADER_LEN + 8 * rows * cols);
        let back = format::decode(&bytes).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
    }
}
