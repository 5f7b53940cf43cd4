//! Grid sweeps: one independent training run per grid cell.
//!
//! A grid is written `axis=v1,v2;axis=v1,..`, e.g.
//! `k_gopl=2,4,8;lambda_face=0,1e-3`. Cells are the cartesian product,
//! first axis slowest. The seed of a cell hashes the base seed with the
//! cell's own coordinates only, so adding cells never changes others.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use opl_core::synth::SyntheticData;
use opl_core::train::{self, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::hash::seed_from;

/// Environment variable holding the default worker count.
pub const JOBS_ENV: &str = "OPL_JOBS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    KGopl,
    KOpl,
    LambdaFace,
    LambdaOrth,
    Placement,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::KGopl,
        Axis::KOpl,
        Axis::LambdaFace,
        Axis::LambdaOrth,
        Axis::Placement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::KGopl => "k_gopl",
            Axis::KOpl => "k_opl",
            Axis::LambdaFace => "lambda_face",
            Axis::LambdaOrth => "lambda_orth",
            Axis::Placement => "placement",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: &str) -> Result<()> {
        let bad = |what: &str| {
            CliError::Config(format!(
                "grid axis {}: {:?} is not {}",
                self.name(),
                value,
                what
            ))
        };
        match self {
            Axis::KGopl => cfg.k_gopl = Some(value.parse().map_err(|_| bad("a rank"))?),
            Axis::KOpl => cfg.k_opl = Some(value.parse().map_err(|_| bad("a rank"))?),
            Axis::LambdaFace => cfg.lambda_face = value.parse().map_err(|_| bad("a number"))?,
            Axis::LambdaOrth => cfg.lambda_orth = value.parse().map_err(|_| bad("a number"))?,
            Axis::Placement => {
                cfg.placement = value.parse().map_err(|_| bad("a GmOn placement"))?
            }
        }
        Ok(())
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
                CliError::Config(format!(
                    "unknown grid axis {:?} (supported: {})",
                    s,
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<(Axis, Vec<String>)>,
}

impl FromStr for Grid {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let mut axes: Vec<(Axis, Vec<String>)> = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, values) = part
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("grid entry {:?} lacks '='", part)))?;
            let axis: Axis = name.trim().parse()?;
            if axes.iter().any(|(a, _)| *a == axis) {
                return Err(CliError::Config(format!("grid axis {} given twice", axis)));
            }
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(CliError::Config(format!(
                    "grid axis {} has an empty value",
                    axis
                )));
            }
            axes.push((axis, values));
        }
        if axes.is_empty() {
            return Err(CliError::Config("grid has no axes".into()));
        }
        Ok(Grid { axes })
    }
}

pub type Cell = Vec<(Axis, String)>;

impl Grid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = vec![Vec::new()];
        for (axis, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((*axis, v.clone()));
                        c
                    })
                })
                .collect();
        }
        out
    }
}

/// Seed of one cell: hash of the base seed and the cell coordinates.
pub fn cell_seed(base: u64, cell: &Cell) -> u64 {
    let mut key = base.to_string();
    for (axis, value) in cell {
        key.push('|');
        key.push_str(axis.name());
        key.push('=');
        key.push_str(value);
    }
    seed_from(&key)
}

/// Training config of a cell; errors name the offending axis.
pub fn cell_config(base: &TrainConfig, cell: &Cell) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    for (axis, value) in cell {
        axis.apply(&mut cfg, value)?;
    }
    cfg.seed = cell_seed(base.seed, cell);
    cfg.eval_every = 0;
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coords: Vec<(String, String)>,
    pub seed: u64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub ssc: Option<f64>,
    pub ard: Option<f64>,
    pub fpd: Option<f64>,
    pub subspace_alignment: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(cfg: &RunConfig, cell: &Cell, data: &SyntheticData) -> SweepRow {
    let coords = cell
        .iter()
        .map(|(a, v)| (a.name().to_string(), v.clone()))
        .collect();
    let mut row = SweepRow {
        coords,
        seed: cell_seed(cfg.train.seed, cell),
        auc: None,
        ap: None,
        ssc: None,
        ard: None,
        fpd: None,
        subspace_alignment: None,
        error: None,
    };
    let result = cell_config(&cfg.train, cell).and_then(|tc| {
        let ck = train::train(&tc, &data.train, None)?;
        analysis::evaluate_network(
            &ck.network,
            &data.test,
            Some(&data.truth),
            None,
            &cfg.metrics,
        )
    });
    match result {
        Ok(r) => {
            let m = r.metrics;
            row.auc = Some(m.auc);
            row.ap = Some(m.ap);
            row.ssc = m.ssc;
            row.ard = Some(m.ard);
            row.fpd = Some(m.fpd);
            row.subspace_alignment = m.subspace_alignment;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Worker count: explicit value, else `OPL_JOBS`, else 1.
pub fn resolve_jobs(explicit: Option<usize>) -> Result<usize> {
    if let Some(j) = explicit {
        return if j == 0 {
            Err(CliError::Config("--jobs must be positive".into()))
        } else {
            Ok(j)
        };
    }
    match std::env::var(JOBS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(j) if j > 0 => Ok(j),
            _ => Err(CliError::Config(format!(
                "{} must be a positive integer, got {:?}",
                JOBS_ENV, v
            ))),
        },
        Err(_) => Ok(1),
    }
}

/// Runs every cell; failed cells carry an error and the sweep goes on.
/// Row order follows [`Grid::cells`] regardless of `jobs`.
pub fn run_sweep(cfg: &RunConfig, grid: &Grid, data: &SyntheticData, jobs: usize) -> Vec<SweepRow> {
    let cells = grid.cells();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let row = run_cell(cfg, &cells[i], data);
                slots
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn write_csv(path: &Path, grid: &Grid, rows: &[SweepRow]) -> Result<()> {
    let map = |e: csv::Error| CliError::Runtime(format!("{}: {}", path.display(), e));
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    let mut header: Vec<String> = grid
        .axes
        .iter()
        .map(|(a, _)| a.name().to_string())
        .collect();
    header.extend(
        [
            "seed",
            "auc",
            "ap",
            "ssc",
            "ard",
            "fpd",
            "subspace_alignment",
            "error",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    w.write_record(&header).map_err(map)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec: Vec<String> = r.coords.iter().map(|(_, v)| v.clone()).collect();
        rec.push(r.seed.to_string());
        for v in [r.auc, r.ap, r.ssc, r.ard, r.fpd, r.subspace_alignment] {
            rec.push(opt(v));
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(map)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
