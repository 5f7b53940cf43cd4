//! Deterministic mini-batch training and evaluation.
//!
//! Random streams (ChaCha8 seeded with `config.seed`):
//! - stream 0: parameter initialization;
//! - stream `1 + e`: the row permutation of epoch `e`.
//!
//! Given the same config and data, every step sees the same batches in the
//! same order, so the final checkpoint is bit-for-bit reproducible.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Activation, GradCheckOptions, GradientSet, Tape};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metrics;
use crate::model::{ArchConfig, BasisMode, FrozenNetwork, NetworkSpec, Placement};
use crate::objectives::{AttributeBatch, Batch, LossBreakdown, LossWeights, NetworkObjective};
use crate::synth::LabeledDataset;

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub placement: Placement,
    /// Rank of guided layers; `None` picks `max(1, round(0.04 width))`.
    pub k_gopl: Option<usize>,
    /// Rank of plain layers; same default.
    pub k_opl: Option<usize>,
    pub lambda_face: f64,
    pub lambda_orth: f64,
    pub mode: BasisMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last one); 0 disables.
    pub eval_every: usize,
    /// Backbone width; `None` uses the input dimension.
    pub width: Option<usize>,
    pub depth: usize,
    pub activation: Activation,
    /// Gradient-check the first batch before the first update.
    pub debug_gradcheck: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            placement: Placement {
                guided: 1,
                plain: 0,
            },
            k_gopl: None,
            k_opl: None,
            lambda_face: 1e-3,
            lambda_orth: 1e-3,
            mode: BasisMode::RecomputeQr,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            max_epochs: 100,
            seed: 0,
            eval_every: 10,
            width: None,
            depth: 3,
            activation: Activation::Tanh,
            debug_gradcheck: false,
        }
    }
}

/// `max(1, round(0.04 d))`
pub fn default_rank(d: usize) -> usize {
    (libm::round(0.04 * d as f64) as usize).max(1)
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_face: self.lambda_face,
            lambda_orth: self.lambda_orth,
        }
    }

    pub fn arch(&self, input_dim: usize) -> ArchConfig {
        let width = self.width.unwrap_or(input_dim);
        ArchConfig {
            input_dim,
            width,
            depth: self.depth,
            activation: self.activation,
            placement: self.placement,
            k_gopl: self.k_gopl.unwrap_or_else(|| default_rank(width)),
            k_opl: self.k_opl.unwrap_or_else(|| default_rank(width)),
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {}", m)));
        self.weights().validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.depth == 0 {
            return bad("batch_size, max_epochs and depth must be at least 1");
        }
        for (name, b) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(&format!("{} must lie in [0, 1)", name));
            }
        }
        if self.placement.total() > self.depth {
            return Err(Error::Placement {
                text: self.placement.to_string(),
                reason: format!(
                    "{} layers but only {} slots",
                    self.placement.total(),
                    self.depth
                ),
            });
        }
        Ok(())
    }
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    steps: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub const ADAM_EPS: f64 = 1e-8;

    pub fn new(config: &TrainConfig, params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Optimizer {
            kind: config.optimizer,
            lr: config.learning_rate,
            momentum: config.momentum,
            beta1: config.beta1,
            beta2: config.beta2,
            steps: 0,
            second: match config.optimizer {
                OptimizerKind::Adam => zeros.clone(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
            first: zeros,
        }
    }

    /// SGD: `v <- mu v - lr g; p <- p + v`. Adam: bias-corrected moments.
    pub fn step(&mut self, params: &mut [Matrix], grads: &GradientSet) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "Optimizer::step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.steps += 1;
        let t = self.steps as f64;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i);
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "Optimizer::step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let pd = p.data_mut();
            let m = self.first[i].data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((x, v), gi) in pd.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *v = self.momentum * *v - self.lr * gi;
                        *x += *v;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - libm::pow(self.beta1, t);
                    let c2 = 1.0 - libm::pow(self.beta2, t);
                    let v = self.second[i].data_mut();
                    for (((x, mi), vi), gi) in pd
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x -= self.lr * mhat / (libm::sqrt(vhat) + Self::ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ranking quality of a frozen network on labeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub auc: f64,
    pub ap: f64,
    pub scores: Vec<f64>,
}

/// Scores `features` with [`FrozenNetwork::inference_forward`]; no
/// attribute data is involved.
pub fn evaluate(network: &FrozenNetwork, features: &Matrix, labels: &[bool]) -> Result<Evaluation> {
    let scores = network.inference_forward(features)?;
    Ok(Evaluation {
        auc: metrics::roc_auc(&scores, labels)?,
        ap: metrics::average_precision(&scores, labels)?,
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRecord {
    pub auc: f64,
    pub ap: f64,
}

/// One epoch of the training curve.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Batch means of each component; `active_count` is the epoch total.
    pub loss: LossBreakdown,
    /// Largest `||Q^T Q - I||_F` over projection layers after the epoch.
    pub orth_defect: f64,
    pub eval: Option<EvalRecord>,
}

/// Result of training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: FrozenNetwork,
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
    /// `||Q^T Q - I||_F` (largest over layers) at initialization.
    pub initial_orth_defect: f64,
    pub seed: u64,
}

fn orth_defect(net: &NetworkSpec) -> f64 {
    net.projection_layers()
        .iter()
        .map(|(_, p)| linalg::orthonormality_defect(p.q()))
        .fold(0.0, f64::max)
}

fn make_batch(data: &LabeledDataset, rows: &[usize]) -> Result<Batch> {
    Ok(Batch {
        features: data.features.select_rows(rows)?,
        labels: rows.iter().map(|&i| data.labels[i]).collect(),
        attributes: alloc::vec![AttributeBatch {
            embeddings: data.attributes.select_rows(rows)?,
            mask: rows.iter().map(|&i| data.presence[i]).collect(),
        }],
    })
}

/// Row order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Builds the initial network for `config` on `input_dim` features.
pub fn initial_network(config: &TrainConfig, input_dim: usize) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    NetworkSpec::build(&config.arch(input_dim), &mut rng)
}

/// Observer of training progress.
pub trait TrainObserver {
    fn epoch_done(&mut self, _record: &EpochRecord) {}
    /// Parameters after every optimizer step.
    fn step_done(&mut self, _epoch: usize, _batch: usize, _params: &[Matrix]) {}
}

impl TrainObserver for () {}

pub fn train(
    config: &TrainConfig,
    data: &LabeledDataset,
    eval: Option<&LabeledDataset>,
) -> Result<Checkpoint> {
    train_observed(config, data, eval, &mut ())
}

/// [`train`] with a progress callback.
pub fn train_observed<O: TrainObserver>(
    config: &TrainConfig,
    data: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    observer: &mut O,
) -> Result<Checkpoint> {
    config.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch("train"));
    }
    if let Some(e) = eval {
        e.validate()?;
        if e.dim() != data.dim() {
            return Err(Error::shape(
                "train",
                format!(
                    "eval data has {} columns, training data {}",
                    e.dim(),
                    data.dim()
                ),
            ));
        }
    }
    let mut network = initial_network(config, data.dim())?;
    let initial_orth_defect = orth_defect(&network);
    let mut params = network.params();
    let mut opt = Optimizer::new(config, &params);
    let weights = config.weights();
    let mut curve = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = make_batch(data, rows)?;
            let objective = NetworkObjective {
                network: &network,
                batch: &batch,
                weights,
            };
            let mut tape = Tape::new();
            let vars = tape.params(&params);
            let terms = objective.terms(&mut tape, &vars)?;
            let parts = objective.breakdown(&tape, &terms);
            if !parts.total.is_finite() || parts.total > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: parts.total,
                });
            }
            let grads = tape.backward(terms.total).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: parts.total,
                },
                other => other,
            })?;
            if config.debug_gradcheck && epoch == 0 && b == 0 {
                let report = autodiff::compare_with_numeric(
                    &objective,
                    &params,
                    &grads,
                    GradCheckOptions::default(),
                )?;
                if !report.pass {
                    return Err(Error::GradientCheck {
                        max_rel_error: report.max_rel_error,
                    });
                }
            }
            opt.step(&mut params, &grads)?;
            observer.step_done(epoch + 1, b + 1, &params);
            sum.task += parts.task;
            sum.alignment += parts.alignment;
            sum.orth += parts.orth;
            sum.total += parts.total;
            sum.active_count += parts.active_count;
            batches += 1;
        }
        network.load_params(&params)?;
        let nb = batches as f64;
        let loss = LossBreakdown {
            task: sum.task / nb,
            alignment: sum.alignment / nb,
            orth: sum.orth / nb,
            total: sum.total / nb,
            active_count: sum.active_count,
        };
        let last = epoch + 1 == config.max_epochs;
        let due = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last);
        let eval_record = match eval {
            Some(e) if due => {
                let r = evaluate(&network.freeze()?, &e.features, &e.labels)?;
                Some(EvalRecord {
                    auc: r.auc,
                    ap: r.ap,
                })
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss,
            orth_defect: orth_defect(&network),
            eval: eval_record,
        };
        observer.epoch_done(&record);
        curve.push(record);
    }

    Ok(Checkpoint {
        network: network.freeze()?,
        config: config.clone(),
        curve,
        initial_orth_defect,
        seed: config.seed,
    })
}
