//! Evaluation metrics: ranking quality (AUC, AP), subspace capture (SSC,
//! principal-angle alignment), score-distribution drift (ARD), linear
//! probes and the per-slot privacy-decay curve, and the FLOP model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{FrozenNetwork, NetworkSpec, ProjectionKind, Stage};

fn check_scores(scores: &[f64], labels: &[bool], op: &'static str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            op,
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(op));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// ROC-AUC in Mann-Whitney form: ties between a positive and a negative
/// count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels, "roc_auc")?;
    let idx = ascending(scores);
    // Sum of doubled average ranks of positives; stays integral.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled average = i + j + 2
        let r2 = (i + j + 2) as u64;
        let p = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank2_sum += r2 * p;
        i = j + 1;
    }
    let pos = pos as u64;
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Average precision: precision at each distinct score threshold (highest
/// first), weighted by the recall gained there.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels, "average_precision")?;
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let gained = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += gained;
        seen += j - i + 1;
        if gained > 0 {
            ap += (tp as f64 / seen as f64) * (gained as f64 / pos as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

/// Mean over rows of `cos(Q Q^T a_i, a_i)`.
pub fn ssc(q: &Matrix, attrs: &Matrix) -> Result<f64> {
    if attrs.rows() == 0 {
        return Err(Error::EmptyBatch("ssc"));
    }
    if attrs.cols() != q.rows() {
        return Err(Error::shape(
            "ssc",
            format!("attrs {:?} vs basis {:?}", attrs.shape(), q.shape()),
        ));
    }
    let (_, captured) = linalg::project_rows(q, attrs)?;
    let mut sum = 0.0;
    for i in 0..attrs.rows() {
        sum += linalg::cosine(captured.row(i), attrs.row(i))?;
    }
    Ok(sum / attrs.rows() as f64)
}

/// Mean squared cosine of the principal angles between `span(Q)` and
/// `span(S)`: `||Q^T S||_F^2 / min(k, s)`.
pub fn subspace_alignment(q: &Matrix, s: &Matrix) -> Result<f64> {
    let m = linalg::matmul_tn(q, s)?;
    let denom = q.cols().min(s.cols());
    if denom == 0 {
        return Err(Error::shape(
            "subspace_alignment",
            format!("{:?}, {:?}", q.shape(), s.shape()),
        ));
    }
    Ok(linalg::frobenius_sq(&m) / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ArdOptions {
    pub bins: usize,
    pub eps: f64,
}

impl Default for ArdOptions {
    fn default() -> Self {
        ArdOptions {
            bins: 32,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ard {
    pub value: f64,
    /// Every score in both sets was identical; `value` is 0.
    pub degenerate: bool,
}

/// `KL(P_raw || P_proj)` of histograms over the shared range of both
/// score sets, each smoothed by `eps` and renormalized.
pub fn ard(raw: &[f64], proj: &[f64], opts: ArdOptions) -> Result<Ard> {
    if raw.is_empty() || proj.is_empty() {
        return Err(Error::EmptyBatch("ard"));
    }
    if opts.bins < 2 || !(opts.eps > 0.0) || !opts.eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ard needs bins >= 2 and eps > 0, got {:?}",
            opts
        )));
    }
    if raw.iter().chain(proj).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("ard"));
    }
    let lo = raw
        .iter()
        .chain(proj)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = raw
        .iter()
        .chain(proj)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(Ard {
            value: 0.0,
            degenerate: true,
        });
    }
    let density = |xs: &[f64]| -> Vec<f64> {
        let mut counts = vec![0usize; opts.bins];
        for &x in xs {
            let b = ((x - lo) / (hi - lo) * opts.bins as f64) as usize;
            counts[b.min(opts.bins - 1)] += 1;
        }
        let n = xs.len() as f64;
        let z = 1.0 + opts.bins as f64 * opts.eps;
        counts
            .iter()
            .map(|&c| (c as f64 / n + opts.eps) / z)
            .collect()
    };
    let p = density(raw);
    let q = density(proj);
    let kl: f64 = p.iter().zip(&q).map(|(&a, &b)| a * libm::log(a / b)).sum();
    Ok(Ard {
        value: kl.max(0.0),
        degenerate: false,
    })
}

/// Settings of the logistic-regression probe.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ProbeOptions {
    /// Fraction of rows used for fitting; the rest is held out.
    pub split_frac: f64,
    pub split_seed: u64,
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls to this value.
    pub grad_tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            split_frac: 0.7,
            split_seed: 0,
            l2: 1e-4,
            max_iter: 5000,
            grad_tol: 1e-6,
        }
    }
}

/// A fitted probe. Weights act on standardized features.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub held_out_accuracy: f64,
    pub iterations: usize,
}

impl Probe {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .enumerate()
                .map(|(j, &v)| self.weights[j] * (v - self.mean[j]) / self.scale[j])
                .sum::<f64>()
    }
}

/// Fits a logistic-regression probe by full-batch gradient descent with
/// step `1/L` (`L` bounds the Hessian) and reports held-out accuracy at
/// probability 0.5.
pub fn train_probe(features: &Matrix, labels: &[bool], opts: ProbeOptions) -> Result<Probe> {
    let n = features.rows();
    let d = features.cols();
    if labels.len() != n {
        return Err(Error::shape(
            "train_probe",
            format!("{} rows, {} labels", n, labels.len()),
        ));
    }
    if !(opts.split_frac > 0.0 && opts.split_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split_frac must lie in (0, 1), got {}",
            opts.split_frac
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.split_seed));
    let n_fit = libm::round(opts.split_frac * n as f64) as usize;
    if n_fit == 0 || n_fit == n {
        return Err(Error::SampleSize { n, required: 2 });
    }
    let (fit, held) = order.split_at(n_fit);
    let pos = fit.iter().filter(|&&i| labels[i]).count();
    if pos == 0 || pos == fit.len() {
        return Err(Error::DegenerateLabels("train_probe"));
    }

    let m = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in fit {
        for (j, v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut scale = vec![0.0; d];
    for &i in fit {
        for (j, v) in features.row(i).iter().enumerate() {
            scale[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    for s in scale.iter_mut() {
        let sd = libm::sqrt(*s / m);
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }
    // Standardized design with a trailing intercept column.
    let w = d + 1;
    let mut x = Vec::with_capacity(fit.len() * w);
    for &i in fit {
        for (j, v) in features.row(i).iter().enumerate() {
            x.push((v - mean[j]) / scale[j]);
        }
        x.push(1.0);
    }
    let y: Vec<f64> = fit
        .iter()
        .map(|&i| if labels[i] { 1.0 } else { 0.0 })
        .collect();

    let lipschitz = max_eig_gram(&x, fit.len(), w) / (4.0 * m) + opts.l2;
    let step = 1.0 / lipschitz;
    let mut theta = vec![0.0; w];
    let mut grad = vec![0.0; w];
    let mut iterations = 0;
    while iterations < opts.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            let row = &x[r * w..(r + 1) * w];
            let z: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let e = sigmoid(z) - yr;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += e * a;
            }
        }
        for (j, g) in grad.iter_mut().enumerate() {
            *g /= m;
            if j < d {
                *g += opts.l2 * theta[j];
            }
        }
        if libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>()) <= opts.grad_tol {
            break;
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        iterations += 1;
    }

    let mut probe = Probe {
        weights: theta[..d].to_vec(),
        bias: theta[d],
        mean,
        scale,
        held_out_accuracy: 0.0,
        iterations,
    };
    let correct = held
        .iter()
        .filter(|&&i| (probe.logit(features.row(i)) > 0.0) == labels[i])
        .count();
    probe.held_out_accuracy = correct as f64 / held.len() as f64;
    Ok(probe)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Upper estimate of the largest eigenvalue of `X^T X` (row-major `n x w`).
fn max_eig_gram(x: &[f64], n: usize, w: usize) -> f64 {
    let mut v = vec![1.0 / libm::sqrt(w as f64); w];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut xv = vec![0.0; n];
        for r in 0..n {
            xv[r] = x[r * w..(r + 1) * w]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let mut next = vec![0.0; w];
        for r in 0..n {
            for (c, a) in next.iter_mut().zip(&x[r * w..(r + 1) * w]) {
                *c += a * xv[r];
            }
        }
        let nrm = libm::sqrt(next.iter().map(|a| a * a).sum::<f64>());
        if nrm == 0.0 {
            return 1.0;
        }
        let converged = libm::fabs(nrm - lambda) <= 1e-9 * nrm;
        lambda = nrm;
        v = next.into_iter().map(|a| a / nrm).collect();
        if converged {
            break;
        }
    }
    // Power iteration approaches from below.
    1.05 * lambda
}

/// Probe accuracy at every slot of a network.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PdCurve {
    /// `(slot, held-out accuracy)`, slots strictly increasing from 1.
    pub points: Vec<(usize, f64)>,
    pub first_projection_slot: usize,
}

impl PdCurve {
    /// Accuracy at the first projection slot.
    pub fn fpd(&self) -> Result<f64> {
        self.points
            .iter()
            .find(|(s, _)| *s == self.first_projection_slot)
            .map(|(_, a)| *a)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "curve has no point at slot {}",
                    self.first_projection_slot
                ))
            })
    }
}

/// Trains a presence probe on the activation leaving every slot.
/// Networks without projections report their first slot as the FPD slot.
pub fn pd_curve(
    network: &FrozenNetwork,
    features: &Matrix,
    presence: &[bool],
    opts: ProbeOptions,
) -> Result<PdCurve> {
    let taps = network.forward(features, true)?.taps.unwrap_or_default();
    let mut points = Vec::with_capacity(taps.len());
    for tap in &taps {
        let p = train_probe(&tap.activation, presence, opts)?;
        points.push((tap.slot, p.held_out_accuracy));
    }
    Ok(PdCurve {
        points,
        first_projection_slot: network.spec().first_projection_slot().unwrap_or(1),
    })
}

/// Multiply-add count of one forward pass for a single sample: dense
/// `2 in out`, projection `4 d k`, scorer `2 d`.
pub fn flops_per_sample(spec: &NetworkSpec) -> u64 {
    let mut total = 0u64;
    for s in spec.stages() {
        total += match s {
            Stage::Dense(d) => 2 * (d.weights.rows() * d.weights.cols()) as u64,
            Stage::Projection(p) => 4 * (p.dim() * p.rank()) as u64,
        };
    }
    total + 2 * spec.scorer().cols() as u64
}

/// FPD reduction per unit of added cost.
pub fn privacy_per_cost(fpd_base: f64, fpd_new: f64, cost_base: f64, cost_new: f64) -> Result<f64> {
    let delta = cost_new - cost_base;
    if !(delta > 0.0) {
        return Err(Error::NonpositiveCostDelta(delta));
    }
    Ok((fpd_base - fpd_new) / delta)
}

/// Orthonormal basis of the image of `basis` under the linear part of
/// `stages[..upto]`: dense weights and projections, without biases or
/// activations.
pub fn planted_image(spec: &NetworkSpec, basis: &Matrix, upto: usize) -> Result<Matrix> {
    if basis.rows() != spec.input_dim() {
        return Err(Error::shape(
            "planted_image",
            format!(
                "basis {:?}, network input {}",
                basis.shape(),
                spec.input_dim()
            ),
        ));
    }
    let mut b = basis.clone();
    for stage in spec.stages().iter().take(upto) {
        b = match stage {
            Stage::Dense(d) => linalg::matmul(&d.weights, &b)?,
            Stage::Projection(p) => {
                let coords = linalg::matmul_tn(p.q(), &b)?;
                linalg::sub(&b, &linalg::matmul(p.q(), &coords)?)?
            }
        };
    }
    Ok(linalg::qr_thin(&b)?.q)
}

/// Capture of the sensitive signal by the first guided layer.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GuidedCapture {
    pub slot: usize,
    /// SSC of the layer's basis on attribute embeddings carried to it.
    pub ssc: f64,
    /// Alignment with the planted basis carried to the layer.
    pub subspace_alignment: Option<f64>,
}

/// `attrs` are input-space embeddings of present samples; `planted` the
/// input-space sensitive basis, if known. `None` without a guided layer.
pub fn guided_capture(
    network: &FrozenNetwork,
    attrs: &Matrix,
    planted: Option<&Matrix>,
) -> Result<Option<GuidedCapture>> {
    let spec = network.spec();
    let mut slot = 0;
    for (i, stage) in spec.stages().iter().enumerate() {
        match stage {
            Stage::Dense(_) => slot += 1,
            Stage::Projection(p) if p.kind == ProjectionKind::GuidedOpl => {
                let carried = spec.prefix(attrs, i)?;
                let alignment = match planted {
                    Some(s) => Some(subspace_alignment(p.q(), &planted_image(spec, s, i)?)?),
                    None => None,
                };
                return Ok(Some(GuidedCapture {
                    slot,
                    ssc: ssc(p.q(), &carried)?,
                    subspace_alignment: alignment,
                }));
            }
            Stage::Projection(_) => {}
        }
    }
    Ok(None)
}

/// All evaluation metrics of one checkpoint on one dataset.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub auc: f64,
    pub ap: f64,
    /// SSC of the first guided layer on held-out attribute embeddings.
    pub ssc: Option<f64>,
    pub ard: f64,
    pub ard_degenerate: bool,
    pub pd: PdCurve,
    pub fpd: f64,
    /// Against the planted sensitive subspace, when known.
    pub subspace_alignment: Option<f64>,
    pub flops_per_sample: u64,
    /// FPD reduction per added FLOP relative to a comparison network.
    pub privacy_per_cost: Option<f64>,
}
