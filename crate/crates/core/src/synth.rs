//! Planted-subspace data.
//!
//! Orthonormal bases `T` (d x t) and `S` (d x s) with `T^T S = 0`. Each
//! sample draws a task latent `z_t ~ N(0, I)` and a sensitive latent
//! `z_s ~ N(mu, I)` with `mu = offset * (1, .., 1) / sqrt(s)`:
//!
//! ```text
//! x = T z_t + present * S z_s + noise_sigma * n
//! a = S z_s + attr_noise * n'     (present rows; zero otherwise)
//! y = [w . z_t + leak * present * (u . z_s) > threshold]
//! ```
//!
//! The threshold is the empirical `1 - anomaly_rate` quantile of the
//! training draw and is reused for the test draw.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metrics::{self, ProbeOptions};

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SynthSpec {
    pub d: usize,
    pub t: usize,
    pub s: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub presence_rate: f64,
    pub anomaly_rate: f64,
    pub attr_noise: f64,
    /// Norm of the mean of the sensitive latent.
    pub sensitive_offset: f64,
    /// Weight of the sensitive latent in the label functional.
    pub label_leak: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 64,
            t: 8,
            s: 4,
            n_train: 2000,
            n_test: 1000,
            noise_sigma: 0.1,
            presence_rate: 0.5,
            anomaly_rate: 0.3,
            attr_noise: 0.05,
            sensitive_offset: 2.0,
            label_leak: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth spec: {}", m)));
        if self.d == 0 || self.t == 0 || self.s == 0 {
            return bad("dimensions must be at least 1");
        }
        if self.t + self.s > self.d {
            return bad("t + s must not exceed d");
        }
        for (name, r) in [
            ("presence_rate", self.presence_rate),
            ("anomaly_rate", self.anomaly_rate),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return bad(&format!("{} must lie in (0, 1), got {}", name, r));
            }
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("attr_noise", self.attr_noise),
            ("sensitive_offset", self.sensitive_offset),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!(
                    "{} must be finite and nonnegative, got {}",
                    name, v
                ));
            }
        }
        if !self.label_leak.is_finite() {
            return bad("label_leak must be finite");
        }
        let required = libm::ceil(10.0 / self.anomaly_rate) as usize;
        for n in [self.n_train, self.n_test] {
            if n < required {
                return Err(Error::SampleSize { n, required });
            }
        }
        Ok(())
    }
}

/// Features, labels and weak supervision for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `n x d`
    pub features: Matrix,
    pub labels: Vec<bool>,
    pub presence: Vec<bool>,
    /// `n x d`; zero rows where `presence` is false.
    pub attributes: Matrix,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n
            || self.presence.len() != n
            || self.attributes.shape() != self.features.shape()
        {
            return Err(Error::shape(
                "LabeledDataset",
                format!(
                    "features {:?}, {} labels, {} presence flags, attributes {:?}",
                    self.features.shape(),
                    self.labels.len(),
                    self.presence.len(),
                    self.attributes.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Attribute rows of present samples.
    pub fn present_attributes(&self) -> Result<Matrix> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.presence[i]).collect();
        self.attributes.select_rows(&rows)
    }
}

/// Ground truth kept apart from the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTruth {
    pub task_basis: Matrix,
    pub sensitive_basis: Matrix,
    /// Unit vector over task coordinates.
    pub functional: Vec<f64>,
    /// Unit vector over sensitive coordinates.
    pub leak_functional: Vec<f64>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub truth: PlantedTruth,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let nrm = linalg::norm(&v);
        if nrm > 1e-8 {
            return v.into_iter().map(|x| x / nrm).collect();
        }
    }
}

struct RawSplit {
    features: Vec<f64>,
    attributes: Vec<f64>,
    presence: Vec<bool>,
    label_scores: Vec<f64>,
}

fn draw_split(spec: &SynthSpec, truth: &PlantedTruth, n: usize, stream: u64) -> RawSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let (d, t, s) = (spec.d, spec.t, spec.s);
    let mu = spec.sensitive_offset / libm::sqrt(s as f64);
    let mut out = RawSplit {
        features: Vec::with_capacity(n * d),
        attributes: Vec::with_capacity(n * d),
        presence: Vec::with_capacity(n),
        label_scores: Vec::with_capacity(n),
    };
    let mut zt = alloc::vec![0.0; t];
    let mut zs = alloc::vec![0.0; s];
    for _ in 0..n {
        // Fixed draw order per sample, whatever the flags come out as.
        zt.iter_mut().for_each(|z| *z = normal(&mut rng));
        let present = rng.random_bool(spec.presence_rate);
        zs.iter_mut().for_each(|z| *z = mu + normal(&mut rng));
        for i in 0..d {
            let task: f64 = (0..t).map(|j| truth.task_basis.get(i, j) * zt[j]).sum();
            let sens: f64 = (0..s)
                .map(|j| truth.sensitive_basis.get(i, j) * zs[j])
                .sum();
            let noise = spec.noise_sigma * normal(&mut rng);
            let anoise = spec.attr_noise * normal(&mut rng);
            out.features
                .push(task + if present { sens } else { 0.0 } + noise);
            out.attributes
                .push(if present { sens + anoise } else { 0.0 });
        }
        let mut score = linalg::dot(&truth.functional, &zt);
        if present {
            score += spec.label_leak * linalg::dot(&truth.leak_functional, &zs);
        }
        out.presence.push(present);
        out.label_scores.push(score);
    }
    out
}

fn finish(raw: RawSplit, n: usize, d: usize, threshold: f64) -> LabeledDataset {
    LabeledDataset {
        features: Matrix::from_raw(n, d, raw.features),
        labels: raw.label_scores.iter().map(|&v| v > threshold).collect(),
        presence: raw.presence,
        attributes: Matrix::from_raw(n, d, raw.attributes),
    }
}

/// Draws the planted bases, then independent train and test splits.
pub fn generate(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, t, s) = (spec.d, spec.t, spec.s);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss: Vec<f64> = (0..d * (t + s)).map(|_| normal(&mut rng)).collect();
    let basis = linalg::qr_thin(&Matrix::from_raw(d, t + s, gauss))?.q;
    let cols = |range: core::ops::Range<usize>| {
        let mut data = Vec::with_capacity(d * range.len());
        for i in 0..d {
            for j in range.clone() {
                data.push(basis.get(i, j));
            }
        }
        Matrix::from_raw(d, range.len(), data)
    };
    let mut truth = PlantedTruth {
        task_basis: cols(0..t),
        sensitive_basis: cols(t..t + s),
        functional: unit_vector(t, &mut rng),
        leak_functional: unit_vector(s, &mut rng),
        threshold: 0.0,
    };

    let train = draw_split(spec, &truth, spec.n_train, 1);
    let test = draw_split(spec, &truth, spec.n_test, 2);
    let mut sorted = train.label_scores.clone();
    sorted.sort_by(f64::total_cmp);
    // Smallest value above which an anomaly_rate share of the draw lies.
    let cut = libm::round((1.0 - spec.anomaly_rate) * spec.n_train as f64) as usize;
    truth.threshold = sorted[cut.clamp(1, spec.n_train - 1) - 1];

    Ok(SyntheticData {
        train: finish(train, spec.n_train, d, truth.threshold),
        test: finish(test, spec.n_test, d, truth.threshold),
        truth,
    })
}

/// Sanity diagnostics of a planted dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlantingDiagnostics {
    /// Held-out accuracy of a linear presence probe on raw features.
    pub presence_probe_accuracy: f64,
    /// AUC of the planted functional applied to `T^T x`.
    pub oracle_task_auc: f64,
    /// `max |T^T S|`.
    pub orthogonality_residual: f64,
    pub anomaly_fraction: f64,
    pub presence_fraction: f64,
}

pub fn verify_planting(
    ds: &LabeledDataset,
    truth: &PlantedTruth,
    probe: ProbeOptions,
) -> Result<PlantingDiagnostics> {
    ds.validate()?;
    let cross = linalg::matmul_tn(&truth.task_basis, &truth.sensitive_basis)?;
    let orthogonality_residual = cross
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    let coords = linalg::matmul(&ds.features, &truth.task_basis)?;
    let oracle: Vec<f64> = (0..ds.len())
        .map(|i| linalg::dot(coords.row(i), &truth.functional))
        .collect();
    let n = ds.len() as f64;
    Ok(PlantingDiagnostics {
        presence_probe_accuracy: metrics::train_probe(&ds.features, &ds.presence, probe)?
            .held_out_accuracy,
        oracle_task_auc: metrics::roc_auc(&oracle, &ds.labels)?,
        orthogonality_residual,
        anomaly_fraction: ds.labels.iter().filter(|&&y| y).count() as f64 / n,
        presence_fraction: ds.presence.iter().filter(|&&p| p).count() as f64 / n,
    })
}
