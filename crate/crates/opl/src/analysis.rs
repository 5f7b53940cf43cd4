//! Metric reports of trained networks.

use opl_core::metrics::{self, MetricsReport, PdCurve};
use opl_core::model::FrozenNetwork;
use opl_core::synth::{LabeledDataset, PlantedTruth};
use opl_core::train;
use serde::{Deserialize, Serialize};

use crate::config::MetricOptions;
use crate::error::Result;

/// What the projected scores are compared against for ARD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArdReference {
    /// A separately trained comparison network.
    Baseline,
    /// The same network with its projection layers removed.
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub ard_reference: ArdReference,
    /// Slot of the guided layer that `ssc` and `subspace_alignment` describe.
    pub guided_slot: Option<usize>,
    /// Anomaly scores on the evaluation split, in row order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Computes every metric of `network` on `data`.
///
/// `truth` enables the planted-subspace alignment; `baseline` replaces the
/// bypass reference for ARD and enables the privacy-per-cost ratio.
pub fn evaluate_network(
    network: &FrozenNetwork,
    data: &LabeledDataset,
    truth: Option<&PlantedTruth>,
    baseline: Option<&FrozenNetwork>,
    opts: &MetricOptions,
) -> Result<EvalReport> {
    let eval = train::evaluate(network, &data.features, &data.labels)?;
    let attrs = data.present_attributes()?;
    let capture = if attrs.rows() > 0 {
        metrics::guided_capture(network, &attrs, truth.map(|t| &t.sensitive_basis))?
    } else {
        None
    };
    let (reference_scores, reference) = match baseline {
        Some(b) => (b.inference_forward(&data.features)?, ArdReference::Baseline),
        None => (
            network
                .without_projections()
                .inference_forward(&data.features)?,
            ArdReference::Bypass,
        ),
    };
    let ard = metrics::ard(&reference_scores, &eval.scores, opts.ard)?;
    let pd = metrics::pd_curve(network, &data.features, &data.presence, opts.probe)?;
    let fpd = pd.fpd()?;
    let flops = metrics::flops_per_sample(network.spec());
    let privacy_per_cost = match baseline {
        Some(b) => {
            let base_flops = metrics::flops_per_sample(b.spec());
            if flops > base_flops {
                let base_fpd =
                    metrics::pd_curve(b, &data.features, &data.presence, opts.probe)?.fpd()?;
                Some(metrics::privacy_per_cost(
                    base_fpd,
                    fpd,
                    base_flops as f64,
                    flops as f64,
                )?)
            } else {
                None
            }
        }
        None => None,
    };
    Ok(EvalReport {
        metrics: MetricsReport {
            auc: eval.auc,
            ap: eval.ap,
            ssc: capture.map(|c| c.ssc),
            ard: ard.value,
            ard_degenerate: ard.degenerate,
            pd,
            fpd,
            subspace_alignment: capture.and_then(|c| c.subspace_alignment),
            flops_per_sample: flops,
            privacy_per_cost,
        },
        ard_reference: reference,
        guided_slot: capture.map(|c| c.slot),
        scores: Some(eval.scores),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pd: PdCurve,
    pub fpd: f64,
    /// Presence probe on the raw input features.
    pub raw_accuracy: f64,
}

pub fn probe_network(
    network: &FrozenNetwork,
    data: &LabeledDataset,
    opts: &MetricOptions,
) -> Result<ProbeReport> {
    let pd = metrics::pd_curve(network, &data.features, &data.presence, opts.probe)?;
    Ok(ProbeReport {
        fpd: pd.fpd()?,
        raw_accuracy: metrics::train_probe(&data.features, &data.presence, opts.probe)?
            .held_out_accuracy,
        pd,
    })
}
