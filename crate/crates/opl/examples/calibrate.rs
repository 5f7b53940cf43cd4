//! Calibration sweep over the guided-loss weight on the planted set.
//!
//! Usage: `cargo run --release -p opl --example calibrate -- [seeds] [epochs] [lambdas..]`
//!
//! Prints seed-averaged subspace alignment, SSC, projected and raw
//! presence-probe accuracy, and task AUC for each weight, using the
//! acceptance architecture (`G1O0`, `k_gopl = 4`).

use opl::analysis;
use opl::config::MetricOptions;
use opl_core::model::Placement;
use opl_core::synth::{self, SynthSpec};
use opl_core::train::{self, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(5, |s| s.parse().expect("seeds"));
    let epochs: usize = args.get(1).map_or(100, |s| s.parse().expect("epochs"));
    let lambdas: Vec<f64> = if args.len() > 2 {
        args[2..]
            .iter()
            .map(|s| s.parse().expect("lambda"))
            .collect()
    } else {
        vec![0.0, 1e-3, 1e-2, 1e-1, 1.0]
    };
    let opts = MetricOptions::default();
    println!("lambda_face  alignment  ssc     fpd     raw     drop    auc");
    for &lf in &lambdas {
        let mut acc = [0.0f64; 5];
        for seed in 0..seeds {
            let data = synth::generate(&SynthSpec {
                seed,
                ..SynthSpec::default()
            })
            .expect("data");
            let cfg = TrainConfig {
                placement: Placement {
                    guided: 1,
                    plain: 0,
                },
                k_gopl: Some(4),
                lambda_face: lf,
                max_epochs: epochs,
                eval_every: 0,
                seed,
                ..TrainConfig::default()
            };
            let ck = train::train(&cfg, &data.train, None).expect("train");
            let rep =
                analysis::evaluate_network(&ck.network, &data.test, Some(&data.truth), None, &opts)
                    .expect("eval");
            let probe = analysis::probe_network(&ck.network, &data.test, &opts).expect("probe");
            for (a, v) in acc.iter_mut().zip([
                rep.metrics.subspace_alignment.unwrap_or(f64::NAN),
                rep.metrics.ssc.unwrap_or(f64::NAN),
                probe.fpd,
                probe.raw_accuracy,
                rep.metrics.auc,
            ]) {
                *a += v / seeds as f64;
            }
        }
        println!(
            "{:<11}  {:<9.3}  {:<6.3}  {:<6.3}  {:<6.3}  {:<6.3}  {:.4}",
            lf,
            acc[0],
            acc[1],
            acc[2],
            acc[3],
            acc[3] - acc[2],
            acc[4]
        );
    }
}
