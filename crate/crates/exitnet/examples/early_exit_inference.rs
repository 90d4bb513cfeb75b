//! Confidence-thresholded early-exit inference: exit rates, executed FLOPs
//! and accuracy across the threshold grid, plus the fail-safe behaviour at
//! the boundaries.
//!
//! Run with: cargo run --release --example early_exit_inference

use exitnet::data::{gen_blobs, BlobParams};
use exitnet::infer::{infer_batch, ExitPolicy, LatencyModel};
use exitnet::model::{BackboneSpec, ModelGraph};
use exitnet::train::{train_global, GlobalTrainConfig};

fn main() -> exitnet::Result<()> {
    let blobs = BlobParams {
        height: 16,
        width: 16,
        jitter: 1.5,
        ..BlobParams::default()
    };
    let train = gen_blobs(10, 1200, &blobs, 1)?;
    let test = gen_blobs(10, 300, &blobs, 2)?;

    let spec = BackboneSpec {
        input_shape: [1, 16, 16],
        widths: vec![8, 8, 16, 16, 32, 32],
        pool_after: vec![2, 4],
        ..BackboneSpec::default()
    };
    let mut model = ModelGraph::build(&spec, 3, 7)?;
    println!("training...");
    train_global(
        &mut model,
        &train,
        &GlobalTrainConfig {
            epochs: 5,
            seed: 61,
            ..GlobalTrainConfig::default()
        },
    )?;

    let latency = LatencyModel::FlopProportional { ns_per_flop: 0.5 };
    println!(
        "\n{:>5} {:>9} {:>24} {:>12} {:>12}",
        "thr", "accuracy", "exit rates (1/2/3/final)", "mean flops", "latency(us)"
    );
    for thr in [0.0f32, 0.25, 0.5, 0.75, 0.9, 1.0] {
        let policy = ExitPolicy::all_exits(&model, thr)?;
        let (_, summary) = infer_batch(&model, &test, &policy, latency)?;
        let rates: Vec<String> = summary
            .exit_rates
            .iter()
            .map(|r| format!("{r:.2}"))
            .collect();
        println!(
            "{thr:>5.2} {:>9.3} {:>24} {:>12.0} {:>12.1}",
            summary.accuracy,
            rates.join("/"),
            summary.mean_flops,
            summary.mean_latency_us
        );
    }

    // Degenerate policies: no exits behaves as the plain backbone; thr = 1
    // always reaches the fail-safe.
    let plain = ExitPolicy::new(vec![], 0.0)?;
    let (_, s) = infer_batch(&model, &test, &plain, latency)?;
    println!(
        "\nno selected exits -> always final classifier (rate {:.2})",
        s.exit_rates.last().unwrap()
    );
    Ok(())
}
