//! Profiling and confidence calibration: one pass over a calibration set,
//! Pareto-front analysis in latency/accuracy space, smallest qualifying
//! threshold, and exit pruning.
//!
//! Run with: cargo run --release --example calibrate

use exitnet::data::{gen_blobs, partition_users, split_calibration, BlobParams, PartitionConfig};
use exitnet::infer::LatencyModel;
use exitnet::loss::PersonalisationConfig;
use exitnet::model::{BackboneSpec, ModelGraph};
use exitnet::profile::{
    calibrate_threshold, default_threshold_grid, profile, CalibrationParams, ReferenceMode,
};
use exitnet::train::{personalise_exits, train_global, GlobalTrainConfig};

fn main() -> exitnet::Result<()> {
    let blobs = BlobParams {
        height: 16,
        width: 16,
        jitter: 1.8,
        ..BlobParams::default()
    };
    let train = gen_blobs(10, 1500, &blobs, 1)?;
    let pool = gen_blobs(10, 6000, &blobs, 2)?;

    let spec = BackboneSpec {
        input_shape: [1, 16, 16],
        widths: vec![8, 8, 16, 16, 32, 32],
        pool_after: vec![2, 4],
        ..BackboneSpec::default()
    };
    let mut model = ModelGraph::build(&spec, 3, 7)?;
    println!("training + personalising...");
    train_global(
        &mut model,
        &train,
        &GlobalTrainConfig {
            epochs: 5,
            seed: 61,
            ..GlobalTrainConfig::default()
        },
    )?;
    let users = partition_users(
        &pool,
        &PartitionConfig {
            n_users: 1,
            samples_per_user: 700,
            test_per_user: 200,
            sigma: 1.0,
            seed: 14,
        },
    )?;
    let (train_split, calib) = split_calibration(&users[0].train, 0.2, 5)?;
    personalise_exits(
        &mut model,
        &train_split,
        Some(&calib),
        &PersonalisationConfig::hard_labels(),
    )?;

    let latency = LatencyModel::FlopProportional { ns_per_flop: 0.5 };
    let report = profile(
        &model,
        &calib,
        &default_threshold_grid(),
        ReferenceMode::HardLabels,
        latency,
    )?;
    println!(
        "\nper-exit profile over {} calibration samples (single pass):",
        report.num_samples()
    );
    for e in &report.per_exit {
        println!(
            "  exit {}: accuracy {:.3}, mean confidence {:.3}, {} flops, {} params",
            e.ordinal, e.accuracy, e.mean_confidence, e.flops, e.params
        );
    }

    let result = calibrate_threshold(&report, &CalibrationParams::default())?;
    println!("\nPareto front (latency_us, accuracy, threshold):");
    for (lat, acc, thr) in &result.pareto {
        let marker = if *thr == result.thr_conf {
            "  <- chosen"
        } else {
            ""
        };
        println!("  {lat:>9.1} {acc:.3} @ thr {thr:.2}{marker}");
    }
    println!(
        "\nchosen thr_conf {} keeps accuracy {:.3} within tolerance of the final exit ({:.3});",
        result.thr_conf, result.expected_accuracy, result.reference_accuracy
    );
    println!(
        "exits kept after pruning: {:?}, expected mean latency {:.1}us",
        result.selected_exits, result.expected_latency_us
    );
    Ok(())
}
