//! Frozen-backbone personalisation of the exit heads on one user's
//! concentrated (non-IID) data, with and without labels. The backbone and
//! final classifier stay bit-identical, so the global model remains available
//! as a fail-safe.
//!
//! Run with: cargo run --release --example personalise

use exitnet::data::{gen_blobs, partition_users, split_calibration, BlobParams, PartitionConfig};
use exitnet::loss::PersonalisationConfig;
use exitnet::model::{BackboneSpec, ModelGraph};
use exitnet::train::{
    evaluate_exits, exit_agreement, personalise_exits, train_global, GlobalTrainConfig,
};

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
    let mut global = ModelGraph::build(&spec, 3, 7)?;
    println!("training the global model...");
    train_global(
        &mut global,
        &train,
        &GlobalTrainConfig {
            epochs: 5,
            seed: 61,
            ..GlobalTrainConfig::default()
        },
    )?;

    // One user who mostly sees three neighbouring classes.
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
    let user = &users[0];
    let (train_split, calib) = split_calibration(&user.train, 0.2, 5)?;
    println!(
        "user centre class {}, label histogram {:?}",
        user.dist.center,
        user.test.label_histogram()
    );

    let checksum = global.frozen_checksum();
    let before = evaluate_exits(&global, &user.test)?;
    println!("\nper-exit accuracy on the user's held-out data:");
    println!("  global:       {:?}", rounded(&before));

    for (name, cfg) in [
        ("hard labels", PersonalisationConfig::hard_labels()),
        ("distillation", PersonalisationConfig::self_distillation()),
        ("self-superv.", PersonalisationConfig::self_supervision()),
    ] {
        let mut model = global.clone();
        personalise_exits(&mut model, &train_split, Some(&calib), &cfg)?;
        let after = evaluate_exits(&model, &user.test)?;
        let agree = exit_agreement(&model, &user.test)?;
        println!(
            "  {name}: {:?}  (agreement with final: {:?})",
            rounded(&after),
            rounded(&agree)
        );
        assert_eq!(
            model.frozen_checksum(),
            checksum,
            "backbone must stay frozen"
        );
    }
    println!("\nbackbone + final classifier parameters untouched in every mode");
    Ok(())
}

fn rounded(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| (v * 1000.0).round() / 1000.0)
        .collect()
}
