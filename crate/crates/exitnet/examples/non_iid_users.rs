//! Gaussian label-popularity profiles: per-user class distributions centred
//! on a random class, and the non-IID datasets sampled from them.
//!
//! Run with: cargo run --release --example non_iid_users

use exitnet::data::{
    gen_blobs, gen_user_distribution, partition_users, sample_user_dataset, BlobParams,
    PartitionConfig, UserDistribution,
};

fn main() -> exitnet::Result<()> {
    let k = 10;
    println!("class probabilities, centre 3:");
    for sigma in [0.5, 1.0, 2.0, 100.0] {
        let dist = UserDistribution::gaussian(k, 3, sigma)?;
        let probs: Vec<String> = dist.probs.iter().map(|p| format!("{p:.3}")).collect();
        println!("  sigma {sigma:>5}: [{}]", probs.join(", "));
    }

    let global = gen_blobs(k, 4000, &BlobParams::default(), 1)?;
    println!("\nsampled user datasets (1000 draws each):");
    for seed in 0..4 {
        let dist = gen_user_distribution(k, 1.0, seed)?;
        let user = sample_user_dataset(&global, &dist, 1000, seed)?;
        println!(
            "  user {seed} (centre {}): histogram {:?}",
            dist.center,
            user.label_histogram()
        );
    }

    let users = partition_users(
        &global,
        &PartitionConfig {
            n_users: 3,
            samples_per_user: 225,
            test_per_user: 100,
            sigma: 1.0,
            seed: 42,
        },
    )?;
    println!("\npartitioned users (225 samples each, 100 held out):");
    for (i, user) in users.iter().enumerate() {
        println!(
            "  user {i}: centre {}, train {} / test {}, train histogram {:?}",
            user.dist.center,
            user.train.len(),
            user.test.len(),
            user.train.label_histogram()
        );
    }
    Ok(())
}
