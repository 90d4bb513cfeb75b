//! The three-phase runtime loop: inference with the calibrated policy,
//! stochastic exploration of exit quality, drift detection on a re-centred
//! input stream, and the personalisation round scheduled at plug-in time.
//!
//! Run with: cargo run --release --example orchestrate

use exitnet::data::{
    gen_blobs, partition_users, split_calibration, BlobParams, PartitionConfig, UserDistribution,
};
use exitnet::infer::{ExitPolicy, LatencyModel};
use exitnet::loss::PersonalisationConfig;
use exitnet::model::{BackboneSpec, ModelGraph};
use exitnet::orchestrator::{
    exploration_baselines, Action, Event, OrchestratorConfig, OrchestratorState,
};
use exitnet::train::{personalise_exits, train_global, GlobalTrainConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

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
    println!("training + personalising for the initial user distribution...");
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
    let user = &users[0];
    let loss_cfg = PersonalisationConfig::hard_labels();
    let (train_split, calib) = split_calibration(&user.train, 0.2, 5)?;
    personalise_exits(&mut model, &train_split, Some(&calib), &loss_cfg)?;

    let cfg = OrchestratorConfig {
        p_expl: 0.25,
        thr_conf_active: 0.6,
        thr_conf_raised: 0.9,
        drift_window: 15,
        min_new_samples: usize::MAX,
        ..OrchestratorConfig::default()
    };
    let policy = ExitPolicy::all_exits(&model, cfg.thr_conf_active)?;
    let baselines = exploration_baselines(&model, &calib, &policy.selected_exits, &loss_cfg)?;
    println!("per-exit loss baselines from calibration: {baselines:?}");
    let mut state = OrchestratorState::new(
        &cfg,
        policy,
        baselines,
        loss_cfg,
        LatencyModel::FlopProportional { ns_per_flop: 0.5 },
    )?;

    // 300 in-distribution events, then the user's world shifts by 5 classes.
    let shifted = UserDistribution::gaussian(10, (user.dist.center + 5) % 10, 1.0)?;
    let pools = pool.class_pools();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut explorations = 0;
    for step in 0..1200usize {
        let dist = if step < 300 { &user.dist } else { &shifted };
        let class = dist.sample_class(&mut rng);
        let idx = pools[class][rng.gen_range(0..pools[class].len())];
        let event = Event::SampleArrived {
            input: pool.image(idx),
            label: Some(pool.label(idx)),
        };
        let outcome = state.step(&model, &cfg, event)?;
        explorations += outcome.explored as usize;
        if step == 299 {
            println!(
                "step 300: distribution re-centres ({} -> {})",
                user.dist.center, shifted.center
            );
        }
        if outcome.drift_detected {
            println!(
                "step {step}: drift detected after {explorations} explorations; actions: {:?}",
                outcome.actions.iter().map(Action::name).collect::<Vec<_>>()
            );
            println!(
                "active threshold now {:.2}, phase {}",
                state.policy.thr_conf,
                state.phase.name()
            );
            break;
        }
    }

    let outcome = state.step(&model, &cfg, Event::DevicePluggedIn)?;
    println!(
        "device plugged in -> {:?}",
        outcome.actions.iter().map(Action::name).collect::<Vec<_>>()
    );
    println!(
        "({} samples buffered for the personalisation round)",
        state.take_buffered().len()
    );
    Ok(())
}
