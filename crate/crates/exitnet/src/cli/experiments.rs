//! Experiment sweeps: per-exit personalisation accuracy, accuracy vs sample
//! budget, the threshold/latency trade-off and training-cost comparisons.
//! CSV outputs are byte-stable under a fixed config and seed; measured
//! wall-clock numbers go to separate .txt files.

use std::time::Instant;

use crate::cli::{train_global_model, DataBundle, OutputDir};
use crate::config::ExperimentConfig;
use crate::data::{partition_users, split_calibration, PartitionConfig};
use crate::error::{Error, Result};
use crate::infer::{infer_batch, ExitPolicy};
use crate::loss::PersonalisationConfig;
use crate::model::ModelGraph;
use crate::plot::Series;
use crate::train::{
    evaluate_exits, exit_agreement, personalise_exits, train_global, training_flops, TrainingMode,
};

const SAMPLE_BUDGETS: [usize; 3] = [128, 512, 2048];

pub fn run_experiment(name: &str, cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    match name {
        "accuracy-per-exit" => accuracy_per_exit(cfg, out),
        "accuracy-vs-samples" => accuracy_vs_samples(cfg, out),
        "threshold-sweep" => threshold_sweep(cfg, out),
        "training-cost" => training_cost(cfg, out),
        other => Err(Error::config(format!(
            "unknown experiment {other:?}; expected accuracy-per-exit, \
             accuracy-vs-samples, threshold-sweep or training-cost"
        ))),
    }
}

fn modes(cfg: &ExperimentConfig) -> [(&'static str, PersonalisationConfig); 2] {
    let base = cfg.personalisation;
    [
        (
            "hard_labels",
            PersonalisationConfig {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                ..base
            },
        ),
        (
            "self_distillation",
            PersonalisationConfig {
                alpha: 0.0,
                beta: 1.0,
                gamma: 0.0,
                ..base
            },
        ),
    ]
}

fn prepared_global(cfg: &ExperimentConfig) -> Result<(DataBundle, ModelGraph)> {
    let bundle = crate::cli::load_or_generate_data(cfg, None)?;
    log::info!(
        "training global model on {} generic samples",
        bundle.train.len()
    );
    let (model, _) = train_global_model(cfg, &bundle)?;
    Ok((bundle, model))
}

/// Per-exit accuracy on one user's test split: global model vs hard-label
/// and self-distillation personalisation, plus top-1 agreement with the
/// final exit.
fn accuracy_per_exit(cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    let (bundle, global) = prepared_global(cfg)?;
    let user = bundle.user(0)?;
    let (train, calib) = split_calibration(
        &user.train,
        cfg.calibration.calib_fraction,
        cfg.seed ^ 0x5eed,
    )?;

    let mut acc_csv = String::from("mode,exit_id,accuracy\n");
    let mut agree_csv = String::from("mode,exit_id,agreement\n");
    let mut acc_series = Vec::new();

    let mut record = |mode: &str, model: &ModelGraph| -> Result<()> {
        let accs = evaluate_exits(model, &user.test)?;
        let agrees = exit_agreement(model, &user.test)?;
        let mut points = Vec::new();
        for (i, acc) in accs.iter().enumerate() {
            acc_csv.push_str(&format!("{mode},{},{acc:.6}\n", i + 1));
            points.push(((i + 1) as f64, *acc));
        }
        for (i, agree) in agrees.iter().enumerate() {
            agree_csv.push_str(&format!("{mode},{},{agree:.6}\n", i + 1));
        }
        acc_series.push(Series {
            name: mode.to_string(),
            points,
        });
        Ok(())
    };

    record("global", &global)?;
    for (mode, loss_cfg) in modes(cfg) {
        log::info!("personalising ({mode}) on {} samples", train.len());
        let mut model = global.clone();
        personalise_exits(&mut model, &train, Some(&calib), &loss_cfg)?;
        record(mode, &model)?;
    }

    out.write("accuracy_per_exit.csv", &acc_csv)?;
    out.write("agreement_per_exit.csv", &agree_csv)?;
    crate::cli::write_line_chart(
        out,
        "accuracy_per_exit.svg",
        "Per-exit accuracy on user data",
        "exit ordinal",
        "accuracy",
        &acc_series,
    )?;
    Ok(())
}

/// Exit accuracy as a function of the personalisation sample budget, for the
/// hard-label and self-distillation modes.
fn accuracy_vs_samples(cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    let (_bundle, global) = prepared_global(cfg)?;
    let max_budget = *SAMPLE_BUDGETS.iter().max().expect("budgets");
    let test_per_user = 200;
    // A dedicated user with a large enough disjoint train/test draw.
    let pool = crate::cli::sample_user_pool(cfg)?;
    let users = partition_users(
        &pool,
        &PartitionConfig {
            n_users: 1,
            samples_per_user: max_budget + test_per_user,
            test_per_user,
            sigma: cfg.data.partition.sigma,
            seed: cfg.data.partition.seed ^ 0xbeef,
        },
    )?;
    let user = &users[0];

    let mut csv = String::from("n_samples,exit_id,mode,accuracy\n");
    let mut series: Vec<Series> = Vec::new();
    for (mode, loss_cfg) in modes(cfg) {
        let mut per_exit_points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); global.num_outputs()];
        for &budget in &SAMPLE_BUDGETS {
            let indices: Vec<usize> = (0..budget).collect();
            let train = user.train.subset(&indices)?;
            log::info!("personalising ({mode}) on {budget} samples");
            let mut model = global.clone();
            personalise_exits(&mut model, &train, None, &loss_cfg)?;
            let accs = evaluate_exits(&model, &user.test)?;
            for (i, acc) in accs.iter().enumerate() {
                csv.push_str(&format!("{budget},{},{mode},{acc:.6}\n", i + 1));
                per_exit_points[i].push((budget as f64, *acc));
            }
        }
        for (i, points) in per_exit_points.into_iter().enumerate() {
            if i < global.num_exits() {
                series.push(Series {
                    name: format!("exit {} ({mode})", i + 1),
                    points,
                });
            }
        }
    }
    out.write("accuracy_vs_samples.csv", &csv)?;
    crate::cli::write_line_chart(
        out,
        "accuracy_vs_samples.svg",
        "Accuracy vs personalisation samples",
        "personalisation samples",
        "accuracy",
        &series,
    )?;
    Ok(())
}

/// Accuracy/latency trade-off across the confidence-threshold grid, before
/// and after personalisation.
fn threshold_sweep(cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    let (bundle, global) = prepared_global(cfg)?;
    let user = bundle.user(0)?;
    let (train, calib) = split_calibration(
        &user.train,
        cfg.calibration.calib_fraction,
        cfg.seed ^ 0x5eed,
    )?;
    let mut personalised = global.clone();
    personalise_exits(
        &mut personalised,
        &train,
        Some(&calib),
        &cfg.personalisation,
    )?;

    let latency = cfg.inference.latency_model();
    let mut csv = String::from("model,threshold,accuracy,mean_latency_us\n");
    let mut series = Vec::new();
    for (name, model) in [("global", &global), ("personalised", &personalised)] {
        let mut points = Vec::new();
        for &thr in &cfg.calibration.thresholds {
            let policy = ExitPolicy::all_exits(model, thr)?;
            let (_, summary) = infer_batch(model, &user.test, &policy, latency)?;
            csv.push_str(&format!(
                "{name},{thr:.2},{:.6},{:.3}\n",
                summary.accuracy, summary.mean_latency_us
            ));
            points.push((summary.mean_latency_us, summary.accuracy));
        }
        series.push(Series {
            name: name.to_string(),
            points,
        });
    }
    out.write("threshold_sweep.csv", &csv)?;
    crate::cli::write_line_chart(
        out,
        "threshold_sweep.svg",
        "Accuracy vs mean latency across confidence thresholds",
        "mean latency (us)",
        "accuracy",
        &series,
    )?;
    Ok(())
}

/// Analytic and measured training-cost comparison: full joint training vs
/// exits-only personalisation. Analytic numbers are deterministic and land
/// in the CSV; wall-clock measurements go to a separate .txt file.
fn training_cost(cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    let (bundle, global) = prepared_global(cfg)?;
    let user = bundle.user(0)?;
    let epochs = cfg.personalisation.epochs;
    let n_samples = user.train.len();
    let passes = (epochs * n_samples) as u64;

    let full_flops = training_flops(&global, TrainingMode::Full, passes)?;
    let exits_flops = training_flops(&global, TrainingMode::ExitsOnly, passes)?;
    // Single mid-placement exit, the cheapest personalisation target.
    let single_exit = ModelGraph::build(&cfg.model.backbone, 1, cfg.seed)?;
    let exit1_flops = training_flops(&single_exit, TrainingMode::ExitsOnly, passes)?;

    let mut csv = String::from("mode,analytic_flops,analytic_speedup_vs_full\n");
    csv.push_str(&format!("full,{full_flops},1.00\n"));
    csv.push_str(&format!(
        "exits_only,{exits_flops},{:.2}\n",
        full_flops as f64 / exits_flops as f64
    ));
    csv.push_str(&format!(
        "exit1_only,{exit1_flops},{:.2}\n",
        full_flops as f64 / exit1_flops as f64
    ));
    out.write("training_cost.csv", &csv)?;

    // Measured wall-clock for the same epochs and data.
    let mut full_model = global.clone();
    let full_cfg = crate::train::GlobalTrainConfig {
        epochs,
        lr: cfg.personalisation.lr,
        lr_decay_every: 0,
        momentum: cfg.personalisation.momentum,
        batch_size: cfg.personalisation.batch_size,
        freeze_backbone: false,
        seed: cfg.seed,
        ..Default::default()
    };
    log::info!("timing full training, {epochs} epochs over {n_samples} samples");
    let t0 = Instant::now();
    train_global(&mut full_model, &user.train, &full_cfg)?;
    let full_secs = t0.elapsed().as_secs_f64();

    let mut exits_model = global.clone();
    let exits_cfg = PersonalisationConfig {
        epochs,
        ..cfg.personalisation
    };
    log::info!("timing exits-only personalisation, same schedule");
    let t0 = Instant::now();
    personalise_exits(&mut exits_model, &user.train, None, &exits_cfg)?;
    let exits_secs = t0.elapsed().as_secs_f64();

    out.write(
        "training_cost_timings.txt",
        &format!(
            "full_seconds {full_secs:.3}\nexits_only_seconds {exits_secs:.3}\n\
             measured_speedup {:.2}\n",
            full_secs / exits_secs
        ),
    )?;
    log::info!(
        "analytic speedup {:.1}x, measured {:.1}x",
        full_flops as f64 / exits_flops as f64,
        full_secs / exits_secs
    );
    Ok(())
}
