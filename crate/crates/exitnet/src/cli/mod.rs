//! Command-line surface and the reusable pipeline steps behind it.
//!
//! Subcommands: `config`, `gen-data`, `train-global`, `personalise`,
//! `profile`, `calibrate`, `infer`, `simulate` and `experiment`. Every run is
//! reproducible under a fixed config and seed; CSV outputs are byte-stable.

mod experiments;

pub use experiments::run_experiment;

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    gen_blobs, idx, partition_users, split_calibration, Dataset, Manifest, UserDistribution,
    UserSplit,
};
use crate::error::{Error, Result};
use crate::infer::{infer_batch, results_to_csv, ExitPolicy};
use crate::loss::PersonalisationConfig;
use crate::model::{load_checkpoint, save_checkpoint, ModelGraph};
use crate::orchestrator::{
    event_log_row, exploration_baselines, Action, Event, OrchestratorState, EVENT_LOG_HEADER,
};
use crate::plot::{line_chart, scatter_chart, Series};
use crate::profile::{calibrate_threshold, profile, ProfileReport, ReferenceMode};
use crate::tensor::Tensor;
use crate::train::{personalise_exits, train_global, TrainLog};

#[derive(Parser)]
#[command(
    name = "exitnet",
    version,
    about = "Multi-exit CNN personalisation workbench"
)]
struct Cli {
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = automatic).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Use the loss weights from the config file.
    Config,
    /// Supervised personalisation (hard labels).
    Hard,
    /// Self-distillation against the final exit.
    Distill,
    /// Self-supervision on the final exit's top-1.
    Selfsup,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Hard,
    Final,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the configuration.
    Config {
        /// Print the fully populated default config and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Generate datasets and user partitions, persisted as IDX files.
    GenData,
    /// Train the global multi-exit model on generic data.
    TrainGlobal {
        /// Load datasets from a gen-data directory instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Personalise exit heads on one user's data (frozen backbone).
    Personalise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        user: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Config)]
        mode: ModeArg,
    },
    /// Profile per-exit statistics on a user's calibration split.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        user: usize,
        #[arg(long, value_enum, default_value_t = ReferenceArg::Hard)]
        reference: ReferenceArg,
    },
    /// Profile, Pareto-analyse and pick the operating threshold.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        user: usize,
        #[arg(long, value_enum, default_value_t = ReferenceArg::Hard)]
        reference: ReferenceArg,
    },
    /// Early-exit inference over a dataset split.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate on this user's test split; the generic test set when absent.
        #[arg(long)]
        user: Option<usize>,
        /// Confidence threshold; config value when absent.
        #[arg(long)]
        thr: Option<f32>,
        /// Comma-separated exit ordinals, e.g. "1,3"; all exits when absent.
        #[arg(long)]
        exits: Option<String>,
        /// Also sweep the calibration threshold grid.
        #[arg(long)]
        sweep: bool,
    },
    /// Run the three-phase orchestrator over a simulated event stream.
    Simulate {
        /// Start from a trained checkpoint instead of training in place.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Reproduce a full experiment sweep (CSV + SVG outputs).
    Experiment {
        /// One of: accuracy-per-exit, accuracy-vs-samples, threshold-sweep,
        /// training-cost.
        name: String,
    },
}

/// Entry point used by the thin binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter_or("EXITNET_LOG", "info")
            .write_style("EXITNET_LOG_STYLE"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .ok();
        }
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }

    if let Command::Config { print_defaults } = &cli.command {
        if *print_defaults {
            print!("{}", ExperimentConfig::default().to_toml());
        } else {
            print!("{}", cfg.to_toml());
        }
        return Ok(());
    }

    let out = OutputDir::new(&cli.out)?;
    let result = dispatch(&cli.command, &cfg, &out);
    if result.is_err() {
        out.cleanup();
    }
    result
}

fn dispatch(command: &Command, cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    match command {
        Command::Config { .. } => unreachable!("handled before output setup"),
        Command::GenData => gen_data(cfg, out),
        Command::TrainGlobal { data } => {
            let bundle = load_or_generate_data(cfg, data.as_deref())?;
            let (model, log) = train_global_model(cfg, &bundle)?;
            save_checkpoint(&model, out.register("global.ckpt"))?;
            out.write("train_global.csv", &log.to_csv())?;
            log::info!(
                "global model and training log written to {}",
                out.root.display()
            );
            Ok(())
        }
        Command::Personalise {
            model,
            data,
            user,
            mode,
        } => {
            let bundle = load_or_generate_data(cfg, data.as_deref())?;
            let mut model = load_checkpoint(model)?;
            let user_data = bundle.user(*user)?;
            let loss_cfg = resolve_mode(cfg, *mode);
            let (train, calib) = split_calibration(
                &user_data.train,
                cfg.calibration.calib_fraction,
                cfg.seed ^ 0x5eed,
            )?;
            let log = personalise_exits(&mut model, &train, Some(&calib), &loss_cfg)?;
            save_checkpoint(
                &model,
                out.register(&format!("personalised-user{user}.ckpt")),
            )?;
            out.write(&format!("personalise-user{user}.csv"), &log.to_csv())?;
            Ok(())
        }
        Command::Profile {
            model,
            data,
            user,
            reference,
        } => {
            let report = profile_user(cfg, model, data.as_deref(), *user, *reference)?;
            out.write("profile_exits.csv", &report.per_exit_csv())?;
            out.write("profile_thresholds.csv", &report.per_threshold_csv())?;
            Ok(())
        }
        Command::Calibrate {
            model,
            data,
            user,
            reference,
        } => {
            let report = profile_user(cfg, model, data.as_deref(), *user, *reference)?;
            let result = calibrate_threshold(&report, &cfg.calibration.params)?;
            out.write("profile_exits.csv", &report.per_exit_csv())?;
            out.write("profile_thresholds.csv", &report.per_threshold_csv())?;
            out.write("calibration.txt", &result.summary_kv())?;
            out.write("pareto.csv", &result.pareto_csv())?;
            log::info!(
                "calibrated thr_conf = {} with exits {:?}",
                result.thr_conf,
                result.selected_exits
            );
            Ok(())
        }
        Command::Infer {
            model,
            data,
            user,
            thr,
            exits,
            sweep,
        } => {
            let bundle = load_or_generate_data(cfg, data.as_deref())?;
            let model = load_checkpoint(model)?;
            let eval = match user {
                Some(u) => bundle.user(*u)?.test.clone(),
                None => bundle.test.clone(),
            };
            let selected = match exits {
                Some(list) => parse_exit_list(list)?,
                None => (1..=model.num_exits()).collect(),
            };
            let thr = thr.unwrap_or(cfg.inference.thr_conf);
            let policy = ExitPolicy::new(selected.clone(), thr)?;
            let latency = cfg.inference.latency_model();
            let (results, summary) = infer_batch(&model, &eval, &policy, latency)?;
            out.write("results.csv", &results_to_csv(&results, Some(&eval.labels)))?;
            log::info!(
                "thr {}: accuracy {:.4}, mean flops {:.0}, mean latency {:.1}us",
                thr,
                summary.accuracy,
                summary.mean_flops,
                summary.mean_latency_us
            );
            if *sweep {
                let mut csv = String::from("threshold,accuracy,mean_latency_us\n");
                let mut points = Vec::new();
                for &t in &cfg.calibration.thresholds {
                    let policy = ExitPolicy::new(selected.clone(), t)?;
                    let (_, s) = infer_batch(&model, &eval, &policy, latency)?;
                    csv.push_str(&format!(
                        "{t:.2},{:.6},{:.3}\n",
                        s.accuracy, s.mean_latency_us
                    ));
                    points.push((s.mean_latency_us, s.accuracy));
                }
                out.write("threshold_sweep.csv", &csv)?;
                let svg = scatter_chart(
                    "Accuracy vs mean latency over confidence thresholds",
                    "mean latency (us)",
                    "accuracy",
                    &[Series {
                        name: "threshold grid".into(),
                        points,
                    }],
                );
                out.write("threshold_sweep.svg", &svg)?;
            }
            Ok(())
        }
        Command::Simulate { model } => simulate(cfg, model.as_deref(), out),
        Command::Experiment { name } => run_experiment(name, cfg, out),
    }
}

fn resolve_mode(cfg: &ExperimentConfig, mode: ModeArg) -> PersonalisationConfig {
    let base = cfg.personalisation;
    match mode {
        ModeArg::Config => base,
        ModeArg::Hard => PersonalisationConfig {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..base
        },
        ModeArg::Distill => PersonalisationConfig {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
            ..base
        },
        ModeArg::Selfsup => PersonalisationConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            ..base
        },
    }
}

fn parse_exit_list(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad exit ordinal {s:?}")))
        })
        .collect()
}

fn profile_user(
    cfg: &ExperimentConfig,
    model: &Path,
    data: Option<&Path>,
    user: usize,
    reference: ReferenceArg,
) -> Result<ProfileReport> {
    let bundle = load_or_generate_data(cfg, data)?;
    let model = load_checkpoint(model)?;
    let user_data = bundle.user(user)?;
    let (_, calib) = split_calibration(
        &user_data.train,
        cfg.calibration.calib_fraction,
        cfg.seed ^ 0x5eed,
    )?;
    let mode = match reference {
        ReferenceArg::Hard => ReferenceMode::HardLabels,
        ReferenceArg::Final => ReferenceMode::FinalExitAsTruth,
    };
    profile(
        &model,
        &calib,
        &cfg.calibration.thresholds,
        mode,
        cfg.inference.latency_model(),
    )
}

/// Tracks files created by a run so failures leave no partial outputs.
pub struct OutputDir {
    root: PathBuf,
    created: RefCell<Vec<PathBuf>>,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            created: RefCell::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers a file path for cleanup-on-failure and returns it.
    pub fn register(&self, name: &str) -> PathBuf {
        let path = self.root.join(name);
        self.created.borrow_mut().push(path.clone());
        path
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.register(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }

    /// Removes everything created so far (failure path).
    pub fn cleanup(&self) {
        for path in self.created.borrow_mut().drain(..) {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// Generic train/test data plus per-user splits.
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub users: Vec<UserSplit>,
}

impl DataBundle {
    pub fn user(&self, index: usize) -> Result<&UserSplit> {
        self.users.get(index).ok_or_else(|| {
            Error::config(format!(
                "user {index} out of range, partition has {} users",
                self.users.len()
            ))
        })
    }
}

/// Loads a gen-data directory, or generates the bundle from the config.
pub fn load_or_generate_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<DataBundle> {
    if let Some(dir) = dir {
        return load_bundle(cfg, dir);
    }
    generate_bundle(cfg)
}

fn generate_bundle(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let d = &cfg.data;
    let (train, test, pool) = match d.source {
        DataSource::Blobs => {
            let train = gen_blobs(d.num_classes, d.train_samples, &d.blobs, cfg.seed)?;
            let test = gen_blobs(d.num_classes, d.test_samples, &d.blobs, cfg.seed ^ 1)?;
            let pool = gen_blobs(d.num_classes, d.user_pool_samples, &d.blobs, cfg.seed ^ 2)?;
            (train, test, pool)
        }
        DataSource::Idx => {
            let train = idx::load_dataset(&d.idx_train_images, &d.idx_train_labels, d.num_classes)?;
            let test = if d.idx_test_images.is_empty() {
                train.clone()
            } else {
                idx::load_dataset(&d.idx_test_images, &d.idx_test_labels, d.num_classes)?
            };
            let pool = train.clone();
            (train, test, pool)
        }
    };
    let users = partition_users(&pool, &d.partition)?;
    Ok(DataBundle { train, test, users })
}

fn gen_data(cfg: &ExperimentConfig, out: &OutputDir) -> Result<()> {
    let bundle = generate_bundle(cfg)?;
    idx::save_dataset(&bundle.train, out.root(), "global-train")?;
    out.register("global-train-images-idx3-ubyte");
    out.register("global-train-labels-idx1-ubyte");
    idx::save_dataset(&bundle.test, out.root(), "global-test")?;
    out.register("global-test-images-idx3-ubyte");
    out.register("global-test-labels-idx1-ubyte");
    let mut users = Vec::new();
    for (i, user) in bundle.users.iter().enumerate() {
        let train_stem = format!("user{i:03}-train");
        let test_stem = format!("user{i:03}-test");
        idx::save_dataset(&user.train, out.root(), &train_stem)?;
        idx::save_dataset(&user.test, out.root(), &test_stem)?;
        for stem in [&train_stem, &test_stem] {
            out.register(&format!("{stem}-images-idx3-ubyte"));
            out.register(&format!("{stem}-labels-idx1-ubyte"));
        }
        users.push((user.dist.center, train_stem, test_stem));
    }
    let manifest = Manifest {
        num_classes: cfg.data.num_classes,
        sigma: cfg.data.partition.sigma,
        seed: cfg.data.partition.seed,
        users,
    };
    manifest.save(out.register("manifest.txt"))?;
    log::info!(
        "wrote {} users plus generic splits to {}",
        bundle.users.len(),
        out.root().display()
    );
    Ok(())
}

fn load_bundle(cfg: &ExperimentConfig, dir: &Path) -> Result<DataBundle> {
    let manifest = Manifest::load(dir.join("manifest.txt"))?;
    let k = manifest.num_classes;
    let load = |stem: &str| -> Result<Dataset> {
        idx::load_dataset(
            dir.join(format!("{stem}-images-idx3-ubyte")),
            dir.join(format!("{stem}-labels-idx1-ubyte")),
            k,
        )
    };
    let train = load("global-train")?;
    let test = load("global-test")?;
    let mut users = Vec::new();
    for (center, train_stem, test_stem) in &manifest.users {
        users.push(UserSplit {
            dist: UserDistribution::gaussian(k, *center, manifest.sigma)?,
            train: load(train_stem)?,
            test: load(test_stem)?,
        });
    }
    if cfg.data.num_classes != k {
        return Err(Error::config(format!(
            "config expects {} classes but {} has {k}",
            cfg.data.num_classes,
            dir.display()
        )));
    }
    Ok(DataBundle { train, test, users })
}

/// Builds the multi-exit model and trains it on the generic split.
pub fn train_global_model(
    cfg: &ExperimentConfig,
    bundle: &DataBundle,
) -> Result<(ModelGraph, TrainLog)> {
    let mut model = ModelGraph::build(&cfg.model.backbone, cfg.model.num_exits, cfg.seed)?;
    let mut train_cfg = cfg.global_train.clone();
    train_cfg.seed = cfg.seed ^ 0x61;
    let log = train_global(&mut model, &bundle.train, &train_cfg)?;
    Ok((model, log))
}

/// Full simulate pipeline: personalise, calibrate, then drive the
/// orchestrator through a (possibly drifting) event stream, executing the
/// personalisation rounds it schedules.
fn simulate(cfg: &ExperimentConfig, model_path: Option<&Path>, out: &OutputDir) -> Result<()> {
    let bundle = load_or_generate_data(cfg, None)?;
    let mut model = match model_path {
        Some(p) => load_checkpoint(p)?,
        None => {
            log::info!("training global model for simulation");
            train_global_model(cfg, &bundle)?.0
        }
    };
    let user = bundle.user(0)?;
    let loss_cfg = cfg.personalisation;
    let (train, calib) = split_calibration(
        &user.train,
        cfg.calibration.calib_fraction,
        cfg.seed ^ 0x5eed,
    )?;
    log::info!("personalising exits for user 0");
    personalise_exits(&mut model, &train, Some(&calib), &loss_cfg)?;
    let report = profile(
        &model,
        &calib,
        &cfg.calibration.thresholds,
        ReferenceMode::HardLabels,
        cfg.inference.latency_model(),
    )?;
    let calibration = calibrate_threshold(&report, &cfg.calibration.params)?;
    let policy = ExitPolicy::new(calibration.selected_exits.clone(), calibration.thr_conf)?;
    let baselines = exploration_baselines(&model, &calib, &policy.selected_exits, &loss_cfg)?;
    let mut state = OrchestratorState::new(
        &cfg.orchestrator,
        policy,
        baselines,
        loss_cfg,
        cfg.inference.latency_model(),
    )?;

    // Event stream drawn from the user's distribution, optionally re-centred
    // mid-stream to emulate a domain shift.
    let sim = &cfg.simulation;
    let k = cfg.data.num_classes;
    let pool = gen_blobs(k, cfg.data.user_pool_samples, &cfg.data.blobs, cfg.seed ^ 3)?;
    let pools = pool.class_pools();
    let mut stream_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57e4);
    let shifted = UserDistribution::gaussian(
        k,
        (user.dist.center + sim.shift_offset) % k,
        user.dist.sigma,
    )?;

    let mut log_csv = String::from(EVENT_LOG_HEADER);
    let mut rounds = 0usize;
    for step_idx in 0..sim.n_events {
        let event = if sim.plug_in_every > 0 && step_idx > 0 && step_idx % sim.plug_in_every == 0 {
            Event::DevicePluggedIn
        } else if sim.timer_every > 0 && step_idx > 0 && step_idx % sim.timer_every == 0 {
            Event::TimerTick
        } else {
            let dist = if sim.shift_after > 0 && step_idx >= sim.shift_after {
                &shifted
            } else {
                &user.dist
            };
            let class = dist.sample_class(&mut stream_rng);
            let pool_c = &pools[class];
            if pool_c.is_empty() {
                return Err(Error::data(format!(
                    "class {class} missing from stream pool"
                )));
            }
            let idx = pool_c[stream_rng.gen_range(0..pool_c.len())];
            Event::SampleArrived {
                input: pool.image(idx),
                label: Some(pool.label(idx)),
            }
        };
        let name = event.name();
        let outcome = state.step(&model, &cfg.orchestrator, event)?;
        log_csv.push_str(&event_log_row(step_idx, name, &state, &outcome));

        if outcome.actions.contains(&Action::RunPersonalisation) {
            rounds += 1;
            let buffered = state.take_buffered();
            let mut images = Vec::new();
            let mut labels = Vec::new();
            let [c, h, w] = bundle.train.sample_shape();
            for (img, label) in &buffered {
                images.extend_from_slice(img.data());
                labels.push(label.unwrap_or(0));
            }
            let buffered_ds = Dataset::new(
                Tensor::new(vec![buffered.len(), c, h, w], images)?,
                labels,
                k,
            )?;
            let (new_train, new_calib) = split_calibration(
                &buffered_ds,
                cfg.calibration.calib_fraction,
                cfg.seed ^ rounds as u64,
            )?;
            log::info!(
                "round {rounds}: personalising on {} buffered samples",
                new_train.len()
            );
            personalise_exits(&mut model, &new_train, Some(&new_calib), &loss_cfg)?;
            let report = profile(
                &model,
                &new_calib,
                &cfg.calibration.thresholds,
                ReferenceMode::HardLabels,
                cfg.inference.latency_model(),
            )?;
            let calibration = calibrate_threshold(&report, &cfg.calibration.params)?;
            let policy = ExitPolicy::new(calibration.selected_exits.clone(), calibration.thr_conf)?;
            let baselines =
                exploration_baselines(&model, &new_calib, &policy.selected_exits, &loss_cfg)?;
            state.complete_cycle(policy, baselines)?;
        }
    }
    out.write("events.csv", &log_csv)?;
    save_checkpoint(&model, out.register("simulated.ckpt"))?;
    log::info!(
        "simulated {} events with {rounds} personalisation rounds",
        sim.n_events
    );
    Ok(())
}

/// Per-mode personalisation used by experiments and tests.
pub fn personalised_copy(
    model: &ModelGraph,
    train: &Dataset,
    calib: Option<&Dataset>,
    loss_cfg: &PersonalisationConfig,
) -> Result<ModelGraph> {
    let mut copy = model.clone();
    personalise_exits(&mut copy, train, calib, loss_cfg)?;
    Ok(copy)
}

pub(crate) fn write_line_chart(
    out: &OutputDir,
    name: &str,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    out.write(name, &line_chart(title, x_label, y_label, series))?;
    Ok(())
}

/// Fresh pool to draw user datasets from, disjoint from the generic
/// training stream by seed.
pub fn sample_user_pool(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Blobs => gen_blobs(
            cfg.data.num_classes,
            cfg.data.user_pool_samples,
            &cfg.data.blobs,
            cfg.seed ^ 2,
        ),
        DataSource::Idx => idx::load_dataset(
            &cfg.data.idx_train_images,
            &cfg.data.idx_train_labels,
            cfg.data.num_classes,
        ),
    }
}
