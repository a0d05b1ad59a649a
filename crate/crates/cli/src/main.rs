//! `odtl` — synthesize drift datasets, train models offline, run
//! streaming-adaptation experiments, and inspect the artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use odtl_cli::formats::{
    read_dataset_file, read_model_file, write_dataset_file, write_model_file,
};
use odtl_cli::report::{numeric_name, render_experiment, render_training_log};
use odtl_cli::{atomic_write, FormatError};
use odtl_core::data::{
    make_l1po, make_l1po2, make_l1so, stratified_validation_split, synth, DriftSpec, SplitPlan,
    WindowedDataset,
};
use odtl_core::harness::{
    assemble_report, count_macs, count_update_params, run_experiment, run_round, OdtlSchedule,
};
use odtl_core::model::{ExecMode, ForwardWorkspace, Topology};
use odtl_core::odtl::TileSize;
use odtl_core::tensor::{argmax, NumericMode};
use odtl_core::train::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "odtl",
    about = "Inference and streaming last-layer training for 1D residual CNNs, \
             with user-drift evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drift dataset and write it to a dataset file.
    Synth(SynthArgs),
    /// Train a model offline on a dataset file and write a model file.
    Train(TrainArgs),
    /// Run a session-out or person-out evaluation and print a report.
    Eval(EvalArgs),
    /// Run the person-out protocol with a post-deployment training
    /// stream (40/60 user split) and print a report.
    OdtlEval(OdtlEvalArgs),
    /// Classify every window of a dataset file with a model file.
    Infer(InferArgs),
    /// Print deterministic operation counters for a topology.
    Profile(ProfileArgs),
    /// Dump a model file header.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy)]
struct TopologyArg {
    channels: usize,
    width: usize,
    classes: usize,
}

fn parse_topology(s: &str) -> Result<TopologyArg, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected C_i,W_i,C (e.g. 4,40,8)".into());
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if nums.contains(&0) {
        return Err("topology counts must be positive".into());
    }
    Ok(TopologyArg {
        channels: nums[0],
        width: nums[1],
        classes: nums[2],
    })
}

#[derive(Clone, Copy, ValueEnum)]
enum NumericArg {
    F32,
    Bf16,
}

impl From<NumericArg> for NumericMode {
    fn from(arg: NumericArg) -> Self {
        match arg {
            NumericArg::F32 => NumericMode::Full32,
            NumericArg::Bf16 => NumericMode::Truncated16,
        }
    }
}

/// Offline-training knobs shared by train/eval/odtl-eval.
#[derive(Args)]
struct TrainOpts {
    /// Epoch cap for offline training.
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Weight samples inversely to their class frequency.
    #[arg(long)]
    class_weights: bool,
    /// Fraction of the offline pool held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f32,
}

impl TrainOpts {
    fn to_config(&self, learning_rate: f32, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            class_weighting: self.class_weights,
            validation_fraction: self.val_fraction,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Window shape and class count as C_i,W_i,C.
    #[arg(long, value_parser = parse_topology)]
    topology: TopologyArg,
    #[arg(long, default_value_t = 4)]
    users: usize,
    #[arg(long, default_value_t = 2)]
    sessions: usize,
    /// Samples per class per session.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Per-user drift strength (gain/offset/time-warp spread).
    #[arg(long, default_value_t = 0.0)]
    drift: f32,
    /// Additive noise level.
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Offline-training learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Numeric tag written to the model file (narrowed at load).
    #[arg(long, value_enum, default_value = "f32")]
    numeric: NumericArg,
    /// Optional JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    L1so,
    L1po,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    split: SplitArg,
    /// Fold count for l1so; defaults to the number of users.
    #[arg(long)]
    folds: Option<usize>,
    /// Offline-training learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    numeric: NumericArg,
    /// Parallel round workers (1 keeps logs bit-stable on any machine).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write the report to a file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct OdtlEvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Named schedule: recgym, qvar, or ultra.
    #[arg(long)]
    preset: Option<String>,
    /// Streaming passes over the post-deployment set.
    #[arg(long)]
    epochs: Option<usize>,
    /// Streaming learning rate.
    #[arg(long)]
    lr: Option<f32>,
    /// Streaming momentum.
    #[arg(long)]
    momentum: Option<f32>,
    /// Share of each user's samples used as the post-deployment stream.
    #[arg(long, default_value_t = 0.4)]
    train_fraction: f32,
    /// Update tile size in entries; whole-layer when omitted.
    #[arg(long)]
    tile_size: Option<usize>,
    /// Offline-training learning rate.
    #[arg(long, default_value_t = 0.001)]
    train_lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    numeric: NumericArg,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Also write the predictions to a file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, value_parser = parse_topology)]
    topology: TopologyArg,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, FormatError> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::OdtlEval(args) => cmd_odtl_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, FormatError> {
    let spec = DriftSpec {
        channels: args.topology.channels,
        width: args.topology.width,
        classes: args.topology.classes,
        num_users: args.users,
        sessions_per_user: args.sessions,
        samples_per_class_per_session: args.samples,
        user_drift: args.drift,
        noise: args.noise,
        seed: args.seed,
    };
    let ds = synth(&spec)?;
    write_dataset_file(&args.out, &ds)?;
    println!(
        "synthesized samples={} users={} classes={} drift={} noise={} -> {}",
        ds.len(),
        args.users,
        args.topology.classes,
        args.drift,
        args.noise,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, FormatError> {
    let ds = read_dataset_file(&args.dataset)?;
    let topology = Topology::new(ds.channels(), ds.width(), ds.classes());
    let config = args.opts.to_config(args.lr, args.seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let (train_idx, val_idx) =
        stratified_validation_split(&ds, &all, config.validation_fraction)?;

    let (model, report) = train(&ds, &train_idx, &val_idx, topology, &config)?;
    let tagged = model.deployed(args.numeric.into());
    write_model_file(&args.out, &tagged)?;
    if let Some(log) = &args.log {
        atomic_write(log, render_training_log(&report).as_bytes())?;
    }
    println!(
        "trained epochs={} best_epoch={} best_val_loss={:.6} train_acc={:.6} params={} -> {}",
        report.epochs_run,
        report.best_epoch,
        report.best_validation_loss,
        report.final_train_accuracy,
        tagged.param_count(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// Run a plan's rounds across `jobs` workers; identical output to the
// sequential path because every round derives its own seeds.
#[allow(clippy::too_many_arguments)]
fn run_plan(
    ds: &WindowedDataset,
    topology: Topology,
    config: &TrainConfig,
    plan: &SplitPlan,
    schedule: Option<&OdtlSchedule>,
    tile_size: TileSize,
    mode: NumericMode,
    jobs: usize,
) -> odtl_core::harness::ExperimentReport {
    if jobs <= 1 || plan.rounds.len() <= 1 {
        return run_experiment(ds, topology, config, plan, schedule, tile_size, mode);
    }
    let next = AtomicUsize::new(0);
    let records = Mutex::new(Vec::with_capacity(plan.rounds.len()));
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(plan.rounds.len()) {
            scope.spawn(|| loop {
                let id = next.fetch_add(1, Ordering::SeqCst);
                if id >= plan.rounds.len() {
                    break;
                }
                let record = run_round(
                    ds,
                    &plan.rounds[id],
                    topology,
                    config,
                    schedule,
                    tile_size,
                    mode,
                    id,
                );
                records.lock().unwrap().push(record);
            });
        }
    });
    let records = records.into_inner().unwrap();
    assemble_report(plan.strategy, mode, topology, records)
}

fn emit_report(
    report: &odtl_core::harness::ExperimentReport,
    out: Option<&Path>,
) -> Result<ExitCode, FormatError> {
    let text = render_experiment(report);
    print!("{text}");
    if let Some(path) = out {
        atomic_write(path, text.as_bytes())?;
    }
    if report.failed_rounds() > 0 {
        eprintln!("error: {} round(s) failed", report.failed_rounds());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, FormatError> {
    let ds = read_dataset_file(&args.dataset)?;
    let topology = Topology::new(ds.channels(), ds.width(), ds.classes());
    let config = args.opts.to_config(args.lr, args.seed);
    let plan = match args.split {
        SplitArg::L1so => {
            // Fold count pairs with the contributor count by default.
            let folds = args.folds.unwrap_or_else(|| ds.users().len());
            make_l1so(&ds, folds, config.validation_fraction, args.seed)?
        }
        SplitArg::L1po => make_l1po(&ds, config.validation_fraction)?,
    };
    let report = run_plan(
        &ds,
        topology,
        &config,
        &plan,
        None,
        TileSize::WholeLayer,
        args.numeric.into(),
        args.jobs,
    );
    emit_report(&report, args.out.as_deref())
}

fn cmd_odtl_eval(args: OdtlEvalArgs) -> Result<ExitCode, FormatError> {
    let ds = read_dataset_file(&args.dataset)?;
    let topology = Topology::new(ds.channels(), ds.width(), ds.classes());
    let config = args.opts.to_config(args.train_lr, args.seed);

    let mut schedule = match &args.preset {
        Some(name) => OdtlSchedule::preset(name).ok_or_else(|| {
            FormatError::HeaderInvalid(format!(
                "unknown preset '{name}' (expected one of {:?})",
                OdtlSchedule::PRESET_NAMES
            ))
        })?,
        None => OdtlSchedule::new(1, 0.002, 0.5),
    };
    if let Some(epochs) = args.epochs {
        schedule.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        schedule.learning_rate = lr;
    }
    if let Some(momentum) = args.momentum {
        schedule.momentum = momentum;
    }
    schedule = schedule.with_shuffle_seed(args.seed);
    schedule.validate()?;

    let tile = match args.tile_size {
        Some(n) => TileSize::Entries(n),
        None => TileSize::WholeLayer,
    };
    let plan = make_l1po2(&ds, args.train_fraction, config.validation_fraction, args.seed)?;
    println!(
        "odtl schedule: epochs={} lr={} momentum={} numeric={}",
        schedule.epochs,
        schedule.learning_rate,
        schedule.momentum,
        numeric_name(args.numeric.into())
    );
    let report = run_plan(
        &ds,
        topology,
        &config,
        &plan,
        Some(&schedule),
        tile,
        args.numeric.into(),
        args.jobs,
    );
    emit_report(&report, args.out.as_deref())
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode, FormatError> {
    let model = read_model_file(&args.model)?;
    let ds = read_dataset_file(&args.dataset)?;
    if model.topology.input_channels != ds.channels()
        || model.topology.input_width != ds.width()
        || model.topology.num_classes != ds.classes()
    {
        return Err(FormatError::HeaderInvalid(format!(
            "model expects {}x{} with {} classes, dataset is {}x{} with {}",
            model.topology.input_channels,
            model.topology.input_width,
            model.topology.num_classes,
            ds.channels(),
            ds.width(),
            ds.classes()
        )));
    }

    let mut ws = ForwardWorkspace::new(&model.topology);
    let mut text = String::new();
    let mut hits = 0usize;
    for (i, s) in ds.samples().iter().enumerate() {
        model.forward_into(&s.window, ExecMode::Infer, &mut ws)?;
        let pred = argmax(ws.probabilities());
        let ok = pred == usize::from(s.label);
        hits += usize::from(ok);
        text.push_str(&format!(
            "sample={i} user={} label={} pred={pred} p={:.6} ok={}\n",
            s.user_id,
            s.label,
            ws.probabilities()[pred],
            u8::from(ok)
        ));
    }
    text.push_str(&format!(
        "accuracy={:.6} samples={}\n",
        hits as f64 / ds.len() as f64,
        ds.len()
    ));
    print!("{text}");
    if let Some(path) = &args.out {
        atomic_write(path, text.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(args: ProfileArgs) -> Result<ExitCode, FormatError> {
    let topo = Topology::new(
        args.topology.channels,
        args.topology.width,
        args.topology.classes,
    );
    println!(
        "macs_per_inference={} params_per_update={}",
        count_macs(&topo),
        count_update_params(&topo)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode, FormatError> {
    let summary = odtl_cli::formats::inspect_model(&std::fs::read(&args.model)?)?;
    println!(
        "magic=ODTL version={} channels={} width={} classes={} hidden={} blocks={} numeric={} params={} crc=ok",
        summary.version,
        summary.input_channels,
        summary.input_width,
        summary.num_classes,
        summary.hidden_channels,
        summary.num_blocks,
        numeric_name(summary.numeric_mode),
        summary.param_count
    );
    Ok(ExitCode::SUCCESS)
}
