//! Batch command-line front end: synthetic data generation, two-phase
//! training, evaluation, and the gradient audit. Every command is a pure
//! function of its flags, input files and seeds; reruns produce identical
//! output files.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed run), 2 usage
//! error (bad flags).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use princ::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use princ::data::{
    generate_synthetic, load_dataset, load_manifest, save_dataset, save_manifest, DatasetManifest,
};
use princ::evaluation::{
    eval_episodic, eval_nonepisodic, make_split, EpisodeSpec, EvalReport, JointSplit,
};
use princ::gradcheck::{self, GradcheckConfig};
use princ::text::Utterance;
use princ::training::{prepare_phase2, run_phase1, run_phase2, TrainReport};
use princ::{EncoderConfig, Error, ModelConfig, Preservation, Rng, TrainConfig, Vocab};

#[derive(Parser)]
#[command(
    name = "princ",
    about = "Prototype-based class-incremental intent detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic intent dataset plus its seen/novel manifest.
    GenData(GenDataArgs),
    /// Train phase 1 (seen intents) or phase 2 (joint few-shot).
    Train(TrainArgs),
    /// Evaluate a phase-2 checkpoint, non-episodically or episodically.
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of data-rich intents.
    #[arg(long)]
    seen: usize,
    /// Number of few-shot intents.
    #[arg(long)]
    novel: usize,
    /// Utterances per intent.
    #[arg(long, default_value_t = 50)]
    per_intent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for data.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset file (one JSON record per line).
    #[arg(long)]
    data: PathBuf,
    /// Manifest naming the seen and novel intents.
    #[arg(long)]
    manifest: PathBuf,
    /// Seed of the train/test split and support pre-selection.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Supports per intent in phase 2 (novel supports are held out of the
    /// test pools).
    #[arg(long, default_value_t = 5)]
    k_shot: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// 1 trains on seen intents from scratch; 2 fine-tunes a phase-1
    /// checkpoint on the joint few-shot supports.
    #[arg(long)]
    phase: u8,
    #[command(flatten)]
    split: SplitArgs,
    /// Phase-1 checkpoint to continue from (phase 2 only).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Knowledge preservation mode for phase 2: none, dakp or ddkp.
    #[arg(long)]
    preserve: Option<String>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss records (line-delimited JSON). Defaults to the
    /// checkpoint path with extension `report.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// TOML file with training hyperparameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning-rate preset: desk (default) or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    phase1_lr: Option<f64>,
    #[arg(long)]
    phase2_lr: Option<f64>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the parameter-anchor penalty under dakp.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fraction of the seen training pool kept in replay memory under ddkp.
    #[arg(long)]
    memory_ratio: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tau_kd: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    proto_dim: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Phase-2 checkpoint to evaluate.
    #[arg(long)]
    from: PathBuf,
    /// noneps (single pass over the joint test set) or eps (sampled
    /// few-shot episodes).
    #[arg(long)]
    mode: String,
    #[command(flatten)]
    split: SplitArgs,
    /// Classes per episode (eps).
    #[arg(long)]
    ways: Option<usize>,
    /// Supports per class per episode (eps).
    #[arg(long)]
    shots: Option<usize>,
    /// Number of episodes (eps).
    #[arg(long)]
    episodes: Option<usize>,
    /// Sample episode classes from novel intents only.
    #[arg(long, default_value_t = false)]
    novel_only: bool,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    /// Record file (line-delimited JSON). Defaults next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Upper bound on fixture vector dimensions.
    #[arg(long, default_value_t = 6)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    fixtures: usize,
}

enum AppError {
    Usage(String),
    Domain(Error),
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Domain(e)
    }
}

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    if args.seen < 2 {
        return Err(usage("--seen must be at least 2"));
    }
    if args.novel < 1 {
        return Err(usage("--novel must be at least 1"));
    }
    if args.per_intent < 10 {
        return Err(usage("--per-intent must be at least 10"));
    }
    let mut rng = Rng::new(args.seed);
    let (utterances, seen, novel) =
        generate_synthetic(args.seen, args.novel, args.per_intent, &mut rng)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let data_path = args.out.join("data.jsonl");
    let manifest_path = args.out.join("manifest.json");
    save_dataset(&utterances, &data_path)?;
    save_manifest(
        &DatasetManifest {
            seen,
            novel,
            per_intent: args.per_intent,
            seed: args.seed,
        },
        &manifest_path,
    )?;
    println!(
        "wrote {} records to {} (manifest: {})",
        utterances.len(),
        data_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn load_split(args: &SplitArgs) -> Result<(Vec<Utterance>, DatasetManifest, JointSplit), AppError> {
    let data = load_dataset(&args.data)?;
    let manifest = load_manifest(&args.manifest)?;
    let mut rng = Rng::new(args.split_seed);
    let split = make_split(&data, &manifest.seen, &manifest.novel, args.k_shot, &mut rng)?;
    Ok((data, manifest, split))
}

/// Optional hyperparameter overrides loaded from a TOML config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    phase1_lr: Option<f64>,
    phase2_lr: Option<f64>,
    phase1_epochs: Option<usize>,
    phase2_epochs: Option<usize>,
    batch_size: Option<usize>,
    lambda: Option<f64>,
    preservation: Option<String>,
    memory_ratio: Option<f64>,
    tau: Option<f64>,
    tau_kd: Option<f64>,
    seed: Option<u64>,
}

/// Precedence: flags over config file over preset over `base`.
fn resolve_train_config(args: &TrainArgs, base: TrainConfig) -> Result<TrainConfig, AppError> {
    let mut cfg = match args.preset.as_deref() {
        None => base,
        Some("desk") => TrainConfig::desk(),
        Some("paper") => TrainConfig::paper(),
        Some(other) => return Err(usage(format!("unknown preset {other:?}"))),
    };

    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(Error::from)?;
        let file: FileConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let Some(v) = file.phase1_lr {
            cfg.phase1_lr = v;
        }
        if let Some(v) = file.phase2_lr {
            cfg.phase2_lr = v;
        }
        if let Some(v) = file.phase1_epochs {
            cfg.phase1_epochs = v;
        }
        if let Some(v) = file.phase2_epochs {
            cfg.phase2_epochs = v;
        }
        if let Some(v) = file.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = file.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = &file.preservation {
            cfg.preservation = v.parse()?;
        }
        if let Some(v) = file.memory_ratio {
            cfg.memory_ratio = v;
        }
        if let Some(v) = file.tau {
            cfg.tau = v;
        }
        if let Some(v) = file.tau_kd {
            cfg.tau_kd = v;
        }
        if let Some(v) = file.seed {
            cfg.seed = v;
        }
    }

    if let Some(v) = args.phase1_lr {
        cfg.phase1_lr = v;
    }
    if let Some(v) = args.phase2_lr {
        cfg.phase2_lr = v;
    }
    if let Some(v) = args.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = args.phase2_epochs {
        cfg.phase2_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.memory_ratio {
        cfg.memory_ratio = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.tau_kd {
        cfg.tau_kd = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn report_path(args_report: &Option<PathBuf>, out: &Path) -> PathBuf {
    args_report
        .clone()
        .unwrap_or_else(|| out.with_extension("report.jsonl"))
}

fn write_train_report(report: &TrainReport, path: &Path) -> Result<(), AppError> {
    let mut file = fs::File::create(path).map_err(Error::from)?;
    for record in &report.epochs {
        let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(file, "{line}").map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    match args.phase {
        1 => cmd_train_phase1(args),
        2 => cmd_train_phase2(args),
        other => Err(usage(format!("--phase must be 1 or 2, got {other}"))),
    }
}

fn cmd_train_phase1(args: TrainArgs) -> Result<(), AppError> {
    let cfg = resolve_train_config(&args, TrainConfig::desk())?;
    let (data, _, split) = load_split(&args.split)?;

    // the tokenizer is fixed on everything available before phase 2 starts
    let vocab = Vocab::build(data.iter().map(|u| u.text.as_str()))?;
    let seen_train = split.seen_train_data(&data);

    let mut model_cfg = ModelConfig::default();
    if let Some(v) = args.embedding_dim {
        model_cfg.encoder = EncoderConfig {
            embedding_dim: v,
            ..model_cfg.encoder
        };
    }
    if let Some(v) = args.hidden_dim {
        model_cfg.encoder = EncoderConfig {
            hidden_dim: v,
            ..model_cfg.encoder
        };
    }
    if let Some(v) = args.proto_dim {
        model_cfg.prototype_dim = v;
    }

    let mut rng = Rng::new(cfg.seed);
    let (model, report) = run_phase1(&seen_train, vocab, model_cfg, &cfg, &mut rng)?;

    let ckpt = Checkpoint {
        model,
        snapshot: None,
        memory: None,
        config: cfg,
    };
    save_checkpoint(&ckpt, &args.out)?;
    let report_file = report_path(&args.report, &args.out);
    write_train_report(&report, &report_file)?;

    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "phase 1 done: {} epochs, final loss {:.6} (cls {:.6} ii {:.6} is {:.6})",
        report.epochs.len(),
        last.total,
        last.loss_cls,
        last.loss_ii,
        last.loss_is
    );
    println!("checkpoint: {}", args.out.display());
    println!("report: {}", report_file.display());
    Ok(())
}

fn cmd_train_phase2(args: TrainArgs) -> Result<(), AppError> {
    let from = args
        .from
        .as_ref()
        .ok_or_else(|| usage("--phase 2 needs --from <phase-1 checkpoint>"))?;
    let preserve: Preservation = args
        .preserve
        .as_deref()
        .ok_or_else(|| usage("--phase 2 needs --preserve none|dakp|ddkp"))?
        .parse()?;

    let ckpt = load_checkpoint(from)?;
    // continuity: start from the checkpointed hyperparameters, then apply
    // config file and flags
    let mut cfg = resolve_train_config(&args, ckpt.config)?;
    cfg.preservation = preserve;

    let (data, _, split) = load_split(&args.split)?;
    let seen_train = split.seen_train_data(&data);

    let mut rng = Rng::new(cfg.seed);
    let joint = split.sample_joint_support(&data, &mut rng)?;
    let (snapshot, memory) = prepare_phase2(&ckpt.model, &seen_train, &cfg, &mut rng)?;
    let (model, report) = run_phase2(
        &joint,
        ckpt.model,
        &cfg,
        snapshot.as_ref(),
        memory.as_ref(),
        &mut rng,
    )?;

    let out_ckpt = Checkpoint {
        model,
        snapshot: match cfg.preservation {
            Preservation::Dakp => snapshot,
            _ => None,
        },
        memory: match cfg.preservation {
            Preservation::Ddkp => memory,
            _ => None,
        },
        config: cfg,
    };
    save_checkpoint(&out_ckpt, &args.out)?;
    let report_file = report_path(&args.report, &args.out);
    write_train_report(&report, &report_file)?;

    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "phase 2 ({}) done: {} epochs, final loss {:.6} (kd {:.6} l2 {:.6})",
        cfg.preservation,
        report.epochs.len(),
        last.total,
        last.loss_kd,
        last.loss_l2
    );
    println!("checkpoint: {}", args.out.display());
    println!("report: {}", report_file.display());
    Ok(())
}

fn write_eval_report(report: &EvalReport, path: &Path) -> Result<(), AppError> {
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        record: &'static str,
        mode: &'a str,
        split_fingerprint: u64,
        total_queries: usize,
        overall_accuracy: f64,
        seen_accuracy: Option<f64>,
        novel_accuracy: Option<f64>,
        episodes: Option<usize>,
        episode_accuracy_mean: Option<f64>,
        episode_accuracy_std: Option<f64>,
    }
    #[derive(serde::Serialize)]
    struct Row<'a, T: serde::Serialize> {
        record: &'static str,
        #[serde(flatten)]
        payload: &'a T,
    }

    fn line<T: serde::Serialize>(value: &T) -> Result<String, AppError> {
        serde_json::to_string(value).map_err(|e| AppError::Domain(Error::Format(e.to_string())))
    }

    let mut file = fs::File::create(path).map_err(Error::from)?;
    let summary = Summary {
        record: "summary",
        mode: &report.mode,
        split_fingerprint: report.split_fingerprint,
        total_queries: report.total_queries,
        overall_accuracy: report.overall_accuracy,
        seen_accuracy: report.seen_accuracy,
        novel_accuracy: report.novel_accuracy,
        episodes: report.episodes,
        episode_accuracy_mean: report.episode_accuracy_mean,
        episode_accuracy_std: report.episode_accuracy_std,
    };
    writeln!(file, "{}", line(&summary)?).map_err(Error::from)?;
    for row in &report.per_intent {
        let tagged = Row {
            record: "intent",
            payload: row,
        };
        writeln!(file, "{}", line(&tagged)?).map_err(Error::from)?;
    }
    for cell in &report.confusion {
        let tagged = Row {
            record: "confusion",
            payload: cell,
        };
        writeln!(file, "{}", line(&tagged)?).map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    // flag validation comes before any file access so bad invocations are
    // always usage errors
    enum Plan {
        NonEpisodic,
        Episodic(EpisodeSpec),
    }
    let plan = match args.mode.as_str() {
        "noneps" => Plan::NonEpisodic,
        "eps" => {
            let ways = args.ways.ok_or_else(|| usage("--mode eps needs --ways"))?;
            let shots = args.shots.ok_or_else(|| usage("--mode eps needs --shots"))?;
            let episodes = args
                .episodes
                .ok_or_else(|| usage("--mode eps needs --episodes"))?;
            Plan::Episodic(EpisodeSpec {
                episodes,
                novel_only: args.novel_only,
                ..EpisodeSpec::new(ways, shots)
            })
        }
        other => return Err(usage(format!("--mode must be noneps or eps, got {other:?}"))),
    };

    let ckpt = load_checkpoint(&args.from)?;
    if ckpt.model.store.novel_count() == 0 {
        return Err(AppError::Domain(Error::InvalidConfig(format!(
            "{} holds no novel prototypes; evaluation expects a phase-2 checkpoint",
            args.from.display()
        ))));
    }
    let (data, _, split) = load_split(&args.split)?;
    let view = ckpt.model.frozen_view()?;

    let report = match plan {
        Plan::NonEpisodic => eval_nonepisodic(&view, &data, &split)?,
        Plan::Episodic(spec) => {
            let rng = Rng::new(args.eval_seed);
            eval_episodic(&view, &data, &split, &spec, &rng)?
        }
    };

    print!("{}", report.table());
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.from.with_extension(format!("{}.jsonl", args.mode)));
    write_eval_report(&report, &out)?;
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), AppError> {
    if args.fixtures == 0 {
        return Err(usage("--fixtures must be at least 1"));
    }
    let cfg = GradcheckConfig {
        step: args.step,
        dim: args.dims,
        seed: args.seed,
        fixtures: args.fixtures,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    print!("{report}");
    if report.all_pass() {
        Ok(())
    } else {
        Err(AppError::Domain(Error::InvalidConfig(
            "gradient check failed; see the report above".into(),
        )))
    }
}
