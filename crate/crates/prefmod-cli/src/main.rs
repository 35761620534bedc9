//! Command-line front end: dataset generation, the training stages,
//! sampling, evaluation, ablations, and the history-length sweep.
//!
//! Every run writes into a run directory (given with --run-dir, or derived
//! from a timestamp and the config fingerprint) containing a manifest that
//! makes `report` able to recompute every number byte-identically.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefmod::config::{ExperimentConfig, FitMode, Variant};
use prefmod::eval::{
    bank_eval_users, evaluate, history_sweep, report_csv, run_ablations, sweep_csv, EvalError,
};
use prefmod::sampling::{sample_grid, write_grid_ppm, SampleSource};
use prefmod::synth::{make_dataset, Dataset, Prompt, EVAL_PROMPTS};
use prefmod::training::{
    export_user_embedding, pretrain_backbone, train_new_user, train_stage1, Checkpoint,
    TrainError,
};

/// Exit codes: 2 config error, 3 data/input error, 4 numerical failure.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "prefmod", version, about = "Preference-modulation lab")]
struct Cli {
    /// Experiment config file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for this run; derived from time + fingerprint when
    /// omitted.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Master seed override: rewrites the dataset and stage seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted-key config overrides, e.g. --set stage1.steps=500
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic preference dataset.
    GenData(GenDataArgs),
    /// Stage 0: train the backbone on the flow objective.
    Pretrain(PretrainArgs),
    /// Stage 1: train adapters and user embeddings on a frozen backbone.
    TrainStage1(Stage1Args),
    /// Stage 2: fit one user's embedding from a short history.
    TrainNewUser(NewUserArgs),
    /// Sample one image from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint against the oracle metrics.
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants under matched seeds.
    Ablate(AblateArgs),
    /// History-length sweep over the held-out users.
    HistorySweep(SweepArgs),
    /// Recompute a run's report from its stored artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Where to write the dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Stage1Args {
    #[arg(long)]
    data: PathBuf,
    /// Stage-0 checkpoint to freeze.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct NewUserArgs {
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint with adapters and bank.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out user id to fit.
    #[arg(long)]
    user: u32,
    /// How many history samples to use (default: all available).
    #[arg(long)]
    history_len: Option<usize>,
    /// linear_combination | direct (default from config).
    #[arg(long)]
    mode: Option<String>,
    /// Directory for the embedding export.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt text, e.g. "two circle left" or "<empty>".
    #[arg(long)]
    prompt: String,
    /// Bank user id to condition on.
    #[arg(long)]
    user: Option<u32>,
    /// Directory with an exported embedding (with --user picking the id).
    #[arg(long)]
    embedding_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Stage-0 checkpoint all variants start from.
    #[arg(long)]
    base: PathBuf,
    /// Comma-separated variant names (default: all five).
    #[arg(long)]
    variants: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated history lengths.
    #[arg(long, default_value = "2,4,8,16,32")]
    lengths: String,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(Args)]
struct ReportArgs {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Map error chains onto the documented exit codes.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(train) = cause.downcast_ref::<TrainError>() {
            return match train {
                TrainError::Config(_) => EXIT_CONFIG,
                TrainError::Divergence { .. } | TrainError::Tensor(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if let Some(eval) = cause.downcast_ref::<EvalError>() {
            return match eval {
                EvalError::Config(_) => EXIT_CONFIG,
                EvalError::Tensor(_) => EXIT_NUMERIC,
                EvalError::Train(TrainError::Divergence { .. })
                | EvalError::Train(TrainError::Tensor(_)) => EXIT_NUMERIC,
                EvalError::Train(TrainError::Config(_)) => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<prefmod::config::ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<prefmod::tensor::TensorError>().is_some() {
            return EXIT_NUMERIC;
        }
        if cause.downcast_ref::<prefmod::synth::DataError>().is_some() {
            return EXIT_DATA;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::GenData(args) => gen_data(&config, args),
        Command::Pretrain(args) => pretrain(&config, args),
        Command::TrainStage1(args) => stage1(&config, args),
        Command::TrainNewUser(args) => new_user(&config, args),
        Command::Sample(args) => sample(&config, args),
        Command::Eval(args) => eval_cmd(&config, &cli, args),
        Command::Ablate(args) => ablate(&config, &cli, args),
        Command::HistorySweep(args) => sweep(&config, &cli, args),
        Command::Report(_) => report_cmd(&cli),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                anyhow::anyhow!(prefmod::config::ConfigError::Parse(format!(
                    "cannot read {}: {e}",
                    path.display()
                )))
            })?;
            ExperimentConfig::from_json(&text)?
        }
    };
    if let Some(seed) = cli.seed {
        config.data.master_seed = seed;
        config.stage0.seed = seed.wrapping_add(10);
        config.stage1.seed = seed.wrapping_add(11);
        config.stage2.seed = seed.wrapping_add(12);
        config.eval.master_seed = seed.wrapping_add(13);
    }
    if !cli.sets.is_empty() {
        let overrides: Vec<(String, String)> = cli
            .sets
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| {
                        prefmod::config::ConfigError::Parse(format!(
                            "override '{s}' is not KEY=VALUE"
                        ))
                    })
            })
            .collect::<Result<_, _>>()?;
        config = config.with_overrides(&overrides)?;
    }
    config.validate()?;
    Ok(config)
}

/// Check inputs up front and list every missing path in one message.
fn require_paths(paths: &[(&str, &Path)]) -> anyhow::Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|(_, p)| !p.exists())
        .map(|(what, p)| format!("{what}: {}", p.display()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(anyhow::anyhow!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing inputs -- {}", missing.join("; ")),
        )))
    }
}

fn run_dir_for(cli: &Cli, config: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_secs();
            PathBuf::from(format!("runs/{stamp}-{}", config.fingerprint()))
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    require_paths(&[("dataset manifest", &path.join("manifest.json"))])?;
    Ok(Dataset::load(path)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ── Subcommands ──────────────────────────────────────────────────────

fn gen_data(config: &ExperimentConfig, args: &GenDataArgs) -> anyhow::Result<()> {
    let dataset = make_dataset(&config.data)?;
    dataset.save(&args.out)?;
    println!(
        "dataset: {} train + {} held-out users, {} samples each -> {}",
        config.data.n_train_users,
        config.data.n_heldout_users,
        config.data.per_user,
        args.out.display()
    );
    Ok(())
}

fn pretrain(config: &ExperimentConfig, args: &PretrainArgs) -> anyhow::Result<()> {
    require_paths(&[("dataset", &args.data)])?;
    let dataset = load_dataset(&args.data)?;
    let resume = match &args.resume {
        Some(p) => {
            require_paths(&[("resume checkpoint", p)])?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let checkpoint = pretrain_backbone(&dataset, config, resume.as_ref())?;
    checkpoint.save(&args.out)?;
    let last = checkpoint
        .metrics
        .iter()
        .rev()
        .find(|m| m.name == "flow_loss")
        .map(|m| m.value)
        .unwrap_or(f64::NAN);
    println!(
        "stage 0 done: {} steps, final flow loss {last:.5} -> {}",
        checkpoint.step,
        args.out.display()
    );
    Ok(())
}

fn stage1(config: &ExperimentConfig, args: &Stage1Args) -> anyhow::Result<()> {
    require_paths(&[("dataset", &args.data), ("base checkpoint", &args.base)])?;
    let dataset = load_dataset(&args.data)?;
    let base = Checkpoint::load(&args.base)?;
    let resume = match &args.resume {
        Some(p) => {
            require_paths(&[("resume checkpoint", p)])?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let checkpoint = train_stage1(&dataset, &base, config, resume.as_ref())?;
    checkpoint.save(&args.out)?;
    println!(
        "stage 1 done: {} steps, variant {} -> {}",
        checkpoint.step,
        config.variant.name(),
        args.out.display()
    );
    Ok(())
}

fn new_user(config: &ExperimentConfig, args: &NewUserArgs) -> anyhow::Result<()> {
    require_paths(&[("dataset", &args.data), ("checkpoint", &args.checkpoint)])?;
    let dataset = load_dataset(&args.data)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let bank = checkpoint
        .bank
        .as_ref()
        .ok_or_else(|| TrainError::Config("checkpoint has no embedding bank".into()))?;
    let adapters = checkpoint
        .adapters
        .as_ref()
        .ok_or_else(|| TrainError::Config("checkpoint has no adapters".into()))?;
    let user = dataset
        .user(args.user)
        .copied()
        .ok_or_else(|| TrainError::Config(format!("user {} not in dataset", args.user)))?;
    let all = dataset.samples_of(user.user_id);
    let len = args.history_len.unwrap_or(all.len()).min(all.len());
    if len == 0 {
        return Err(TrainError::Config("history length must be positive".into()).into());
    }
    let mut fit_config = config.clone();
    if let Some(mode) = &args.mode {
        fit_config.stage2.mode = Some(match mode.as_str() {
            "linear_combination" => FitMode::LinearCombination,
            "direct" => FitMode::Direct,
            other => {
                return Err(prefmod::config::ConfigError::Invalid(format!(
                    "unknown fit mode '{other}'"
                ))
                .into())
            }
        });
    }
    let fit = train_new_user(
        &all[..len],
        bank,
        adapters,
        &checkpoint.backbone,
        &fit_config,
        user.user_id,
    )?;
    export_user_embedding(
        &args.out,
        &fit.embedding,
        fit.alpha.as_ref(),
        &fit_config.fingerprint(),
    )?;
    println!(
        "fitted user {} from {} samples ({}) -> {}",
        user.user_id,
        len,
        prefmod::eval::mode_name(fit_config.stage2.mode.unwrap()),
        args.out.display()
    );
    Ok(())
}

fn sample(config: &ExperimentConfig, args: &SampleArgs) -> anyhow::Result<()> {
    require_paths(&[("checkpoint", &args.checkpoint)])?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let prompt = Prompt::parse(&args.prompt)?;
    let embedding = match (&args.user, &args.embedding_dir) {
        (Some(uid), Some(dir)) => {
            require_paths(&[("embedding dir", dir)])?;
            Some(prefmod::training::import_user_embedding(dir, *uid)?.0.matrix)
        }
        (Some(uid), None) => {
            let bank = checkpoint
                .bank
                .as_ref()
                .ok_or_else(|| TrainError::Config("checkpoint has no embedding bank".into()))?;
            Some(
                bank.get(*uid)
                    .ok_or_else(|| TrainError::Config(format!("user {uid} not in the bank")))?
                    .matrix
                    .clone(),
            )
        }
        (None, _) => None,
    };
    let source = SampleSource::from_checkpoint(&checkpoint);
    let image = source.sample(&prompt, embedding.as_ref(), &config.sampler, args.sample_seed)?;
    std::fs::create_dir_all(&args.out)?;
    prefmod::fileio::write_tensor(&args.out.join("sample.ten"), &image)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::write(
        args.out.join("sample.ppm"),
        prefmod::sampling::image_to_ppm_bytes(&image),
    )?;
    println!("sampled '{}' -> {}", prompt.text(), args.out.display());
    Ok(())
}

/// What `report` needs to recompute a run's outputs.
#[derive(serde::Serialize, serde::Deserialize)]
struct RunManifest {
    command: String,
    config: ExperimentConfig,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    lengths: Option<Vec<usize>>,
    sweep_seeds: Option<usize>,
    variants: Option<Vec<String>>,
}

fn eval_body(
    config: &ExperimentConfig,
    dataset: &Dataset,
    checkpoint: &Checkpoint,
    run_dir: &Path,
) -> anyhow::Result<()> {
    let users = bank_eval_users(checkpoint, dataset)?;
    let report = evaluate(
        checkpoint,
        &users,
        dataset,
        &EVAL_PROMPTS,
        &config.sampler,
        config.eval.n_seeds,
        config.eval.master_seed,
    )?;
    write_json(&run_dir.join("report.json"), &report)?;
    std::fs::write(run_dir.join("metrics.csv"), report_csv(&report))?;

    let grid_users: Vec<(u32, prefmod::tensor::Tensor)> = users
        .iter()
        .map(|(profile, emb)| (profile.user_id, emb.clone()))
        .collect();
    let (images, grid_manifest) = sample_grid(
        &SampleSource::from_checkpoint(checkpoint),
        &grid_users,
        &EVAL_PROMPTS,
        &config.sampler,
        config.eval.master_seed,
    )?;
    write_grid_ppm(
        &run_dir.join("grid.ppm"),
        &images,
        grid_users.len(),
        EVAL_PROMPTS.len(),
    )?;
    write_json(&run_dir.join("grid.json"), &grid_manifest)?;
    println!(
        "eval: style error {:.4} (unconditional {:.4}), win rate {:.3}, content {:.3} -> {}",
        report.mean_style_error,
        report.mean_unconditional_style_error,
        report.win_rate,
        report.mean_content_conditioned,
        run_dir.display()
    );
    Ok(())
}

fn eval_cmd(config: &ExperimentConfig, cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    require_paths(&[("dataset", &args.data), ("checkpoint", &args.checkpoint)])?;
    let dataset = load_dataset(&args.data)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let run_dir = run_dir_for(cli, config)?;
    write_json(
        &run_dir.join("manifest.json"),
        &RunManifest {
            command: "eval".into(),
            config: config.clone(),
            data_dir: args.data.clone(),
            checkpoint: args.checkpoint.clone(),
            lengths: None,
            sweep_seeds: None,
            variants: None,
        },
    )?;
    eval_body(config, &dataset, &checkpoint, &run_dir)
}

fn ablate(config: &ExperimentConfig, cli: &Cli, args: &AblateArgs) -> anyhow::Result<()> {
    require_paths(&[("dataset", &args.data), ("base checkpoint", &args.base)])?;
    let dataset = load_dataset(&args.data)?;
    let base = Checkpoint::load(&args.base)?;
    let run_dir = run_dir_for(cli, config)?;

    let variants: Vec<Variant> = match &args.variants {
        None => Variant::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|name| {
                Variant::parse(name.trim()).ok_or_else(|| {
                    prefmod::config::ConfigError::Invalid(format!("unknown variant '{name}'"))
                })
            })
            .collect::<Result<_, _>>()?,
    };
    write_json(
        &run_dir.join("manifest.json"),
        &RunManifest {
            command: "ablate".into(),
            config: config.clone(),
            data_dir: args.data.clone(),
            checkpoint: args.base.clone(),
            lengths: None,
            sweep_seeds: None,
            variants: Some(variants.iter().map(|v| v.name().to_string()).collect()),
        },
    )?;

    let outcomes = run_ablations(&dataset, &base, config, &variants)?;
    let mut csv = String::from("variant,metric,value\n");
    for outcome in &outcomes {
        let name = outcome.variant.name();
        outcome
            .checkpoint
            .save(&run_dir.join(format!("stage1-{name}.ckpt")))?;
        write_json(&run_dir.join(format!("report-{name}.json")), &outcome.report)?;
        for (metric, value) in [
            ("style_error", outcome.report.mean_style_error),
            ("win_rate", outcome.report.win_rate),
            ("content", outcome.report.mean_content_conditioned),
            ("perceptual", outcome.report.mean_perceptual),
            ("separation", outcome.report.separation.unwrap_or(0.0)),
            ("assignment_accuracy", outcome.report.assignment_accuracy),
        ] {
            csv.push_str(&format!("{name},{metric},{value}\n"));
        }
        println!(
            "ablate {name}: style error {:.4}, separation {:.4}",
            outcome.report.mean_style_error,
            outcome.report.separation.unwrap_or(0.0)
        );
    }
    std::fs::write(run_dir.join("metrics.csv"), csv)?;
    Ok(())
}

fn sweep(config: &ExperimentConfig, cli: &Cli, args: &SweepArgs) -> anyhow::Result<()> {
    require_paths(&[("dataset", &args.data), ("checkpoint", &args.checkpoint)])?;
    let dataset = load_dataset(&args.data)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let run_dir = run_dir_for(cli, config)?;
    let lengths: Vec<usize> = args
        .lengths
        .split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| {
                prefmod::config::ConfigError::Invalid(format!("bad history length '{s}'"))
            })
        })
        .collect::<Result<_, _>>()?;
    write_json(
        &run_dir.join("manifest.json"),
        &RunManifest {
            command: "history-sweep".into(),
            config: config.clone(),
            data_dir: args.data.clone(),
            checkpoint: args.checkpoint.clone(),
            lengths: Some(lengths.clone()),
            sweep_seeds: Some(args.seeds),
            variants: None,
        },
    )?;

    let rows = history_sweep(
        &dataset,
        &checkpoint,
        config,
        &lengths,
        &[FitMode::LinearCombination, FitMode::Direct],
        args.seeds,
    )?;
    std::fs::write(run_dir.join("metrics.csv"), sweep_csv(&rows))?;
    write_json(&run_dir.join("report.json"), &rows)?;
    println!("history sweep: {} rows -> {}", rows.len(), run_dir.display());
    Ok(())
}

fn report_cmd(cli: &Cli) -> anyhow::Result<()> {
    let run_dir = cli
        .run_dir
        .clone()
        .ok_or_else(|| prefmod::config::ConfigError::Invalid("report needs --run-dir".into()))?;
    require_paths(&[("run manifest", &run_dir.join("manifest.json"))])?;
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json"))?)?;
    let dataset = load_dataset(&manifest.data_dir)?;
    match manifest.command.as_str() {
        "eval" => {
            let checkpoint = Checkpoint::load(&manifest.checkpoint)?;
            eval_body(&manifest.config, &dataset, &checkpoint, &run_dir)
        }
        "history-sweep" => {
            let checkpoint = Checkpoint::load(&manifest.checkpoint)?;
            let rows = history_sweep(
                &dataset,
                &checkpoint,
                &manifest.config,
                manifest.lengths.as_deref().unwrap_or(&[2, 4, 8, 16, 32]),
                &[FitMode::LinearCombination, FitMode::Direct],
                manifest.sweep_seeds.unwrap_or(3),
            )?;
            std::fs::write(run_dir.join("metrics.csv"), sweep_csv(&rows))?;
            write_json(&run_dir.join("report.json"), &rows)?;
            println!("report: recomputed {} sweep rows", rows.len());
            Ok(())
        }
        other => Err(prefmod::config::ConfigError::Invalid(format!(
            "run manifest command '{other}' has no report recomputation"
        ))
        .into()),
    }
}
