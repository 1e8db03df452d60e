//! `arec`: prepare datasets, train, evaluate and sweep the embedding dimension.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use arec_core::data::{self, DatasetCache, SplitRatios};
use arec_core::losses::ModalityFeatureSet;
use arec_core::metrics::evaluate;
use arec_core::persist::Checkpoint;
use arec_core::training::{self, curve_csv, fit, sweep_csv, TrainConfig, TrainState};
use arec_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "arec",
    version,
    about = "Attention-based feature interaction CTR models"
)]
struct Cli {
    /// Single-threaded execution for bit-exact runs.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw ratings, split them and write an encoded cache.
    Prepare(PrepareArgs),
    /// Train a model on a cache and write a checkpoint plus its training curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print a JSON report.
    Eval(EvalArgs),
    /// Train one model per embedding dimension and write an aggregate CSV.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Movielens,
    Amazon,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    dataset: Dataset,
    /// Directory holding ratings.dat, users.dat and movies.dat, or an Amazon JSON-lines file (or a directory containing one).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct TrainingFlags {
    /// key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Extra overrides, `key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Per-item modality features (`item tag v1,v2,...`, tags sa/sv/pa/pv).
    #[arg(long)]
    modality_features: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, value_parser = ["ours", "fm", "deepfm"])]
    model: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Curve CSV path; defaults to the checkpoint path with a `.curve.csv` suffix.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainingFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long)]
    modality_features: Option<PathBuf>,
    /// Also append the report as a CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Embedding dimensions; defaults to the config's sweep_dims.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_parser = ["ours", "fm", "deepfm"])]
    model: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainingFlags,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Internal(_) => 1,
        _ => 2,
    }
}

fn configure_threads(deterministic: bool, config_threads: usize) -> Result<()> {
    let env_cap = match std::env::var("AREC_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::Config(format!("AREC_THREADS={v:?} is not a positive integer"))
                })?,
        ),
        Err(_) => None,
    };
    let threads = if deterministic {
        1
    } else {
        match (config_threads, env_cap) {
            (0, None) => return Ok(()),
            (0, Some(cap)) => cap,
            (n, None) => n,
            (n, Some(cap)) => n.min(cap),
        }
    };
    // A pool that was already built (e.g. by an earlier call) is left as is.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn load_config(
    flags: &TrainingFlags,
    model: Option<&str>,
    deterministic: bool,
) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(path) => TrainConfig::parse(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = model {
        cfg.set("model", m)?;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(d) = flags.embed_dim {
        cfg.embed_dim = d;
    }
    for o in &flags.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.deterministic |= deterministic;
    cfg.validate()?;
    configure_threads(cfg.deterministic, cfg.threads)?;
    Ok(cfg)
}

fn load_features(path: Option<&Path>) -> Result<Option<ModalityFeatureSet>> {
    path.map(ModalityFeatureSet::load).transpose()
}

fn find_amazon_file(input: &Path) -> Result<PathBuf> {
    if !input.is_dir() {
        return Ok(input.to_path_buf());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("json" | "jsonl")
            )
        })
        .collect();
    files.sort();
    files
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config(format!("no .json or .jsonl file in {}", input.display())))
}

fn manifest_path(cache: &Path) -> PathBuf {
    let mut s = cache.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let table = match args.dataset {
        Dataset::Movielens => data::parse_movielens(
            &args.input.join("ratings.dat"),
            &args.input.join("users.dat"),
            &args.input.join("movies.dat"),
        )?,
        Dataset::Amazon => data::parse_amazon(&find_amazon_file(&args.input)?)?,
    };
    let interactions = table.len();
    let ratios = SplitRatios {
        train: args.ratios[0],
        validation: args.ratios[1],
        test: args.ratios[2],
    };
    let (schema, split) = data::prepare(table, ratios, args.seed)?;
    let (tr, va, te) = split.sizes();
    let cache = DatasetCache { schema, split };
    data::write_cache(&args.out, &cache)?;

    let positives = |xs: &[data::EncodedExample]| xs.iter().filter(|e| e.label == 1).count();
    let manifest = serde_json::json!({
        "cache": args.out.display().to_string(),
        "interactions": interactions,
        "schema_hash": format!("{:016x}", cache.schema.hash()),
        "seed": args.seed,
        "ratios": [ratios.train, ratios.validation, ratios.test],
        "sizes": { "train": tr, "validation": va, "test": te },
        "positives": {
            "train": positives(&cache.split.train),
            "validation": positives(&cache.split.validation),
            "test": positives(&cache.split.test),
        },
        "fields": cache.schema.fields.iter().map(|f| serde_json::json!({
            "name": f.name,
            "kind": format!("{:?}", f.kind),
            "cardinality": f.cardinality(),
        })).collect::<Vec<_>>(),
    });
    fs::write(
        manifest_path(&args.out),
        serde_json::to_string_pretty(&manifest).expect("manifest is valid JSON") + "\n",
    )?;

    println!("interactions: {interactions}");
    println!("schema {:016x}:", cache.schema.hash());
    print!("{}", cache.schema.summary());
    println!("split sizes: train={tr} validation={va} test={te}");
    Ok(())
}

fn cmd_train(args: TrainArgs, deterministic: bool) -> Result<()> {
    let cfg = load_config(&args.flags, args.model.as_deref(), deterministic)?;
    let cache = data::read_cache(&args.cache, None)?;
    let features = load_features(args.flags.modality_features.as_deref())?;
    let modality_dim = features.as_ref().map(|f| f.dim);

    let state = TrainState::initialize(&cfg, &cache.schema, modality_dim)?;
    log::info!(
        "{} model with {} parameters",
        cfg.model,
        state.model.num_params()
    );
    let fitted = fit(
        state,
        &cache.split.train,
        &cache.split.validation,
        features.as_ref(),
        &cfg,
    )?;

    let ckpt = Checkpoint {
        schema_hash: cache.schema.hash(),
        config: cfg.clone(),
        modality_dim,
        state: fitted.state.clone(),
    };
    ckpt.save(&args.out)?;
    let curve_path = args.curve.unwrap_or_else(|| {
        let mut s = args.out.as_os_str().to_owned();
        s.push(".curve.csv");
        PathBuf::from(s)
    });
    fs::write(&curve_path, curve_csv(&fitted.curve, features.is_some()))?;

    let best = fitted.best();
    let auc = best
        .val_auc
        .map_or("undefined".to_string(), |a| format!("{a:.6}"));
    println!(
        "best epoch {}: val_auc={auc} val_logloss={:.6}",
        best.epoch, best.val_logloss
    );
    println!("checkpoint: {}", args.out.display());
    println!("curve: {}", curve_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, deterministic: bool) -> Result<()> {
    configure_threads(deterministic, 0)?;
    let cache = data::read_cache(&args.cache, None)?;
    let ckpt = Checkpoint::load(&args.ckpt, &cache.schema)?;
    let features = load_features(args.modality_features.as_deref())?;
    let (examples, tag) = match args.split {
        SplitName::Val => (&cache.split.validation, "val"),
        SplitName::Test => (&cache.split.test, "test"),
    };
    let report = evaluate(&ckpt.state.model, examples, features.as_ref(), tag)?;
    println!("{}", report.to_json());
    if let Some(path) = args.csv {
        let mut text = if path.exists() {
            fs::read_to_string(&path)?
        } else {
            format!("{}\n", arec_core::metrics::EvalReport::CSV_HEADER)
        };
        text.push_str(&report.csv_row());
        text.push('\n');
        fs::write(&path, text)?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, deterministic: bool) -> Result<ExitCode> {
    let cfg = load_config(&args.flags, args.model.as_deref(), deterministic)?;
    let dims = args.dims.clone().unwrap_or_else(|| cfg.sweep_dims.clone());
    let cache = data::read_cache(&args.cache, None)?;
    let features = load_features(args.flags.modality_features.as_deref())?;

    let runs = training::sweep(&cfg, &cache.schema, &cache.split, features.as_ref(), &dims)?;
    fs::create_dir_all(&args.out)?;
    let mut worst = 0u8;
    for run in &runs {
        match &run.outcome {
            Ok((fitted, report)) => {
                fs::write(
                    args.out.join(format!("curve_d{}.csv", run.d)),
                    curve_csv(&fitted.curve, features.is_some()),
                )?;
                println!(
                    "d={}: test auc={:.6} logloss={:.6}",
                    run.d, report.auc, report.logloss
                );
            }
            Err(e) => {
                eprintln!("d={}: failed: {e}", run.d);
                worst = worst.max(exit_code(e));
            }
        }
    }
    let path = args.out.join("sweep.csv");
    fs::write(&path, sweep_csv(&runs))?;
    println!("sweep: {}", path.display());
    Ok(ExitCode::from(worst))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(a, cli.deterministic).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(a, cli.deterministic).map(|_| ExitCode::SUCCESS),
        Command::Sweep(a) => cmd_sweep(a, cli.deterministic),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { epoch, batch, loss } = &e {
                eprintln!("diagnostics: epoch={epoch} batch={batch} loss={loss}; try a smaller learning_rate or clip_norm");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
