//! Batch command-line surface. Resolves a run configuration from defaults,
//! an optional key=value config file, and command-line flags (flags win),
//! echoes the resolved config into the output directory, and dispatches
//! into the library. Progress goes to stderr; stdout carries only the
//! deterministic payload of each command.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_sequences, parse_csv, split_by_learner, split_hash, synth_generate, write_csv,
    InteractionRecord, Sequence, SequenceSet, SynthSpec,
};
use crate::embeddings::{embed_exercise, IrtLevel};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{
    evaluate, gradcheck, history_to_csv, load_checkpoint, save_checkpoint, train, Ablation, Model,
    ModelConfig,
};
use crate::numerics::Tape;
use crate::rng::{stream_rng, Stream};
use crate::state_attention::ClusterModel;

const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Everything a run needs: the model configuration plus where the data
/// comes from and how it is split. Serialized as `config.json` into the
/// output directory so the run can be reproduced without the original
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Interaction CSV; a built-in synthetic dataset is used when absent.
    pub data: Option<PathBuf>,
    /// Fraction of learners held out for evaluation.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: None,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Sets one flat config key, parsed from its string form. Shared by the
/// config-file reader and anything else that speaks key=value pairs;
/// unknown keys are rejected rather than ignored.
pub fn set_key(run: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
    }
    match key {
        "embed_dim" => run.model.embed_dim = parse(key, value)?,
        "seq_len" => run.model.seq_len = parse(key, value)?,
        "kernel_size" => run.model.kernel_size = parse(key, value)?,
        "pool_capacity" => run.model.pool_capacity = parse(key, value)?,
        "clusters" => run.model.clusters = parse(key, value)?,
        "lr" => run.model.lr = parse(key, value)?,
        "batch_size" => run.model.batch_size = parse(key, value)?,
        "dropout" => run.model.dropout = parse(key, value)?,
        "epochs" => run.model.epochs = parse(key, value)?,
        "weight_decay" => run.model.weight_decay = parse(key, value)?,
        "seed" => run.model.seed = parse(key, value)?,
        "irt_level" => run.model.irt_level = IrtLevel::parse(value)?,
        "ablation" => run.model.ablation = Ablation::parse(value)?,
        "data" => run.data = Some(PathBuf::from(value)),
        "test_fraction" => run.test_fraction = parse(key, value)?,
        other => return Err(Error::Config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Reads a config file in either format: the key=value flag format, or the
/// JSON echo a previous run wrote. Both go through [`set_key`], so both
/// reject unknown keys.
fn apply_config_file(run: &mut RunConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let Some(map) = value.as_object() else {
            return Err(Error::Config(format!(
                "{}: expected a JSON object of config keys",
                path.display()
            )));
        };
        for (key, val) in map {
            let rendered = match val {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            set_key(run, key, &rendered).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        }
        return Ok(());
    }
    for (index, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                index + 1
            )));
        };
        set_key(run, key.trim(), value.trim()).map_err(|e| match e {
            Error::Config(msg) => {
                Error::Config(format!("{}:{}: {msg}", path.display(), index + 1))
            }
            other => other,
        })?;
    }
    Ok(())
}

/// Per-key overrides shared by every subcommand. Flag names are exactly the
/// config-file keys, so `--epochs=5` and a file line `epochs = 5` are
/// interchangeable, with the flag winning when both are present.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// Key=value config file applied before any flags.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long = "embed_dim", value_name = "INT")]
    pub embed_dim: Option<usize>,
    #[arg(long = "seq_len", value_name = "INT")]
    pub seq_len: Option<usize>,
    #[arg(long = "kernel_size", value_name = "INT")]
    pub kernel_size: Option<usize>,
    #[arg(long = "pool_capacity", value_name = "INT")]
    pub pool_capacity: Option<usize>,
    #[arg(long, value_name = "INT")]
    pub clusters: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    pub lr: Option<f64>,
    #[arg(long = "batch_size", value_name = "INT")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    pub dropout: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub epochs: Option<usize>,
    #[arg(long = "weight_decay", value_name = "FLOAT")]
    pub weight_decay: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// One of NI, 1PL, 2PL, 3PL.
    #[arg(long = "irt_level", value_name = "LEVEL")]
    pub irt_level: Option<String>,
    /// One of full, RLS, RLE, RKS.
    #[arg(long, value_name = "VARIANT")]
    pub ablation: Option<String>,
    /// Interaction CSV to train or evaluate on.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    #[arg(long = "test_fraction", value_name = "FLOAT")]
    pub test_fraction: Option<f64>,
}

fn apply_overrides(run: &mut RunConfig, o: &ConfigOverrides) -> Result<()> {
    if let Some(v) = o.embed_dim {
        run.model.embed_dim = v;
    }
    if let Some(v) = o.seq_len {
        run.model.seq_len = v;
    }
    if let Some(v) = o.kernel_size {
        run.model.kernel_size = v;
    }
    if let Some(v) = o.pool_capacity {
        run.model.pool_capacity = v;
    }
    if let Some(v) = o.clusters {
        run.model.clusters = v;
    }
    if let Some(v) = o.lr {
        run.model.lr = v;
    }
    if let Some(v) = o.batch_size {
        run.model.batch_size = v;
    }
    if let Some(v) = o.dropout {
        run.model.dropout = v;
    }
    if let Some(v) = o.epochs {
        run.model.epochs = v;
    }
    if let Some(v) = o.weight_decay {
        run.model.weight_decay = v;
    }
    if let Some(v) = o.seed {
        run.model.seed = v;
    }
    if let Some(v) = &o.irt_level {
        run.model.irt_level = IrtLevel::parse(v)?;
    }
    if let Some(v) = &o.ablation {
        run.model.ablation = Ablation::parse(v)?;
    }
    if let Some(v) = &o.data {
        run.data = Some(v.clone());
    }
    if let Some(v) = o.test_fraction {
        run.test_fraction = v;
    }
    Ok(())
}

/// Layers the config file and then the flags over `base` and validates the
/// result. `base` is the defaults for fresh runs and the stored checkpoint
/// config for commands that resume one.
pub fn resolve_config_from(base: RunConfig, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut run = base;
    if let Some(path) = &overrides.config {
        apply_config_file(&mut run, path)?;
    }
    apply_overrides(&mut run, overrides)?;
    run.validate()?;
    Ok(run)
}

fn write_run_config(out: &Path, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(run)? + "\n";
    fs::write(out.join("config.json"), json)?;
    Ok(())
}

fn load_records(run: &RunConfig) -> Result<Vec<InteractionRecord>> {
    match &run.data {
        Some(path) => parse_csv(path),
        None => {
            let spec = SynthSpec { seed: run.model.seed, ..SynthSpec::default() };
            eprintln!(
                "no --data given; using the built-in synthetic dataset \
                 ({} learners, seed {})",
                spec.n_learners, spec.seed
            );
            synth_generate(&spec)
        }
    }
}

struct PreparedData {
    set: SequenceSet,
    train: Vec<Sequence>,
    test: Vec<Sequence>,
}

fn prepare_data(run: &RunConfig) -> Result<PreparedData> {
    let records = load_records(run)?;
    let set = build_sequences(&records, run.model.seq_len)?;
    let (train, test) =
        split_by_learner(&set.sequences, 1.0 - run.test_fraction, run.model.seed)?;
    Ok(PreparedData { set, train, test })
}

/// Rejects a resolved config whose model keys differ from the checkpoint's.
/// Commands that resume a checkpoint start resolution from the stored
/// config, so a mismatch here can only come from an explicit file entry or
/// flag contradicting the checkpoint.
fn ensure_matches_checkpoint(requested: &ModelConfig, stored: &ModelConfig) -> Result<()> {
    let pairs = [
        ("embed_dim", requested.embed_dim.to_string(), stored.embed_dim.to_string()),
        ("seq_len", requested.seq_len.to_string(), stored.seq_len.to_string()),
        ("kernel_size", requested.kernel_size.to_string(), stored.kernel_size.to_string()),
        (
            "pool_capacity",
            requested.pool_capacity.to_string(),
            stored.pool_capacity.to_string(),
        ),
        ("clusters", requested.clusters.to_string(), stored.clusters.to_string()),
        ("lr", requested.lr.to_string(), stored.lr.to_string()),
        ("batch_size", requested.batch_size.to_string(), stored.batch_size.to_string()),
        ("dropout", requested.dropout.to_string(), stored.dropout.to_string()),
        ("epochs", requested.epochs.to_string(), stored.epochs.to_string()),
        (
            "weight_decay",
            requested.weight_decay.to_string(),
            stored.weight_decay.to_string(),
        ),
        ("seed", requested.seed.to_string(), stored.seed.to_string()),
        ("irt_level", requested.irt_level.name().into(), stored.irt_level.name().into()),
        ("ablation", requested.ablation.name().into(), stored.ablation.name().into()),
    ];
    for (key, req, got) in pairs {
        if req != got {
            return Err(Error::Config(format!(
                "checkpoint was trained with {key} {got} but {key} {req} was requested"
            )));
        }
    }
    Ok(())
}

fn ensure_matching_vocabulary(data: &SequenceSet, loaded: &crate::data::Vocabulary) -> Result<()> {
    if data.vocabulary != *loaded {
        return Err(Error::Config(format!(
            "checkpoint vocabulary ({} exercises, {} concepts) does not match the data \
             ({} exercises, {} concepts)",
            loaded.exercise_ids.len(),
            loaded.concept_ids.len(),
            data.vocabulary.exercise_ids.len(),
            data.vocabulary.concept_ids.len(),
        )));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "lskt",
    version,
    about = "Knowledge tracing with IRT embeddings, causal convolutions, and clustered attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes config.json, checkpoint/, history.csv, and
    /// metrics.json under --out.
    Train(TrainArgs),
    /// Recompute held-out metrics for a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Train every requested variant and feature level on one shared split.
    Ablate(AblateArgs),
    /// Generate a synthetic interaction CSV plus its spec.json sidecar.
    Synth(SynthArgs),
    /// Compare analytic gradients against finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Export exercise features and per-timestep states from a checkpoint.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Optional directory for metrics.json and the resolved config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Comma-separated subset of full,RLS,RLE,RKS (default: all).
    #[arg(long, value_name = "LIST")]
    pub variants: Option<String>,
    /// Comma-separated subset of NI,1PL,2PL,3PL (default: all).
    #[arg(long = "irt_levels", value_name = "LIST")]
    pub irt_levels: Option<String>,
    /// Sweep the cluster count 1..=10 for the full variant instead of
    /// running the variant grid.
    #[arg(long = "sweep_clusters")]
    pub sweep_clusters: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for synth.csv and spec.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long = "n_learners", value_name = "INT")]
    pub n_learners: Option<usize>,
    #[arg(long = "n_concepts", value_name = "INT")]
    pub n_concepts: Option<usize>,
    #[arg(long = "n_exercises", value_name = "INT")]
    pub n_exercises: Option<usize>,
    #[arg(long, value_name = "INT")]
    pub steps: Option<usize>,
    #[arg(long = "ability_mean", value_name = "FLOAT")]
    pub ability_mean: Option<f64>,
    #[arg(long = "ability_spread", value_name = "FLOAT")]
    pub ability_spread: Option<f64>,
    #[arg(long = "difficulty_mean", value_name = "FLOAT")]
    pub difficulty_mean: Option<f64>,
    #[arg(long = "difficulty_spread", value_name = "FLOAT")]
    pub difficulty_spread: Option<f64>,
    #[arg(long = "discrimination_mean", value_name = "FLOAT")]
    pub discrimination_mean: Option<f64>,
    #[arg(long = "discrimination_spread", value_name = "FLOAT")]
    pub discrimination_spread: Option<f64>,
    /// Ability gained after each correct answer.
    #[arg(long, value_name = "FLOAT")]
    pub drift: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    pub guess: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    pub slip: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Multiply this parameter group's analytic gradient by 1.5 before
    /// comparing (negative-control fixture; must make the check fail).
    #[arg(long = "corrupt_group", value_name = "NAME")]
    pub corrupt_group: Option<String>,
    /// Optional directory for gradcheck.json and the resolved config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Output directory for the CSVs.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Comma-separated learner ids to export states for (default: all).
    #[arg(long, value_name = "LIST")]
    pub learners: Option<String>,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = resolve_config_from(RunConfig::default(), &args.overrides)?;
    let data = prepare_data(&run)?;
    write_run_config(&args.out, &run)?;
    let mut model = Model::new(
        &run.model,
        data.set.vocabulary.n_concepts(),
        data.set.vocabulary.n_exercises(),
    )?;
    eprintln!(
        "training on {} sequences ({} held out), vocabulary of {} exercises / {} concepts",
        data.train.len(),
        data.test.len(),
        data.set.vocabulary.exercise_ids.len(),
        data.set.vocabulary.concept_ids.len()
    );
    let checkpoint_dir = args.out.join("checkpoint");
    let vocabulary = data.set.vocabulary.clone();
    let total_epochs = run.model.epochs;
    let outcome = train(&mut model, &data.train, &data.test, |snap| {
        save_checkpoint(
            &checkpoint_dir,
            snap.model,
            &vocabulary,
            snap.optimizer,
            snap.pool,
            snap.clusters,
            snap.history,
        )?;
        if let Some(row) = snap.history.last() {
            eprintln!(
                "epoch {}/{total_epochs}: train_loss {:.6} val_auc {:.6} val_acc {:.6}",
                row.epoch, row.train_loss, row.val_auc, row.val_acc
            );
        }
        Ok(())
    })?;
    fs::write(args.out.join("history.csv"), history_to_csv(&outcome.history))?;
    let json = serde_json::to_string_pretty(&outcome.final_metrics)? + "\n";
    fs::write(args.out.join("metrics.json"), &json)?;
    print!("{json}");
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let base = RunConfig {
        model: loaded.model.config.clone(),
        data: None,
        test_fraction: DEFAULT_TEST_FRACTION,
    };
    let run = resolve_config_from(base, &args.overrides)?;
    ensure_matches_checkpoint(&run.model, &loaded.model.config)?;
    let data = prepare_data(&run)?;
    ensure_matching_vocabulary(&data.set, &loaded.vocabulary)?;
    let report = evaluate(&loaded.model, &data.test, &loaded.clusters)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &args.out {
        write_run_config(out, &run)?;
        fs::write(out.join("metrics.json"), &json)?;
    }
    print!("{json}");
    Ok(())
}

fn train_cell(config: &ModelConfig, data: &PreparedData) -> Result<MetricsReport> {
    let mut model = Model::new(
        config,
        data.set.vocabulary.n_concepts(),
        data.set.vocabulary.n_exercises(),
    )?;
    let outcome = train(&mut model, &data.train, &data.test, |_| Ok(()))?;
    Ok(outcome.final_metrics)
}

fn parse_comma_list<T>(raw: Option<&str>, all: &[T], parse: fn(&str) -> Result<T>) -> Result<Vec<T>>
where
    T: Copy + PartialEq,
{
    let Some(raw) = raw else {
        return Ok(all.to_vec());
    };
    let mut out = Vec::new();
    for piece in raw.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let item = parse(piece)?;
        if !out.contains(&item) {
            out.push(item);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty selection list {raw:?}")));
    }
    Ok(out)
}

fn push_metrics_row(csv: &mut String, report: &MetricsReport, hash: &str) {
    csv.push_str(&format!(
        "{},{},{},{},{hash}\n",
        report.auc, report.acc, report.rmse, report.mae
    ));
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let run = resolve_config_from(RunConfig::default(), &args.overrides)?;
    let data = prepare_data(&run)?;
    write_run_config(&args.out, &run)?;
    let hash = split_hash(&data.train, &data.test);

    if args.sweep_clusters {
        let mut csv = String::from("clusters,auc,acc,rmse,mae,split_hash\n");
        for n in 1..=10 {
            let mut config = run.model.clone();
            config.ablation = Ablation::Full;
            config.clusters = n;
            let report = train_cell(&config, &data)?;
            eprintln!("clusters {n}: auc {:.6}", report.auc);
            csv.push_str(&format!("{n},"));
            push_metrics_row(&mut csv, &report, &hash);
        }
        fs::write(args.out.join("cluster_sweep.csv"), csv)?;
        return Ok(());
    }

    let variants = parse_comma_list(args.variants.as_deref(), &Ablation::ALL, Ablation::parse)?;
    let levels = parse_comma_list(args.irt_levels.as_deref(), &IrtLevel::ALL, IrtLevel::parse)?;
    let mut csv = String::from("variant,irt,auc,acc,rmse,mae,split_hash\n");
    for &variant in &variants {
        for &level in &levels {
            let mut config = run.model.clone();
            config.ablation = variant;
            config.irt_level = level;
            let report = train_cell(&config, &data)?;
            eprintln!("{} {}: auc {:.6}", variant.name(), level.name(), report.auc);
            csv.push_str(&format!("{},{},", variant.name(), level.name()));
            push_metrics_row(&mut csv, &report, &hash);
        }
    }
    fs::write(args.out.join("ablation.csv"), csv)?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(v) = args.n_learners {
        spec.n_learners = v;
    }
    if let Some(v) = args.n_concepts {
        spec.n_concepts = v;
    }
    if let Some(v) = args.n_exercises {
        spec.n_exercises = v;
    }
    if let Some(v) = args.steps {
        spec.steps = v;
    }
    if let Some(v) = args.ability_mean {
        spec.ability_mean = v;
    }
    if let Some(v) = args.ability_spread {
        spec.ability_spread = v;
    }
    if let Some(v) = args.difficulty_mean {
        spec.difficulty_mean = v;
    }
    if let Some(v) = args.difficulty_spread {
        spec.difficulty_spread = v;
    }
    if let Some(v) = args.discrimination_mean {
        spec.discrimination_mean = v;
    }
    if let Some(v) = args.discrimination_spread {
        spec.discrimination_spread = v;
    }
    if let Some(v) = args.drift {
        spec.drift = v;
    }
    if let Some(v) = args.guess {
        spec.guess = v;
    }
    if let Some(v) = args.slip {
        spec.slip = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let records = synth_generate(&spec)?;
    fs::create_dir_all(&args.out)?;
    write_csv(&records, &args.out.join("synth.csv"))?;
    fs::write(args.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    eprintln!(
        "wrote {} interactions for {} learners to {}",
        records.len(),
        spec.n_learners,
        args.out.join("synth.csv").display()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let base = RunConfig {
        model: ModelConfig {
            embed_dim: 8,
            seq_len: 12,
            batch_size: 2,
            clusters: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        data: None,
        test_fraction: DEFAULT_TEST_FRACTION,
    };
    let run = resolve_config_from(base, &args.overrides)?;
    let report = gradcheck(&run.model, args.corrupt_group.as_deref())?;
    for group in &report.groups {
        println!(
            "{:<24} max_rel_err {:>12} compared {:>5}",
            group.group,
            format!("{:.3e}", group.max_rel_err),
            group.compared
        );
    }
    println!("overall max relative error {:.3e}", report.max_rel_err);
    if let Some(out) = &args.out {
        write_run_config(out, &run)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    match report.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)) {
        Some(worst) if !report.passed => Err(Error::GradientMismatch {
            group: worst.group.clone(),
            rel_err: worst.max_rel_err,
        }),
        _ => {
            println!("gradient check passed");
            Ok(())
        }
    }
}

fn float_header(prefix: &str, dim: usize) -> String {
    (0..dim).map(|i| format!(",{prefix}_{i}")).collect()
}

fn push_floats(csv: &mut String, values: &[f64]) {
    for v in values {
        csv.push_str(&format!(",{v}"));
    }
}

fn export_exercises(model: &Model, vocabulary: &crate::data::Vocabulary) -> Result<String> {
    let n = vocabulary.exercise_ids.len();
    let exercises: Vec<usize> = (1..=n).collect();
    let concepts = vocabulary.exercise_concepts.clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = embed_exercise(
        &mut tape,
        &bound.embeddings,
        model.config.irt_level,
        &concepts,
        &exercises,
    )?;
    let dim = model.config.embed_dim;
    let values = tape.value(x).data().to_vec();
    let mut csv = format!("exercise_id,concept_id{}\n", float_header("x", dim));
    for i in 0..n {
        csv.push_str(&format!(
            "{},{}",
            vocabulary.exercise_ids[i],
            vocabulary.concept_ids[concepts[i] - 1]
        ));
        push_floats(&mut csv, &values[i * dim..(i + 1) * dim]);
        csv.push('\n');
    }
    Ok(csv)
}

fn export_states(
    model: &Model,
    clusters: &ClusterModel,
    sequences: &[Sequence],
) -> Result<String> {
    let dim = model.config.embed_dim;
    let mut csv = format!(
        "learner_id,chunk,position,cluster{}{}{}\n",
        float_header("yhat", dim),
        float_header("h", dim),
        float_header("z", dim)
    );
    let mut dropout_rng = stream_rng(model.config.seed, Stream::Dropout);
    let mut guess_rng = stream_rng(model.config.seed, Stream::Guess);
    for seq in sequences {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.forward_sequence(
            &mut tape,
            &bound,
            seq,
            clusters,
            false,
            &mut dropout_rng,
            &mut guess_rng,
            None,
        )?;
        let learning = out
            .learning_state
            .ok_or_else(|| Error::Contract("full-variant forward lost its learning state".into()))?;
        let knowledge = out
            .knowledge
            .ok_or_else(|| Error::Contract("full-variant forward lost its knowledge state".into()))?;
        let yhat = tape.value(learning).data().to_vec();
        let h = tape.value(knowledge).data().to_vec();
        let z = tape.value(out.fused).data().to_vec();
        for t in 0..out.valid_len {
            csv.push_str(&format!("{},{},{},{}", seq.learner, seq.chunk, t + 1, out.labels[t]));
            push_floats(&mut csv, &yhat[t * dim..(t + 1) * dim]);
            push_floats(&mut csv, &h[t * dim..(t + 1) * dim]);
            push_floats(&mut csv, &z[t * dim..(t + 1) * dim]);
            csv.push('\n');
        }
    }
    Ok(csv)
}

fn cmd_export_embeddings(args: &ExportArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    if loaded.model.config.ablation != Ablation::Full {
        return Err(Error::Config(format!(
            "state export requires a full-variant checkpoint; this one was trained as {}",
            loaded.model.config.ablation.name()
        )));
    }
    let base = RunConfig {
        model: loaded.model.config.clone(),
        data: None,
        test_fraction: DEFAULT_TEST_FRACTION,
    };
    let run = resolve_config_from(base, &args.overrides)?;
    ensure_matches_checkpoint(&run.model, &loaded.model.config)?;
    let data = prepare_data(&run)?;
    ensure_matching_vocabulary(&data.set, &loaded.vocabulary)?;

    let sequences: Vec<Sequence> = match &args.learners {
        None => data.set.sequences.clone(),
        Some(raw) => {
            let requested: Vec<&str> =
                raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if requested.is_empty() {
                return Err(Error::Config(format!("empty learner list {raw:?}")));
            }
            let known: BTreeSet<&str> =
                data.set.sequences.iter().map(|s| s.learner.as_str()).collect();
            for id in &requested {
                if !known.contains(id) {
                    return Err(Error::Data(format!("learner `{id}` not present in the data")));
                }
            }
            let wanted: BTreeSet<&str> = requested.into_iter().collect();
            data.set
                .sequences
                .iter()
                .filter(|s| wanted.contains(s.learner.as_str()))
                .cloned()
                .collect()
        }
    };

    write_run_config(&args.out, &run)?;
    let exercise_csv = export_exercises(&loaded.model, &loaded.vocabulary)?;
    fs::write(args.out.join("exercise_embeddings.csv"), &exercise_csv)?;
    let states_csv = export_states(&loaded.model, &loaded.clusters, &sequences)?;
    fs::write(args.out.join("states.csv"), &states_csv)?;
    eprintln!(
        "wrote {} exercise rows and {} state rows to {}",
        loaded.vocabulary.exercise_ids.len(),
        sequences.iter().map(|s| s.valid_len).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(args),
    }
}

/// Parses arguments, runs the command, and returns the process exit code:
/// 0 success, 2 config or usage error, 3 data error, 4 numerical error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides() -> ConfigOverrides {
        ConfigOverrides::default()
    }

    #[test]
    fn defaults_resolve_to_model_defaults() {
        let run = resolve_config_from(RunConfig::default(), &overrides()).unwrap();
        assert_eq!(run.model, ModelConfig::default());
        assert_eq!(run.data, None);
        assert_eq!(run.test_fraction, DEFAULT_TEST_FRACTION);
    }

    #[test]
    fn config_file_sets_keys_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# comment\n\nembed_dim = 32\nepochs = 5\nirt_level = 2PL\nablation = rks\n\
             data = interactions.csv\ntest_fraction = 0.25\n",
        )
        .unwrap();
        let mut o = overrides();
        o.config = Some(path);
        o.epochs = Some(9);
        let run = resolve_config_from(RunConfig::default(), &o).unwrap();
        assert_eq!(run.model.embed_dim, 32);
        assert_eq!(run.model.epochs, 9);
        assert_eq!(run.model.irt_level, IrtLevel::TwoPl);
        assert_eq!(run.model.ablation, Ablation::Rks);
        assert_eq!(run.data.as_deref(), Some(Path::new("interactions.csv")));
        assert_eq!(run.test_fraction, 0.25);
    }

    #[test]
    fn unknown_config_key_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "embed_dim = 16\nlearning_rate = 0.1\n").unwrap();
        let mut o = overrides();
        o.config = Some(path);
        let err = resolve_config_from(RunConfig::default(), &o).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key `learning_rate`"), "{msg}");
        assert!(msg.contains(":2:"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut run = RunConfig::default();
        let err = set_key(&mut run, "epochs", "three").unwrap_err();
        assert!(err.to_string().contains("invalid value \"three\" for key `epochs`"));
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let mut run = RunConfig::default();
        run.model.embed_dim = 24;
        run.model.irt_level = IrtLevel::OnePl;
        run.data = Some(PathBuf::from("d.csv"));
        let json = serde_json::to_string_pretty(&run).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn echoed_json_config_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunConfig::default();
        run.model.embed_dim = 24;
        run.model.lr = 0.005;
        run.model.ablation = Ablation::Rle;
        run.test_fraction = 0.3;
        write_run_config(dir.path(), &run).unwrap();
        let mut o = overrides();
        o.config = Some(dir.path().join("config.json"));
        let resolved = resolve_config_from(RunConfig::default(), &o).unwrap();
        assert_eq!(resolved, run);
    }

    #[test]
    fn json_config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, "{\"embed_dim\": 16, \"momentum\": 0.9}\n").unwrap();
        let mut o = overrides();
        o.config = Some(path);
        let err = resolve_config_from(RunConfig::default(), &o).unwrap_err();
        assert!(err.to_string().contains("unknown config key `momentum`"), "{err}");
    }

    #[test]
    fn checkpoint_mismatch_names_both_values() {
        let stored = ModelConfig::default();
        let mut requested = stored.clone();
        requested.embed_dim = 32;
        let err = ensure_matches_checkpoint(&requested, &stored).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("embed_dim 128"), "{msg}");
        assert!(msg.contains("embed_dim 32"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn selection_lists_parse_and_dedupe() {
        let variants =
            parse_comma_list(Some("RKS, full,rks"), &Ablation::ALL, Ablation::parse).unwrap();
        assert_eq!(variants, vec![Ablation::Rks, Ablation::Full]);
        let all = parse_comma_list(None, &IrtLevel::ALL, IrtLevel::parse).unwrap();
        assert_eq!(all, IrtLevel::ALL.to_vec());
        assert!(parse_comma_list(Some("bogus"), &Ablation::ALL, Ablation::parse).is_err());
    }

    #[test]
    fn usage_errors_exit_two_and_help_exits_zero() {
        let usage = Cli::try_parse_from(["lskt", "train"]).unwrap_err();
        assert!(usage.use_stderr());
        let unknown = Cli::try_parse_from(["lskt", "no-such-command"]).unwrap_err();
        assert!(unknown.use_stderr());
        let help = Cli::try_parse_from(["lskt", "--help"]).unwrap_err();
        assert!(!help.use_stderr());
    }
}
