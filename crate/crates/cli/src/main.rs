//! Command-line runner binding data generation, training, evaluation, and
//! reporting into reproducible experiment runs.
//!
//! Every command is deterministic given its config and seed: re-running
//! writes byte-identical datasets, checkpoints, and metric CSVs. Manifests
//! record what was run and differ only in timestamps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attrface_core::data::{self, DatasetConfig};
use attrface_core::error::{Error, Result};
use attrface_core::eval::{self, AttrOnlyOptions, Table};
use attrface_core::model::MultiTaskModel;
use attrface_core::trainer::{self, ModeSpec, TrainConfig};
use attrface_core::{rng, Error as CoreError};

mod manifest;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "attrface",
    version,
    about = "Attribute-aware face embedding laboratory",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON config.
    GenData(GenDataArgs),
    /// Train one model on a dataset under a training config.
    Train(TrainArgs),
    /// Evaluate a checkpoint: verification, probes, attribute-only analysis.
    Eval(EvalArgs),
    /// Train and evaluate a list of group-mode assignments.
    Suite(SuiteArgs),
    /// Re-render the CSV tables in a run directory as aligned text.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset config (JSON mirroring the dataset config fields).
    #[arg(long)]
    config: PathBuf,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    /// Training config (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (checkpoint, history CSV, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the group-mode assignment, e.g. "FR", "+PMN-A", "-H".
    #[arg(long)]
    modes: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed for pair sampling and probe splits.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the attribute-only identification/verification analysis.
    #[arg(long)]
    attr_only: bool,
}

#[derive(Args)]
struct SuiteArgs {
    /// Suite config: {"suite": ["FR", "+PMN-A", ...], "train": {...}}.
    #[arg(long)]
    config: PathBuf,
    /// Dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the training config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing CSV tables.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; argument problems are
            // validation failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1u8 } else { 2u8 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Suite(args) => cmd_suite(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::config(
            path.display().to_string(),
            format!("invalid JSON config: {e}"),
        )
    })
}

fn write_table(dir: &Path, stem: &str, table: &Table, run_id: &str) -> Result<(PathBuf, PathBuf)> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let txt_path = dir.join(format!("{stem}.txt"));
    let csv = format!("# run {run_id}\n{}", table.to_csv());
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&txt_path, table.render_text())?;
    Ok((csv_path, txt_path))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut config: DatasetConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;

    let mut manifest = RunManifest::start(
        "gen-data",
        &[&args.config],
        config.seed,
        &serde_json::to_vec(&config)?,
    );
    let run_id = manifest.run_id.clone();
    let dataset = data::generate(&config)?;
    data::save_tagged(&dataset, &args.out, Some(&run_id))?;
    manifest.add_output(&args.out);
    manifest.finish_and_write(args.out.with_extension("manifest.json").as_path())?;
    println!(
        "wrote {} ({} samples, {} attributes, run {})",
        args.out.display(),
        dataset.samples.len(),
        dataset.config.num_attributes(),
        run_id
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = data::load(&args.dataset)?;
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(modes) = &args.modes {
        config.modes = ModeSpec::Notation(modes.clone());
    }
    config.validate()?;

    std::fs::create_dir_all(&args.out)?;
    let mut config_paths: Vec<&Path> = vec![args.dataset.as_path()];
    if let Some(p) = &args.config {
        config_paths.push(p.as_path());
    }
    let mut manifest = RunManifest::start(
        "train",
        &config_paths,
        config.seed,
        &serde_json::to_vec(&config)?,
    );
    let run_id = manifest.run_id.clone();

    let model = trainer::build_model(&dataset, &config)?;
    let trained = trainer::train(model, &dataset, &config)?;

    let ckpt_path = args.out.join("model.ckpt");
    trained.model.save(&ckpt_path, Some(run_id.clone()))?;
    let history_path = args.out.join("history.csv");
    std::fs::write(
        &history_path,
        format!("# run {run_id}\n{}", trained.history.to_csv()),
    )?;
    manifest.add_output(&ckpt_path);
    manifest.add_output(&history_path);
    manifest.finish_and_write(&args.out.join("manifest.json"))?;

    let group_order: Vec<String> = dataset
        .config
        .group_sizes()
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    let mode = config.modes.resolve()?.mode_string(&group_order);
    println!(
        "trained {mode}: best val {:.4} at epoch {} ({} epochs run, run {})",
        trained.history.best_val,
        trained.history.best_epoch,
        trained.history.epochs.len(),
        run_id
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = data::load(&args.dataset)?;
    let (model, meta) = MultiTaskModel::load(&args.checkpoint)?;
    if model.encoder.config.input_dim != dataset.config.input_dim {
        return Err(Error::config(
            "checkpoint",
            format!(
                "encoder input_dim {} does not match dataset input_dim {}",
                model.encoder.config.input_dim, dataset.config.input_dim
            ),
        ));
    }

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::start(
        "eval",
        &[args.checkpoint.as_path(), args.dataset.as_path()],
        args.seed,
        format!("attr_only={}", args.attr_only).as_bytes(),
    );
    let run_id = manifest.run_id.clone();

    // Verification protocol on held-out pairs, sized to the population.
    let num_pairs = data::supported_pair_count(&dataset, data::Split::Eval, 2000);
    let pairs = data::make_verification_pairs(&dataset, num_pairs, rng::derive(args.seed, "eval-pairs"))?;
    let scores = eval::embed_and_score(&model, &dataset, &pairs)?;
    let report = eval::verification_accuracy_10fold(&scores, &pairs)?;
    let mut verif = Table::new("10-fold verification", vec!["accuracy_pct".into()]);
    for (f, acc) in report.fold_accuracy.iter().enumerate() {
        verif.push(format!("fold{f}"), vec![acc * 100.0]);
    }
    verif.push("mean", vec![report.mean * 100.0]);
    let (csv, _) = write_table(&args.out, "verification", &verif, &run_id)?;
    manifest.add_output(&csv);

    // Linear probes per group on frozen eval-split embeddings.
    let eval_idx = dataset.eval_indices();
    let feats: Vec<Vec<f64>> = eval_idx
        .iter()
        .map(|&i| dataset.samples[i].features.clone())
        .collect();
    let mut embeddings = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(256) {
        embeddings.extend(model.embed_batch(chunk)?);
    }
    let labels: Vec<Vec<u8>> = eval_idx
        .iter()
        .map(|&i| dataset.samples[i].attributes.clone())
        .collect();
    let mut probes = Table::new(
        "linear probe accuracy on frozen embeddings",
        vec!["mean_acc_pct".into(), "attributes".into()],
    );
    for (group, indices) in dataset.config.group_slices() {
        let report = eval::linear_probe(
            &embeddings,
            &labels,
            &indices,
            rng::derive(args.seed, &format!("probe:{group}")),
        )?;
        let kept = report.results.iter().filter(|r| r.accuracy.is_some()).count();
        probes.push(
            group,
            vec![report.group_mean.unwrap_or(f64::NAN) * 100.0, kept as f64],
        );
    }
    let (csv, _) = write_table(&args.out, "probes", &probes, &run_id)?;
    manifest.add_output(&csv);

    if args.attr_only {
        let defaults = AttrOnlyOptions::default();
        let total = data::supported_pair_count(
            &dataset,
            data::Split::Train,
            defaults.train_pairs + defaults.eval_pairs,
        );
        let train_pairs = (total * 4 / 5) & !1;
        let table = eval::attribute_only_table(
            &dataset,
            &AttrOnlyOptions {
                train_pairs,
                eval_pairs: total - train_pairs,
                seed: rng::derive(args.seed, "attr-only"),
            },
        )?;
        let (csv, _) = write_table(&args.out, "attr_only", &table, &run_id)?;
        manifest.add_output(&csv);
    }

    manifest.finish_and_write(&args.out.join("manifest.json"))?;
    let label = meta.run_id.as_deref().unwrap_or("untagged");
    println!(
        "eval of {label}: verification mean {:.2}% (run {})",
        report.mean * 100.0,
        run_id
    );
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SuiteConfigFile {
    suite: Vec<String>,
    #[serde(default)]
    train: TrainConfig,
}

fn cmd_suite(args: SuiteArgs) -> Result<()> {
    let dataset = data::load(&args.dataset)?;
    let file: SuiteConfigFile = read_json(&args.config)?;
    if file.suite.is_empty() {
        return Err(Error::config("suite", "must list at least one mode"));
    }
    let mut base = file.train;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    base.validate()?;
    let specs: Vec<ModeSpec> = file
        .suite
        .iter()
        .map(|s| ModeSpec::Notation(s.clone()))
        .collect();

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::start(
        "suite",
        &[args.config.as_path(), args.dataset.as_path()],
        base.seed,
        &serde_json::to_vec(&(&file.suite, &base))?,
    );
    let run_id = manifest.run_id.clone();

    let result = trainer::run_experiment_suite(&dataset, &specs, &base, args.jobs)?;
    let table = result.to_table();
    let (csv, txt) = write_table(&args.out, "results", &table, &run_id)?;
    manifest.add_output(&csv);
    manifest.finish_and_write(&args.out.join("manifest.json"))?;

    print!("{}", std::fs::read_to_string(txt)?);
    println!("run {run_id}");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let known = [
        ("results", "verification accuracy by training mode"),
        ("verification", "10-fold verification"),
        ("probes", "linear probe accuracy on frozen embeddings"),
        ("attr_only", "identity predictiveness of attribute labels"),
    ];
    let mut tables = Vec::new();
    for (stem, title) in known {
        let path = args.out.join(format!("{stem}.csv"));
        if path.exists() {
            let csv = std::fs::read_to_string(&path)?;
            tables.push(Table::from_csv(title, &csv)?);
        }
    }
    if tables.is_empty() {
        return Err(CoreError::eval(format!(
            "no report CSVs found in {}",
            args.out.display()
        )));
    }
    print!("{}", eval::render_report(&tables));
    Ok(())
}
