use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use trasend_core::checkpoint::{load_checkpoint, save_checkpoint};
use trasend_core::data::{load_dataset_csv, write_dataset_csv, Dataset};
use trasend_core::io::write_json;
use trasend_core::metrics::Confusion;
use trasend_core::model::{Model, Variant};
use trasend_core::personalize::{personalize_from_events, personalize_run, read_events};
use trasend_core::pipeline::{preprocess_dataset, RunConfig, SampleArchive};
use trasend_core::preprocess::{AugmentationSpec, Origin, PreprocessedSample};
use trasend_core::synth::{generate_synthetic_dataset, SyntheticSpec};
use trasend_core::train::{
    evaluate, fingerprint_hash, leave_one_user_out, select_learning_rate, train, EvalReport, NeuralLearner, TrainConfig,
    UserReport,
};
use trasend_core::validation::{
    augmentation_ablation, gradcheck_suite, permuted_label_experiment, personalization_experiment, AugmentationAblation,
    PermutedLabelExperiment, PersonalizationExperiment,
};
use trasend_core::Error;

const DATA_ENV: &str = "TRASEND_DATA_DIR";

#[derive(Parser)]
#[command(name = "trasend", version, about = "Multi-sensor activity recognition: training, evaluation and personalization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice (data generation, augmentation, initialization, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model variant, overriding the configuration file.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset manifest, or a directory containing manifest.json
    /// [default: $TRASEND_DATA_DIR/manifest.json].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in canonical CSV form (config: synthetic spec).
    Synth,
    /// Convert a CSV dataset into a sample archive (config: run config).
    Preprocess {
        #[command(flatten)]
        data: DataArg,
    },
    /// Leave-one-user-out evaluation, or a single fold with --holdout (config: run config).
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Train on every other user, test on this one and save the model.
        #[arg(long)]
        holdout: Option<String>,
    },
    /// Score a checkpoint on a dataset's real samples, per user (config: run config).
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only this user.
        #[arg(long)]
        user: Option<String>,
    },
    /// Adapt a checkpoint's output layer to one user (config: run config).
    Personalize {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        /// JSON-lines feedback events; defaults to the first half of each activity.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Gradient checks and synthetic experiments (config: experiment settings).
    Validate {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Gradcheck,
    Permuted,
    Augmentation,
    Personalization,
    All,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// Process exit status for an error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::NonFiniteLoss { .. } | Error::Tensor(trasend_core::autodiff::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

enum Failure {
    Run(Error),
    /// A validation check failed; reported with exit code 3.
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Checks) => ExitCode::from(3),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth => synth(c)?,
        Command::Preprocess { data } => preprocess(c, data)?,
        Command::Train { data, holdout } => train_cmd(c, data, holdout.as_deref())?,
        Command::Evaluate { data, checkpoint, user } => evaluate_cmd(c, data, checkpoint, user.as_deref())?,
        Command::Personalize {
            data,
            checkpoint,
            user,
            events,
        } => personalize_cmd(c, data, checkpoint, user, events.as_deref())?,
        Command::Validate { suite } => validate(c, *suite)?,
    }
    Ok(())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> trasend_core::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn out_dir(c: &Common) -> trasend_core::Result<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out <dir> is required for this command".into()))
}

fn run_config(c: &Common) -> trasend_core::Result<RunConfig> {
    let mut config: RunConfig = read_config(c.config.as_deref())?;
    if let Some(v) = c.variant {
        config.variant = v;
    }
    config.train.validate()?;
    Ok(config)
}

fn manifest_path(arg: &DataArg) -> trasend_core::Result<PathBuf> {
    let path = match &arg.data {
        Some(p) => p.clone(),
        None => std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no dataset: pass --data or set {DATA_ENV}")))?,
    };
    Ok(if path.is_dir() { path.join("manifest.json") } else { path })
}

fn load(arg: &DataArg) -> trasend_core::Result<Dataset> {
    let path = manifest_path(arg)?;
    info!("loading {}", path.display());
    load_dataset_csv(&path)
}

fn write<T: Serialize>(dir: &Path, name: &str, value: &T) -> trasend_core::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    write_json(&path, value)?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn synth(c: &Common) -> trasend_core::Result<()> {
    let mut spec: SyntheticSpec = read_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let dataset = generate_synthetic_dataset(&spec)?;
    let path = write_dataset_csv(&dataset, out_dir(c)?)?;
    println!("{}", path.display());
    Ok(())
}

fn preprocess(c: &Common, data: &DataArg) -> trasend_core::Result<()> {
    let config = run_config(c)?;
    let dataset = load(data)?;
    let samples = preprocess_dataset(&dataset, &config.preprocess, &config.train.augmentation, c.seed.unwrap_or(0))?;
    let real = samples.iter().filter(|s| s.origin == Origin::Real).count();
    let archive = SampleArchive::new(
        config.preprocess,
        dataset.manifest.sensor_specs(),
        dataset.manifest.num_classes(),
        &samples,
    );
    write(out_dir(c)?, "samples.json", &archive)?;
    println!("{real} real and {} augmented samples", samples.len() - real);
    Ok(())
}

fn train_cmd(c: &Common, data: &DataArg, holdout: Option<&str>) -> trasend_core::Result<()> {
    let mut config = run_config(c)?;
    let seed = c.seed.unwrap_or(config.train.seed);
    let out = out_dir(c)?;
    let dataset = load(data)?;
    let classes = dataset.manifest.num_classes();
    let model = Model::new(config.model_config(dataset.manifest.sensor_specs(), classes)?)?;
    let pool = preprocess_dataset(&dataset, &config.preprocess, &config.train.augmentation, seed)?;

    if config.select_learning_rate {
        let real: Vec<PreprocessedSample> = pool.iter().filter(|s| s.origin == Origin::Real).cloned().collect();
        let base = config.train.clone();
        let selection = select_learning_rate(
            &real,
            &config.train.lr_candidates,
            classes,
            |lr| {
                NeuralLearner::new(
                    model.clone(),
                    TrainConfig {
                        learning_rate: lr,
                        ..base.clone()
                    },
                )
            },
            seed,
        )?;
        info!("selected learning rate {}", selection.selected);
        config.train.learning_rate = selection.selected;
        write(out, "lr_selection.json", &selection)?;
    }

    let report = match holdout {
        None => {
            let mut learner = NeuralLearner::new(model.clone(), config.train.clone());
            leave_one_user_out(&pool, &pool, classes, &mut learner, seed)?.report
        }
        Some(user) => {
            if dataset.user(user).is_none() {
                return Err(Error::InvalidData(format!("user {user:?} is not in the dataset")));
            }
            let train_set: Vec<&PreprocessedSample> = pool.iter().filter(|s| s.user_id != user).collect();
            let test: Vec<&PreprocessedSample> =
                pool.iter().filter(|s| s.user_id == user && s.origin == Origin::Real).collect();
            let tc = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let outcome = train(&model, model.init_params(seed)?, &train_set, &test, &tc)?;
            save_checkpoint(&out.join("checkpoint"), &outcome.params, model.config(), seed)?;
            let mut report = report_for(&model, &outcome.params, &[(user.to_string(), test)], seed)?;
            if let Some(r) = report.per_user.get_mut(user) {
                r.history = Some(outcome.history);
            }
            report
        }
    };
    write(out, "report.json", &report)?;
    print_report(&report);
    Ok(())
}

fn report_for(
    model: &Model,
    params: &trasend_core::autodiff::ParamStore,
    users: &[(String, Vec<&PreprocessedSample>)],
    seed: u64,
) -> trasend_core::Result<EvalReport> {
    let mut per_user = std::collections::BTreeMap::new();
    let mut warnings = Vec::new();
    for (user, samples) in users {
        if samples.is_empty() {
            warnings.push(format!("user {user} has no real samples"));
            continue;
        }
        let confusion: Confusion = evaluate(model, params, samples)?;
        per_user.insert(
            user.clone(),
            UserReport {
                f1: confusion.macro_f1(),
                confusion,
                test_samples: samples.len(),
                history: None,
            },
        );
    }
    let aggregate_f1 = if per_user.is_empty() {
        0.0
    } else {
        per_user.values().map(|r: &UserReport| r.f1).sum::<f64>() / per_user.len() as f64
    };
    Ok(EvalReport {
        per_user,
        aggregate_f1,
        f1_averaging: "macro".into(),
        config_hash: fingerprint_hash(&serde_json::to_value(model.config())?),
        seed,
        warnings,
    })
}

fn print_report(report: &EvalReport) {
    println!("{:<16} {:>8} {:>8}", "user", "samples", "macro-F1");
    for (user, r) in &report.per_user {
        println!("{user:<16} {:>8} {:>8.4}", r.test_samples, r.f1);
    }
    println!("{:<16} {:>8} {:>8.4}", "aggregate", "", report.aggregate_f1);
}

/// Loads a checkpoint and checks that the dataset preprocessed with `config`
/// fits it.
fn checkpoint_model(
    dir: &Path,
    config: &RunConfig,
    dataset: &Dataset,
) -> trasend_core::Result<(Model, trasend_core::autodiff::ParamStore, u64)> {
    let ck = load_checkpoint(dir)?;
    let expected = config.model_config(dataset.manifest.sensor_specs(), dataset.manifest.num_classes())?;
    if (expected.timesteps, expected.freq_bins, &expected.sensors, expected.num_classes)
        != (ck.config.timesteps, ck.config.freq_bins, &ck.config.sensors, ck.config.num_classes)
    {
        return Err(Error::Alignment(format!(
            "checkpoint expects {} timesteps x {} bins over {:?} with {} classes; the data gives {} x {} over {:?} with {}",
            ck.config.timesteps,
            ck.config.freq_bins,
            ck.config.sensors.iter().map(|s| &s.id).collect::<Vec<_>>(),
            ck.config.num_classes,
            expected.timesteps,
            expected.freq_bins,
            expected.sensors.iter().map(|s| &s.id).collect::<Vec<_>>(),
            expected.num_classes,
        )));
    }
    Ok((Model::new(ck.config)?, ck.params, ck.seed))
}

fn real_samples(dataset: &Dataset, config: &RunConfig, seed: u64) -> trasend_core::Result<Vec<PreprocessedSample>> {
    preprocess_dataset(dataset, &config.preprocess, &AugmentationSpec::none(), seed)
}

fn evaluate_cmd(c: &Common, data: &DataArg, checkpoint: &Path, user: Option<&str>) -> trasend_core::Result<()> {
    let config = run_config(c)?;
    let dataset = load(data)?;
    let (model, params, ck_seed) = checkpoint_model(checkpoint, &config, &dataset)?;
    let seed = c.seed.unwrap_or(ck_seed);
    let samples = real_samples(&dataset, &config, seed)?;
    let users: Vec<String> = match user {
        Some(u) if dataset.user(u).is_none() => {
            return Err(Error::InvalidData(format!("user {u:?} is not in the dataset")))
        }
        Some(u) => vec![u.to_string()],
        None => dataset.manifest.users.clone(),
    };
    let groups: Vec<(String, Vec<&PreprocessedSample>)> = users
        .into_iter()
        .map(|u| {
            let s = samples.iter().filter(|s| s.user_id == u).collect();
            (u, s)
        })
        .collect();
    let report = report_for(&model, &params, &groups, seed)?;
    write(out_dir(c)?, "report.json", &report)?;
    print_report(&report);
    Ok(())
}

fn personalize_cmd(
    c: &Common,
    data: &DataArg,
    checkpoint: &Path,
    user: &str,
    events: Option<&Path>,
) -> trasend_core::Result<()> {
    let config = run_config(c)?;
    let dataset = load(data)?;
    let (model, params, ck_seed) = checkpoint_model(checkpoint, &config, &dataset)?;
    let samples = real_samples(&dataset, &config, c.seed.unwrap_or(ck_seed))?;
    let own: Vec<&PreprocessedSample> = samples.iter().filter(|s| s.user_id == user).collect();
    if own.is_empty() {
        return Err(Error::InvalidData(format!("user {user:?} has no samples")));
    }
    let (report, adapted) = match events {
        Some(path) => personalize_from_events(&model, &params, &own, &read_events(path)?, config.personalization)?,
        None => personalize_run(&model, &params, &own, config.personalization)?,
    };
    let out = out_dir(c)?;
    write(out, "personalization.json", &report)?;
    save_checkpoint(&out.join("checkpoint"), &adapted, model.config(), ck_seed)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!(
        "{user}: macro-F1 {:.4} -> {:.4} ({} adaptation, {} test samples)",
        report.f1_before, report.f1_after, report.adaptation_samples, report.test_samples
    );
    Ok(())
}

/// Experiment settings for `validate`; each section defaults to the values
/// used by the acceptance suite.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ValidateConfig {
    permuted: PermutedLabelExperiment,
    augmentation: AugmentationAblation,
    personalization: PersonalizationExperiment,
}

fn validate(c: &Common, suite: Suite) -> Result<(), Failure> {
    let mut config: ValidateConfig = read_config(c.config.as_deref())?;
    if let Some(v) = c.variant {
        config.permuted.variant = v;
        config.augmentation.variant = v;
        config.personalization.variant = v;
    }
    if let Some(seed) = c.seed {
        config.personalization.seed = seed;
    }
    let mut failed = false;
    let mut results = serde_json::Map::new();
    let all = suite == Suite::All;

    if all || suite == Suite::Gradcheck {
        let lines = gradcheck_suite(c.seed.unwrap_or(0))?;
        println!("{:<24} {:>14}", "gradcheck", "max rel error");
        for l in &lines {
            println!("{:<24} {:>14.3e} {}", l.name, l.max_rel_error, if l.passed { "ok" } else { "FAIL" });
        }
        failed |= lines.iter().any(|l| !l.passed);
        results.insert("gradcheck".into(), serde_json::to_value(&lines).map_err(Error::from)?);
    }
    if all || suite == Suite::Permuted {
        let s = permuted_label_experiment(&config.permuted)?;
        let ok = (s.mean_f1_random_train - s.chance).abs() <= 0.10 && s.mean_improvement() >= 0.15;
        println!(
            "permuted labels: F1 {:.3} (chance {:.3}) -> {:.3} after personalization {}",
            s.mean_f1_random_train,
            s.chance,
            s.mean_f1_after_personalization,
            if ok { "ok" } else { "FAIL" }
        );
        failed |= !ok;
        results.insert("permuted".into(), serde_json::to_value(&s).map_err(Error::from)?);
    }
    if all || suite == Suite::Augmentation {
        let s = augmentation_ablation(&config.augmentation)?;
        let ok = s.mean_gain() >= 0.02;
        println!(
            "augmentation: F1 {:.4} without, {:.4} with {} copies {}",
            s.mean_without,
            s.mean_with,
            s.copies,
            if ok { "ok" } else { "FAIL" }
        );
        failed |= !ok;
        results.insert("augmentation".into(), serde_json::to_value(&s).map_err(Error::from)?);
    }
    if all || suite == Suite::Personalization {
        let s = personalization_experiment(&config.personalization)?;
        let ok = s.mean_gain >= 0.05 && s.non_negative_fraction >= 0.75 && s.users.iter().all(|u| u.extractor_unchanged);
        println!(
            "personalization: mean F1 gain {:.4}, {:.0}% of users not worse {}",
            s.mean_gain,
            100.0 * s.non_negative_fraction,
            if ok { "ok" } else { "FAIL" }
        );
        failed |= !ok;
        results.insert("personalization".into(), serde_json::to_value(&s).map_err(Error::from)?);
    }
    if let Some(out) = &c.out {
        write(out, "validation.json", &results)?;
    }
    if failed {
        return Err(Failure::Checks);
    }
    Ok(())
}
