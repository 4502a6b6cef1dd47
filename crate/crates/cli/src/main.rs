use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use son_core::diagnostics::{eval_mse, noise_recovery};
use son_core::model::{AnyModel, Checkpoint};
use son_core::oracles::{Experiment, OperatorDataset};
use son_core::presets::{depth_matched_baseline, preset, ExperimentPreset, Scale};
use son_core::runner::{build_model, ensemble_study, final_loss, generate, ModelKind};
use son_core::training::write_history;
use son_core::{Error, Result};

mod manifest;

use manifest::{read_preset, RunManifest};

#[derive(Parser)]
#[command(
    name = "son",
    version,
    about = "Stochastic operator network experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the train and test sets of a preset.
    Generate(GenerateArgs),
    /// Train a SON or the baseline DeepONet.
    Train(TrainArgs),
    /// Single-draw MSE on the train and test sets.
    Eval(ReportArgs),
    /// Recovered noise level from repeated predictions.
    Noise(ReportArgs),
    /// Model vs oracle ensemble statistics (elliptic).
    Ensemble(ReportArgs),
    /// Train the SON and two baselines on one dataset and tabulate them.
    Compare(CompareArgs),
}

#[derive(Args, Clone)]
struct PresetArgs {
    /// Experiment whose preset to start from.
    #[arg(long)]
    preset: Option<Experiment>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Small)]
    scale: ScaleArg,
    /// TOML file merged over the preset, or a complete preset when --preset is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed: data, initialization and training noise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Small,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Son,
    Baseline,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Son => ModelKind::Son,
            ModelArg::Baseline => ModelKind::Baseline,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    preset: PresetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    preset: PresetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory from `generate`; drawn into OUT/data when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelArg::Son)]
    model: ModelArg,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory from `train`.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    preset: PresetArgs,
    /// Report directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repetitions (noise) or ensemble members (ensemble).
    #[arg(long)]
    reps: Option<usize>,
    /// Noise report on at most this many test samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    preset: PresetArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) | Error::Contract(_) => 2,
        Error::Numeric(_) | Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Noise(a) => cmd_noise(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Compare(a) => cmd_compare(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SON_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!("SON_THREADS must be a positive integer, got '{v}'"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Preset from the flags, with the seed flag taking precedence over the file.
fn resolve_preset(args: &PresetArgs) -> Result<ExperimentPreset> {
    let scale = match args.scale {
        ScaleArg::Small => Scale::Small,
        ScaleArg::Paper => Scale::Paper,
    };
    let mut p = match (args.preset, &args.config) {
        (Some(e), None) => preset(e, scale),
        (Some(e), Some(path)) => preset(e, scale).merge_toml(&read_text(path)?)?,
        (None, Some(path)) => ExperimentPreset::from_toml(&read_text(path)?)?,
        (None, None) => return Err(Error::Config("give --preset or --config".into())),
    };
    if let Some(s) = args.seed {
        p.train.seed = s;
    }
    p.validate()?;
    Ok(p)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_data(p: &ExperimentPreset, dir: &Path) -> Result<()> {
    let (train, test) = generate(p, p.train.seed)?;
    train.save(&dir.join("train"))?;
    test.save(&dir.join("test"))?;
    let path = dir.join("preset.toml");
    std::fs::write(&path, p.to_toml()?).map_err(io_err(&path))?;
    println!(
        "{}: {} train rows ({} functions), {} test rows ({} functions)",
        p.experiment,
        train.len(),
        train.n_functions(),
        test.len(),
        test.n_functions()
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let p = resolve_preset(&a.preset)?;
    let mut m = RunManifest::start("generate", &p, None, &a.out);
    create_dir(&a.out)?;
    write_data(&p, &a.out)?;
    m.artifacts.insert("train".into(), a.out.join("train"));
    m.artifacts.insert("test".into(), a.out.join("test"));
    m.artifacts
        .insert("preset".into(), a.out.join("preset.toml"));
    m.finish(&a.out)
}

fn load_split(data: &Path, split: &str) -> Result<OperatorDataset> {
    OperatorDataset::load(&data.join(split))
}

/// Uses the given dataset, or draws the preset's data into `out/data`.
fn ensure_data(p: &ExperimentPreset, data: Option<&Path>, out: &Path) -> Result<PathBuf> {
    match data {
        Some(d) => Ok(d.to_path_buf()),
        None => {
            let d = out.join("data");
            create_dir(&d)?;
            write_data(p, &d)?;
            Ok(d)
        }
    }
}

struct Trained {
    model: AnyModel,
    train_mse: f64,
    seconds: f64,
}

fn train_model(
    p: &ExperimentPreset,
    kind: ModelKind,
    train: &OperatorDataset,
    out: &Path,
) -> Result<Trained> {
    let mut model = build_model(p, kind, p.train.seed)?;
    let every = (p.train.epochs / 20).max(1);
    let start = Instant::now();
    let history = model.train(train, &p.train, |r, _| {
        if (r.epoch + 1) % every == 0 || r.epoch + 1 == p.train.epochs {
            eprintln!(
                "[{kind}] epoch {:>5}  loss {:.6e}  lr {:.3e}",
                r.epoch + 1,
                r.mean_loss,
                r.lr
            );
        }
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    create_dir(out)?;
    write_history(&out.join("history.csv"), &history)?;
    Checkpoint {
        epoch: history.len(),
        model: model.clone(),
    }
    .save(&out.join("checkpoint.json"))?;
    Ok(Trained {
        model,
        train_mse: final_loss(&history),
        seconds,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut p = resolve_preset(&a.preset)?;
    if let Some(e) = a.epochs {
        p.train.epochs = e;
    }
    let kind = ModelKind::from(a.model);
    create_dir(&a.out)?;
    let mut m = RunManifest::start("train", &p, Some(kind), &a.out);
    let data = ensure_data(&p, a.data.as_deref(), &a.out)?;
    let train = load_split(&data, "train")?;
    let t = train_model(&p, kind, &train, &a.out)?;
    println!("final train loss {:.6e}  ({:.1} s)", t.train_mse, t.seconds);
    m.data = Some(data);
    m.train_seconds = Some(t.seconds);
    m.artifacts
        .insert("checkpoint".into(), a.out.join("checkpoint.json"));
    m.artifacts
        .insert("history".into(), a.out.join("history.csv"));
    let path = a.out.join("preset.toml");
    std::fs::write(&path, p.to_toml()?).map_err(io_err(&path))?;
    m.artifacts.insert("preset".into(), path);
    m.finish(&a.out)
}

/// Everything a report command needs, gathered from a run directory and flags.
struct ReportContext {
    preset: ExperimentPreset,
    model: AnyModel,
    data: PathBuf,
    out: PathBuf,
    seed: u64,
}

fn resolve_report(a: &ReportArgs) -> Result<ReportContext> {
    let run = a.run.as_ref().map(|r| RunManifest::load(r)).transpose()?;
    let checkpoint = a
        .checkpoint
        .clone()
        .or_else(|| {
            run.as_ref()
                .and_then(|m| m.artifacts.get("checkpoint").cloned())
        })
        .ok_or_else(|| Error::Config("give --run or --checkpoint".into()))?;
    let data = a
        .data
        .clone()
        .or_else(|| run.as_ref().and_then(|m| m.data.clone()))
        .ok_or_else(|| Error::Config("give --run or --data".into()))?;
    let mut preset = if a.preset.preset.is_some() || a.preset.config.is_some() {
        resolve_preset(&a.preset)?
    } else if let Some(m) = &run {
        m.preset.clone()
    } else {
        read_preset(&data.join("preset.toml"))?
    };
    if let Some(s) = a.preset.seed {
        preset.train.seed = s;
    }
    let out = a
        .out
        .clone()
        .or_else(|| a.run.clone())
        .ok_or_else(|| Error::Config("give --out or --run".into()))?;
    create_dir(&out)?;
    Ok(ReportContext {
        seed: preset.train.seed,
        model: Checkpoint::load(&checkpoint)?.model,
        preset,
        data,
        out,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.write_record(r).map_err(fmt)?;
    }
    w.flush().map_err(io_err(path))
}

fn cmd_eval(a: ReportArgs) -> Result<()> {
    let c = resolve_report(&a)?;
    let mut rows = Vec::new();
    for split in ["train", "test"] {
        let ds = load_split(&c.data, split)?;
        let mse = eval_mse(&c.model, &ds, c.seed)?;
        println!("{split} mse {mse:.6e}");
        rows.push(vec![split.to_string(), format!("{mse:.16e}")]);
    }
    write_rows(&c.out.join("eval.csv"), &["split", "mse"], &rows)
}

fn cmd_noise(a: ReportArgs) -> Result<()> {
    let c = resolve_report(&a)?;
    let test = load_split(&c.data, "test")?;
    let reps = a.reps.unwrap_or(c.preset.reports.noise_reps);
    let limit = a.limit.or(c.preset.reports.noise_samples);
    let report = noise_recovery(&c.model, &test, reps, limit, c.seed)?;
    report.write_csv(&c.out.join("noise_report.csv"))?;
    for (d, s) in report.per_dim.iter().enumerate() {
        println!("dim {d}: recovered std {s:.6}");
    }
    println!(
        "recovered noise {:.6} (true {}, {} samples x {} reps)",
        report.overall, test.spec.noise_scale, report.samples, report.reps
    );
    Ok(())
}

fn cmd_ensemble(a: ReportArgs) -> Result<()> {
    let c = resolve_report(&a)?;
    let members = a.reps.unwrap_or(c.preset.reports.ensemble_members);
    let study = ensemble_study(&c.model, &c.preset, members, c.seed)?;
    study.covariance.write_csvs(&c.out)?;
    study.model.write_band_csv(&c.out.join("band.csv"))?;
    study
        .reference
        .write_band_csv(&c.out.join("band_ref.csv"))?;
    let floor = study.floor();
    println!("members {members}");
    println!(
        "covariance max-abs difference {:.6e}",
        study.covariance.max_abs
    );
    println!("monte carlo floor            {floor:.6e}");
    println!(
        "ratio                        {:.3}",
        study.covariance.max_abs / floor
    );
    println!("mean agreement (3 SE)        {:.3}", study.mean_agreement);
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut p = resolve_preset(&a.preset)?;
    if let Some(e) = a.epochs {
        p.train.epochs = e;
    }
    create_dir(&a.out)?;
    let mut m = RunManifest::start("compare", &p, None, &a.out);
    let data = ensure_data(&p, a.data.as_deref(), &a.out)?;
    let train = load_split(&data, "train")?;
    let test = load_split(&data, "test")?;
    let reps = a.reps.unwrap_or(p.reports.noise_reps);
    let limit = a.limit.or(p.reports.noise_samples);

    let mut matched = p.clone();
    matched.baseline = depth_matched_baseline(&p);
    let runs = [
        ("son", &p, ModelKind::Son),
        ("baseline", &p, ModelKind::Baseline),
        ("baseline_matched", &matched, ModelKind::Baseline),
    ];
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    println!(
        "{:<18} {:>12} {:>12} {:>10} {:>10}",
        "model", "train_mse", "test_mse", "noise", "seconds"
    );
    for (name, preset, kind) in runs {
        let t = train_model(preset, kind, &train, &a.out.join(name))?;
        let test_mse = eval_mse(&t.model, &test, p.train.seed)?;
        let noise = noise_recovery(&t.model, &test, reps, limit, p.train.seed)?.overall;
        println!(
            "{name:<18} {:>12.4e} {test_mse:>12.4e} {noise:>10.4e} {:>10.2}",
            t.train_mse, t.seconds
        );
        rows.push(vec![
            name.to_string(),
            format!("{:.16e}", t.train_mse),
            format!("{test_mse:.16e}"),
            format!("{noise:.16e}"),
            format!("{:.6}", t.seconds),
        ]);
        m.artifacts.insert(name.into(), a.out.join(name));
        seconds.push(t.seconds);
    }
    println!(
        "time ratio son / matched baseline {:.3}",
        seconds[0] / seconds[2]
    );
    println!(
        "time ratio son / paper baseline   {:.3}",
        seconds[0] / seconds[1]
    );
    let path = a.out.join("compare.csv");
    write_rows(
        &path,
        &["model", "train_mse", "test_mse", "noise", "train_seconds"],
        &rows,
    )?;
    m.artifacts.insert("compare".into(), path);
    m.data = Some(data);
    m.finish(&a.out)
}
