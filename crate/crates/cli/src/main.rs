use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wsdl::backbone::Checkpoint;
use wsdl::config::RunConfig;
use wsdl::eval::{self, BenchMode, BENCH_REPEATS};
use wsdl::pipeline::{self, worker_threads, EpochLog, TrainedModel, CONFIG_FILE, DLN_FILE, MAEN_FILE};
use wsdl::synthdata::{generate_dataset, DatasetDir, Split};

/// Exit status for usage errors.
const EXIT_USAGE: u8 = 1;
/// Exit status for runtime failures.
const EXIT_FAILURE: u8 = 2;

pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PCL_FILE: &str = "pcl.csv";

#[derive(Parser)]
#[command(
    name = "wsdl",
    version,
    about = "Weakly supervised discriminative localization on synthetic fine-grained data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train/ and test/ splits).
    GenData(GenArgs),
    /// Train some or all of the three stages.
    Train(TrainArgs),
    /// Predict classes and boxes for every image of a split.
    Infer(InferArgs),
    /// Score a trained model on the test split.
    Eval(EvalArgs),
    /// Time shared against separate multi-level inference.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Maen,
    Rpn,
    Heads,
    All,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing train/.
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    /// Stage to train; later stages read earlier checkpoints from --model.
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Model directory holding earlier-stage checkpoints (defaults to --out).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated attention levels (mid, late, cam).
    #[arg(long)]
    levels: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained model directory.
    #[arg(long)]
    model: PathBuf,
    /// Output JSON file (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split to run on.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory containing test/.
    #[arg(long)]
    data: PathBuf,
    /// Trained model directory.
    #[arg(long)]
    model: PathBuf,
    /// Directory for report.json, confusion.csv and pcl.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Shared,
    Separate,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset directory containing test/.
    #[arg(long)]
    data: PathBuf,
    /// Trained model directory.
    #[arg(long)]
    model: PathBuf,
    /// Pathway mode to time.
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Comma-separated subset of the model's levels.
    #[arg(long)]
    levels: Option<String>,
    /// Output JSON file (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => evaluate(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

/// Base config, then the config file, then flags.
fn effective_config(base: RunConfig, args: &ConfigArgs, levels: Option<&str>) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(levels) = levels {
        cfg.set("levels", levels)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.write_all(b"\n")?;
            Ok(())
        }
    }
}

fn gen_data(a: GenArgs) -> Result<()> {
    let cfg = effective_config(RunConfig::default(), &a.cfg, None)?;
    generate_dataset(&cfg.gen, &a.out)?;
    write_file(&a.out.join(CONFIG_FILE), cfg.to_text())?;
    eprintln!(
        "wrote {} train and {} test images to {}",
        cfg.gen.train_count,
        cfg.gen.test_count,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let model_dir = a.model.clone().unwrap_or_else(|| a.out.clone());
    // Later stages continue from the config the earlier ones were trained with.
    let recorded = model_dir.join(CONFIG_FILE);
    let base = if a.stage != StageArg::All && a.stage != StageArg::Maen && recorded.exists() {
        RunConfig::load(&recorded)?
    } else {
        RunConfig::default()
    };
    let cfg = effective_config(base, &a.cfg, a.levels.as_deref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join(CONFIG_FILE), cfg.to_text())?;

    let view = DatasetDir::split(&a.data, Split::Train).load_training_view()?;
    let mut logs: Vec<(String, Vec<String>)> = Vec::new();
    let mut log = |e: &EpochLog| {
        eprintln!("{e}");
        let tag = e.stage.tag().to_string();
        match logs.last_mut() {
            Some((t, lines)) if *t == tag => lines.push(e.to_string()),
            _ => logs.push((tag, vec![e.to_string()])),
        }
    };
    let load = |file: &str| -> Result<Checkpoint> {
        let path = model_dir.join(file);
        Checkpoint::load(&path).with_context(|| format!("loading earlier stage from {}", path.display()))
    };
    match a.stage {
        StageArg::All => {
            let model = pipeline::train_stagewise(&view, &cfg, &mut log)?;
            model.save(&a.out)?;
        }
        StageArg::Maen => {
            let maen = pipeline::train_maen(&view, &cfg, &mut log)?;
            maen.save(&a.out.join(MAEN_FILE))?;
        }
        StageArg::Rpn => {
            let maen = load(MAEN_FILE)?;
            let pseudo = pipeline::training_pseudo_boxes(&view, &maen, &cfg)?;
            let dln = pipeline::train_rpn(&view, &maen, &pseudo, &cfg, &mut log)?;
            dln.save(&a.out.join(DLN_FILE))?;
            if model_dir != a.out {
                maen.save(&a.out.join(MAEN_FILE))?;
            }
        }
        StageArg::Heads => {
            let maen = load(MAEN_FILE)?;
            let dln = load(DLN_FILE)?;
            let pseudo = pipeline::training_pseudo_boxes(&view, &maen, &cfg)?;
            let heads = pipeline::train_heads(&view, &dln, &pseudo, &cfg, &mut log)?;
            let model = TrainedModel {
                config: cfg.clone(),
                maen,
                dln,
                heads,
            };
            model.check_compatible()?;
            model.save(&a.out)?;
        }
    }
    for (tag, lines) in &logs {
        write_file(&a.out.join(format!("{tag}.log")), lines.join("\n") + "\n")?;
    }
    Ok(())
}

fn load_model(dir: &Path) -> Result<TrainedModel> {
    TrainedModel::load(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let split = DatasetDir::split(&a.data, a.split.into());
    let view = split.load_training_view()?;
    let images: Vec<_> = view.samples.iter().map(|s| s.image.clone()).collect();
    let preds = model.dln().infer_batch(&images, worker_threads())?;
    let rows: Vec<serde_json::Value> = view
        .samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            serde_json::json!({
                "name": s.name,
                "class": p.class,
                "fused": p.fused,
                "levels": p.levels,
            })
        })
        .collect();
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&rows)?)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let split = DatasetDir::split(&a.data, Split::Test);
    let view = split.load_training_view()?;
    let annotations = split.load_annotations()?;
    let report = eval::evaluate(&model, &view.samples, &annotations, worker_threads())?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &a.out {
        write_file(&dir.join(REPORT_FILE), &json)?;
        write_file(&dir.join(CONFUSION_FILE), eval::confusion_csv(&report.confusion))?;
        write_file(&dir.join(PCL_FILE), eval::pcl_csv(&report))?;
    }
    println!("{json}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut dln = model.dln();
    if let Some(levels) = &a.levels {
        let levels: Vec<String> = levels.split(',').map(|s| s.trim().to_string()).collect();
        dln = dln.with_levels(&levels)?;
    }
    let view = DatasetDir::split(&a.data, Split::Test).load_training_view()?;
    let images: Vec<_> = view.samples.iter().map(|s| s.image.clone()).collect();
    let modes = match a.mode {
        ModeArg::Shared => vec![BenchMode::Shared],
        ModeArg::Separate => vec![BenchMode::Separate],
        ModeArg::Both => vec![BenchMode::Shared, BenchMode::Separate],
    };
    let mut results = Vec::new();
    for mode in modes {
        let r = eval::bench(&dln, &images, mode, BENCH_REPEATS)?;
        eprintln!(
            "{mode}: {:.2} images/s (median of {} repeats)",
            r.images_per_second,
            r.seconds.len()
        );
        results.push(r);
    }
    let ratio = match results.as_slice() {
        [s, p] => Some(s.images_per_second / p.images_per_second),
        _ => None,
    };
    if let Some(r) = ratio {
        eprintln!("shared/separate throughput ratio {r:.3}");
    }
    if results.is_empty() {
        bail!("no bench mode selected");
    }
    let doc = serde_json::json!({ "results": results, "ratio": ratio });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&doc)?)
}
