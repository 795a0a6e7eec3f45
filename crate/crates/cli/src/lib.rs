//! Subcommands of the `hamf` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hamf_core::ablation::{run_suite, AblationConfig, Suite};
use hamf_core::checkpoint::{load_checkpoint, save_trainer};
use hamf_core::config::RunConfig;
use hamf_core::dataset::{load_dataset, scene_inputs, write_dataset, SplitConfig};
use hamf_core::features::scene_input;
use hamf_core::metrics::{evaluate_predictions, write_metrics_csv, MetricReport};
use hamf_core::render::write_svg;
use hamf_core::scene::{
    audit_scenario, constant_velocity_baseline, denormalize_predictions, load_predictions, load_scenario,
    save_predictions, PredictionSet, Scenario, Template,
};
use hamf_core::training::{predict_all, Trainer};
use hamf_core::{CoreError, Hamf32};
use thiserror::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0} scenario(s) failed the audit")]
    AuditFailed(usize),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "hamf", version, about = "Multi-modal motion forecasting on vectorized scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario dataset.
    Generate(GenerateArgs),
    /// Check every scenario of a dataset against the generator invariants.
    Audit(AuditArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Score a checkpoint (or a baseline) on a dataset.
    Eval(EvalArgs),
    /// Predict one scenario; trajectories are written in its original frame.
    Predict(PredictArgs),
    /// Train and score every variant of an ablation suite.
    Ablate(AblateArgs),
    /// Draw a scenario with predictions as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Comma-separated template names; all templates by default.
    #[arg(long, value_delimiter = ',')]
    pub templates: Vec<Template>,
    #[arg(long, default_value_t = 4)]
    pub agents: usize,
    #[arg(long, default_value_t = 8)]
    pub polylines: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the scenarios of an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Scenario file or dataset directory.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Constant velocity from the last two observed steps.
    Cv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Scenario file or dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub suite: Suite,
    /// Number of seeds (0..N).
    #[arg(long)]
    pub seeds: Option<u64>,
    /// TOML file with `seeds`, `model`, `train` and `split` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Audit(a) => audit(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Predict(a) => predict(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Render(a) => render(&a),
    }
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = SplitConfig { seed: a.seed, agents: a.agents, polylines: a.polylines, ..SplitConfig::default() };
    if !a.templates.is_empty() {
        cfg.templates = a.templates.clone();
    }
    let manifest = write_dataset(&a.out, &cfg, a.count, a.force)?;
    println!("wrote {} scenarios to {}", manifest.ids.len(), a.out.display());
    Ok(())
}

pub fn audit(a: &AuditArgs) -> Result<()> {
    let scenes = load_dataset(&a.data)?;
    let mut failed = 0;
    for s in &scenes {
        let report = audit_scenario(s);
        if !report.passed() {
            failed += 1;
            println!("{}: {}", report.scenario_id, report.violations.join("; "));
        }
    }
    println!("{} scenarios audited, {failed} failed", scenes.len());
    if failed > 0 {
        return Err(CliError::AuditFailed(failed));
    }
    Ok(())
}

fn print_report(label: &str, r: &MetricReport) {
    println!(
        "{label}: minADE6 {:.4} minFDE6 {:.4} MR6 {:.4} minADE1 {:.4} minFDE1 {:.4} b-minFDE6 {:.4} (n={}, excluded {})",
        r.min_ade6, r.min_fde6, r.miss_rate6, r.min_ade1, r.min_fde1, r.brier_min_fde6, r.n_scenarios, r.n_excluded
    );
}

/// Loads the config and applies command-line overrides.
pub fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_run_config(a)?;
    let out = cfg.out.clone().ok_or_else(|| CliError::Usage("no output directory (set `out` or pass --out)".into()))?;
    create_dir(&out)?;
    cfg.echo(&out)?;

    let (train, val) = cfg.data.load()?;
    let (train, val) = (scene_inputs(&train)?, scene_inputs(&val)?);
    if train.is_empty() {
        return Err(CliError::Usage("training set is empty".into()));
    }
    let model = Hamf32::new(cfg.model.clone(), cfg.train.seed)?;
    println!("{} parameters, {} train / {} val scenes", model.num_params(), train.len(), val.len());
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.dump_dir = Some(out.clone());

    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let ckpt = out.join(CHECKPOINT_FILE);
    let val_ref = (!val.is_empty()).then_some(val.as_slice());
    let mut log_err = None;
    trainer.fit(&train, val_ref, |record, t| {
        let line = serde_json::to_string(record).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        print!("epoch {} loss {:.4}", record.epoch, record.loss);
        if let Some(v) = &record.val {
            print!(" val minFDE6 {:.4}", v.min_fde6);
        }
        println!();
        save_trainer(&ckpt, t)
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }
    if !val.is_empty() {
        let preds = predict_all(&trainer.model, &val)?;
        let (report, rows) = evaluate_predictions(
            preds.iter().zip(&val).map(|(p, s)| (p, s.target.as_slice(), s.target_valid.as_slice())),
        )?;
        write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
        write_summary(&out.join(SUMMARY_FILE), &report)?;
        print_report("val", &report);
    }
    Ok(())
}

fn write_summary(path: &Path, r: &MetricReport) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(r).expect("report serializes"))
}

fn load_model(ckpt: &Path) -> Result<Hamf32> {
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    Ok(load_checkpoint::<f32>(ckpt)?.model()?)
}

/// Predictions in each scenario's original frame.
fn predictions_for(model: Option<&Hamf32>, scenes: &[Scenario]) -> Result<Vec<PredictionSet>> {
    scenes
        .iter()
        .map(|s| match model {
            Some(m) => {
                let input = scene_input(s)?;
                Ok(denormalize_predictions(&m.predict(&input)?, &input.transform))
            }
            None => Ok(constant_velocity_baseline(s)),
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = match (&a.ckpt, a.baseline) {
        (Some(c), None) => Some(load_model(c)?),
        (None, Some(Baseline::Cv)) => None,
        _ => return Err(CliError::Usage("pass exactly one of --ckpt and --baseline".into())),
    };
    if !a.data.exists() {
        return Err(CliError::Usage(format!("data {} not found", a.data.display())));
    }
    let scenes = load_dataset(&a.data)?;
    let preds = predictions_for(model.as_ref(), &scenes)?;
    let futures: Vec<_> = scenes.iter().map(Scenario::focal_future).collect();
    let (report, rows) =
        evaluate_predictions(preds.iter().zip(&futures).map(|(p, (g, v))| (p, g.as_slice(), v.as_slice())))?;
    create_dir(&a.out)?;
    write_metrics_csv(&a.out.join(METRICS_FILE), &rows)?;
    write_summary(&a.out.join(SUMMARY_FILE), &report)?;
    print_report(if model.is_some() { "model" } else { "cv" }, &report);
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let scenario = load_scenario(&a.scenario)?;
    let preds = predictions_for(Some(&model), std::slice::from_ref(&scenario))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_predictions(&a.out, &preds[0])?;
    println!("wrote {} modes for {}", preds[0].num_modes(), preds[0].scenario_id);
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            toml::from_str::<AblationConfig>(&text).map_err(|e| CoreError::Config(e.to_string()))?
        }
        None => AblationConfig::default(),
    };
    if let Some(n) = a.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    create_dir(&a.out)?;
    write_text(
        &a.out.join(format!("{}_config.toml", a.suite)),
        &toml::to_string(&cfg).expect("ablation config serializes"),
    )?;
    let report = run_suite(a.suite, &cfg, |label, seed, r| {
        eprintln!("{label} seed {seed}: minADE6 {:.4} minFDE6 {:.4} MR6 {:.4}", r.min_ade6, r.min_fde6, r.miss_rate6);
    })?;
    let md = report.to_markdown();
    write_text(&a.out.join(format!("{}.md", a.suite)), &md)?;
    write_text(&a.out.join(format!("{}.csv", a.suite)), &report.to_csv())?;
    write_text(
        &a.out.join(format!("{}.json", a.suite)),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    print!("{md}");
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let preds = load_predictions(&a.predictions)?;
    write_svg(&a.out, &scenario, &preds)?;
    Ok(())
}
