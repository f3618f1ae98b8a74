//! `pbt`: run, resume and analyze population based training runs.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run or analysis fails at runtime. Log verbosity comes from `PBT_LOG`.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pbt::analysis::{
    self, best_checkpoint, extract_schedule, lowess, metric_correlation, metric_names,
    population_series, schedule_rows, series_rows, tail_average, Format, Row, Window,
};
use pbt::config::{load_run_dir, write_run_files, ConfigFile, Resolved, CONFIG_FILE};
use pbt::orchestrator::{resume_in_dir, run_in_dir, Mode, RunSummary, LOG_FILE};
use pbt::{with_task, CheckpointId, HyperparamVector, PopulationLog};

#[derive(Debug, Parser)]
#[command(
    name = "pbt",
    version,
    about = "Population based training with initiator-based evolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start a run from a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run with mutation disabled and a fixed hyperparameter vector.
    Baseline {
        config: PathBuf,
        /// `init`, `file:<path.json>` or `tail-average-of:<run dir>`.
        #[arg(long, default_value = "init")]
        source: Source,
        /// Schedule entries averaged by `tail-average-of`.
        #[arg(long, default_value_t = 10)]
        tail: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Continue an interrupted or finished run.
    Resume {
        run_dir: PathBuf,
        #[arg(long)]
        max_generations: Option<u32>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Export plot-ready data from a run directory.
    Analyze {
        run_dir: PathBuf,
        #[command(subcommand)]
        what: Analysis,
        /// Output file; stdout when absent.
        #[arg(long, global = true)]
        out: Option<PathBuf>,
        /// Defaults to the extension of `--out`, else csv.
        #[arg(long, global = true)]
        format: Option<FormatArg>,
    },
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_generations: Option<u32>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Async,
    Deterministic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Analysis {
    /// Hyperparameters along the lineage of the best (or a given) checkpoint.
    Schedule {
        #[arg(long)]
        checkpoint: Option<u64>,
        #[arg(long, default_value = "loss")]
        metric: String,
    },
    /// Every evaluated checkpoint's value of one parameter.
    Series { param: String },
    /// Lowess trend of one parameter over generations.
    Lowess {
        param: String,
        #[arg(long, default_value_t = 0.3)]
        frac: f64,
    },
    /// Pearson correlation between two metrics.
    Correlate { metric_a: String, metric_b: String },
}

#[derive(Debug, Clone)]
enum Source {
    Init,
    File(PathBuf),
    TailAverageOf(PathBuf),
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "init" {
            Ok(Source::Init)
        } else if let Some(p) = s.strip_prefix("file:") {
            Ok(Source::File(p.into()))
        } else if let Some(p) = s.strip_prefix("tail-average-of:") {
            Ok(Source::TailAverageOf(p.into()))
        } else {
            Err(format!(
                "expected init, file:<path> or tail-average-of:<run dir>, got `{s}`"
            ))
        }
    }
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<pbt::Error> for Failure {
    fn from(e: pbt::Error) -> Self {
        use pbt::Error::*;
        match e {
            Config(_)
            | InvalidSpec { .. }
            | VectorMismatch(_)
            | OutOfRange { .. }
            | NegativeCount(_)
            | UnknownParameter { .. } => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PBT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run { config, overrides } => cmd_run(&config, &overrides, None),
        Command::Baseline {
            config,
            source,
            tail,
            overrides,
        } => cmd_baseline(&config, &source, tail, &overrides),
        Command::Resume {
            run_dir,
            max_generations,
            workers,
        } => cmd_resume(&run_dir, max_generations, workers),
        Command::Analyze {
            run_dir,
            what,
            out,
            format,
        } => cmd_analyze(&run_dir, &what, out.as_deref(), format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<(ConfigFile, String), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut file =
        ConfigFile::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = overrides.seed {
        file.seed = seed;
    }
    if let Some(w) = overrides.workers {
        file.workers = w;
    }
    if let Some(g) = overrides.max_generations {
        file.max_generations = g;
    }
    if let Some(m) = overrides.mode {
        file.mode = match m {
            ModeArg::Async => Mode::Async,
            ModeArg::Deterministic => Mode::Deterministic,
        };
    }
    if let Some(dir) = &overrides.output_dir {
        file.output_dir = Some(dir.clone());
    }
    Ok((file, text))
}

fn default_output_dir(config: &Path, suffix: &str) -> PathBuf {
    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(format!("{stem}{suffix}"))
}

fn print_summary(dir: &Path, summary: &RunSummary) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "run directory: {}", dir.display());
    let _ = writeln!(
        out,
        "generations completed: {}",
        summary
            .generations_completed
            .map_or("none".to_string(), |g| g.to_string())
    );
    let _ = writeln!(out, "checkpoints: {}", summary.total_checkpoints);
    for (metric, best) in &summary.best {
        let _ = writeln!(
            out,
            "best {metric}: {} (checkpoint {}, generation {})",
            best.value, best.checkpoint_id, best.generation
        );
    }
    let _ = writeln!(out, "wall time: {:.3}s", summary.wall_time_secs);
}

/// Resolves `file`, sets up its run directory and runs it.
fn launch(mut file: ConfigFile, text: &str, default_dir: PathBuf) -> CmdResult {
    let dir = file.output_dir.clone().unwrap_or(default_dir);
    file.output_dir = Some(dir.clone());
    let resolved: Resolved = file.resolve_with_source(text)?;
    if dir.join(LOG_FILE).exists() {
        return Err(usage(format!(
            "{} already holds a run; use `pbt resume`",
            dir.display()
        )));
    }
    write_run_files(&dir, &resolved).map_err(runtime)?;
    let outcome = with_task!(&resolved.task, |t| run_in_dir(&resolved.run, t, &dir))?;
    print_summary(&dir, &outcome.summary);
    Ok(())
}

fn cmd_run(config: &Path, overrides: &Overrides, fixed: Option<HyperparamVector>) -> CmdResult {
    let (mut file, text) = load_config(config, overrides)?;
    let suffix = if fixed.is_some() { "-baseline" } else { "" };
    if fixed.is_some() {
        file.fixed_hparams = fixed;
    }
    launch(file, &text, default_output_dir(config, suffix))
}

/// Replays the log of a run directory without touching it.
fn open_run(dir: &Path) -> Result<(Resolved, PopulationLog), Failure> {
    if !dir.join(CONFIG_FILE).exists() || !dir.join(LOG_FILE).exists() {
        return Err(usage(format!("{} is not a run directory", dir.display())));
    }
    let resolved = load_run_dir(dir)?;
    let file = File::open(dir.join(LOG_FILE)).map_err(runtime)?;
    let replay = PopulationLog::replay(BufReader::new(file))?;
    Ok((resolved, replay.log))
}

/// Best checkpoint by `metric` at the generation the run's summary uses.
fn final_best<'a>(
    resolved: &Resolved,
    log: &'a PopulationLog,
    metric: &str,
) -> Result<&'a pbt::CheckpointRecord, Failure> {
    let g = log
        .last_completed_generation(resolved.run.selection.min_completed)
        .ok_or_else(|| runtime(anyhow!("run has no completed generation yet")))?
        .min(resolved.run.max_generations);
    Ok(best_checkpoint(log, metric, Window::Generations(g, g))?)
}

fn cmd_baseline(config: &Path, source: &Source, tail: usize, overrides: &Overrides) -> CmdResult {
    let fixed = match source {
        Source::Init => {
            let (file, text) = load_config(config, overrides)?;
            file.resolve_with_source(&text)?
                .run
                .search_space
                .init_vector()
        }
        Source::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| {
                usage(format!(
                    "{}: expected a JSON object of values: {e}",
                    path.display()
                ))
            })?
        }
        Source::TailAverageOf(run) => {
            let (resolved, log) = open_run(run)?;
            let best = final_best(&resolved, &log, "loss")?;
            let schedule = extract_schedule(&log, best.id)?;
            let v = tail_average(&schedule, tail)?;
            log::info!(
                "tail average of checkpoint {} over {tail} entries: {v}",
                best.id
            );
            v
        }
    };
    cmd_run(config, overrides, Some(fixed))
}

fn cmd_resume(dir: &Path, max_generations: Option<u32>, workers: Option<usize>) -> CmdResult {
    if !dir.join(CONFIG_FILE).exists() || !dir.join(LOG_FILE).exists() {
        return Err(usage(format!("{} is not a run directory", dir.display())));
    }
    let mut resolved = load_run_dir(dir)?;
    let mut changed = false;
    if let Some(g) = max_generations {
        resolved.file.max_generations = g;
        resolved.run.max_generations = g;
        changed = true;
    }
    if let Some(w) = workers {
        resolved.file.workers = w;
        resolved.run.workers = w;
        changed = true;
    }
    with_task!(&resolved.task, |t| resolved.run.validate_for(t))?;
    if changed {
        fs::write(dir.join(CONFIG_FILE), resolved.file.to_toml()?).map_err(runtime)?;
    }
    let outcome = with_task!(&resolved.task, |t| resume_in_dir(&resolved.run, t, dir))?;
    print_summary(dir, &outcome.summary);
    Ok(())
}

fn output_format(out: Option<&Path>, format: Option<FormatArg>) -> Format {
    match format {
        Some(FormatArg::Csv) => Format::Csv,
        Some(FormatArg::Json) => Format::Json,
        None => match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some(ext) => Format::from_str(ext).unwrap_or_default(),
            None => Format::Csv,
        },
    }
}

fn emit_rows(rows: &[Row], out: Option<&Path>, format: Format) -> CmdResult {
    match out {
        Some(path) => analysis::export(path, rows, format)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime),
        None => analysis::write_rows(io::stdout().lock(), rows, format).map_err(|e| runtime(e)),
    }
}

fn cmd_analyze(
    dir: &Path,
    what: &Analysis,
    out: Option<&Path>,
    format: Option<FormatArg>,
) -> CmdResult {
    let format = output_format(out, format);
    let (resolved, log) = open_run(dir)?;
    let space = &resolved.run.search_space;
    match what {
        Analysis::Schedule { checkpoint, metric } => {
            let id = match checkpoint {
                Some(id) => CheckpointId(*id),
                None => {
                    require_metric(&log, metric)?;
                    final_best(&resolved, &log, metric)?.id
                }
            };
            if log.get(id).is_err() {
                return Err(usage(format!(
                    "unknown checkpoint {id} (log has {})",
                    log.len()
                )));
            }
            let schedule = extract_schedule(&log, id)?;
            emit_rows(&schedule_rows(&schedule), out, format)
        }
        Analysis::Series { param } => {
            let series = population_series(&log, param, space)?;
            emit_rows(&series_rows(param, &series), out, format)
        }
        Analysis::Lowess { param, frac } => {
            let series = population_series(&log, param, space)?;
            let points: Vec<(f64, f64)> = series
                .iter()
                .map(|p| (f64::from(p.generation), p.value))
                .collect();
            let smoothed = lowess(&points, *frac)?;
            let rows: Vec<Row> = series
                .iter()
                .zip(smoothed)
                .map(|(p, (_, y))| Row {
                    generation: p.generation,
                    checkpoint_id: p.checkpoint_id,
                    parameter: format!("{param}_lowess"),
                    value: y,
                })
                .collect();
            emit_rows(&rows, out, format)
        }
        Analysis::Correlate { metric_a, metric_b } => {
            require_metric(&log, metric_a)?;
            require_metric(&log, metric_b)?;
            let r = metric_correlation(&log, metric_a, metric_b)?;
            let n = log
                .evaluated()
                .filter(|c| {
                    [metric_a, metric_b]
                        .iter()
                        .all(|m| c.metric(m).is_some_and(f64::is_finite))
                })
                .count();
            let doc = serde_json::json!({
                "metric_a": metric_a,
                "metric_b": metric_b,
                "n": n,
                "r": r,
            });
            match out {
                Some(path) => fs::write(path, serde_json::to_vec_pretty(&doc).map_err(runtime)?)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(runtime)?,
                None => println!("{}", serde_json::to_string_pretty(&doc).map_err(runtime)?),
            }
            Ok(())
        }
    }
}

fn require_metric(log: &PopulationLog, metric: &str) -> CmdResult {
    let names = metric_names(log);
    if names.iter().any(|n| n == metric) {
        Ok(())
    } else {
        Err(usage(format!(
            "unknown metric `{metric}` (valid: {})",
            names.join(", ")
        )))
    }
}
