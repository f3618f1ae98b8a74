//! Declarative run configuration.
//!
//! A run is described by one TOML file. Task options are overlaid on the
//! bundled defaults, the search space is a named profile or an explicit
//! list, and the fully resolved form is what gets echoed into a run
//! directory, so every run directory can be rerun on its own.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hparam::{HyperparamSpec, HyperparamVector, SearchSpace};
use crate::orchestrator::{Mode, RunConfig};
use crate::population::SelectionConfig;
use crate::tasks::{
    QuadraticOptions, QuadraticTask, RegressionOptions, RegressionTask, SpecToyOptions,
    SpecToyTask, Trainable,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.json";

pub const TASK_NAMES: [&str; 3] = ["quadratic", "regression", "spectoy"];
pub const PROFILES: [&str; 3] = ["task", "table2", "table2_augmentation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub name: String,
    /// Overrides of the task's default options.
    #[serde(flatten)]
    pub options: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SearchSpaceSource {
    Profile(String),
    Specs(Vec<HyperparamSpec>),
}

impl Default for SearchSpaceSource {
    fn default() -> Self {
        SearchSpaceSource::Profile("task".into())
    }
}

fn default_population() -> usize {
    8
}
fn default_workers() -> usize {
    8
}
fn default_updates() -> usize {
    2200
}
fn default_generations() -> u32 {
    160
}
fn default_handicap() -> f64 {
    SelectionConfig::default().handicap
}
fn default_mutation_probability() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_updates")]
    pub updates_per_step: usize,
    #[serde(default = "default_generations")]
    pub max_generations: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_handicap")]
    pub handicap: f64,
    #[serde(default = "default_mutation_probability")]
    pub mutation_probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_time_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_hparams: Option<HyperparamVector>,
    pub task: TaskSection,
    #[serde(default)]
    pub search_space: SearchSpaceSource,
}

/// A constructed task of any built-in kind.
#[derive(Debug, Clone)]
pub enum AnyTask {
    Quadratic(QuadraticTask),
    Regression(RegressionTask),
    SpecToy(SpecToyTask),
}

/// Runs `$body` with `$t` bound to the concrete task inside an [`AnyTask`].
#[macro_export]
macro_rules! with_task {
    ($task:expr, |$t:ident| $body:expr) => {
        match $task {
            $crate::config::AnyTask::Quadratic($t) => $body,
            $crate::config::AnyTask::Regression($t) => $body,
            $crate::config::AnyTask::SpecToy($t) => $body,
        }
    };
}

impl AnyTask {
    pub fn name(&self) -> &'static str {
        with_task!(self, |t| t.name())
    }

    pub fn search_space(&self) -> SearchSpace {
        with_task!(self, |t| t.search_space())
    }

    pub fn dataset(&self) -> Option<serde_json::Value> {
        with_task!(self, |t| t.dataset())
    }
}

/// 1-based line of the first `key = ...` assignment in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn anchored(text: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    match line_of(text, key) {
        Some(line) => Error::Config(format!("line {line}: {msg}")),
        None => Error::Config(msg.to_string()),
    }
}

fn merge_options<T: Serialize + for<'de> Deserialize<'de>>(
    defaults: &T,
    overrides: &toml::Table,
) -> Result<T> {
    let mut table = toml::Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

impl TaskSection {
    /// Builds the task with its options overlaid on the bundled defaults.
    /// Synthetic datasets are drawn from `seed`.
    pub fn build(&self, seed: u64) -> Result<AnyTask> {
        let context = |e: Error| Error::Config(format!("[task] {}: {e}", self.name));
        match self.name.as_str() {
            "quadratic" => Ok(AnyTask::Quadratic(QuadraticTask::new(
                merge_options(&QuadraticOptions::default(), &self.options).map_err(context)?,
            ))),
            "regression" => {
                let o =
                    merge_options(&RegressionOptions::default(), &self.options).map_err(context)?;
                Ok(AnyTask::Regression(
                    RegressionTask::new(o, seed).map_err(context)?,
                ))
            }
            "spectoy" => {
                let o =
                    merge_options(&SpecToyOptions::default(), &self.options).map_err(context)?;
                Ok(AnyTask::SpecToy(
                    SpecToyTask::new(o, seed).map_err(context)?,
                ))
            }
            other => Err(Error::Config(format!(
                "unknown task `{other}` (valid: {})",
                TASK_NAMES.join(", ")
            ))),
        }
    }

    /// The same section with every option spelled out.
    fn resolved(&self, task: &AnyTask) -> Result<TaskSection> {
        let table = match task {
            AnyTask::Quadratic(t) => toml::Table::try_from(&t.options),
            AnyTask::Regression(t) => toml::Table::try_from(&t.options),
            AnyTask::SpecToy(t) => toml::Table::try_from(&t.options),
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(TaskSection {
            name: self.name.clone(),
            options: table,
        })
    }
}

impl SearchSpaceSource {
    pub fn resolve(&self, task: &AnyTask) -> Result<SearchSpace> {
        match self {
            SearchSpaceSource::Profile(p) => match p.as_str() {
                "task" => Ok(task.search_space()),
                "table2" => Ok(SearchSpace::table2()),
                "table2_augmentation" => Ok(SearchSpace::table2_augmentation()),
                other => Err(Error::Config(format!(
                    "unknown search space profile `{other}` (valid: {})",
                    PROFILES.join(", ")
                ))),
            },
            SearchSpaceSource::Specs(specs) => SearchSpace::new(specs.clone()),
        }
    }
}

/// A validated config together with what it builds.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Fully spelled-out form, suitable for echoing.
    pub file: ConfigFile,
    pub task: AnyTask,
    pub run: RunConfig,
}

impl ConfigFile {
    /// Parses TOML text. Errors name the offending line where possible.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match e.span().map(|s| text[..s.start].matches('\n').count() + 1) {
                Some(line) => Error::Config(format!("line {line}: {msg}")),
                None => Error::Config(msg),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Builds the task and the run configuration and validates both. `text`
    /// is the source the config was parsed from, used to anchor messages.
    pub fn resolve_with_source(&self, text: &str) -> Result<Resolved> {
        let task = self
            .task
            .build(self.seed)
            .map_err(|e| anchored(text, "name", e))?;
        let search_space = self
            .search_space
            .resolve(&task)
            .map_err(|e| anchored(text, "search_space", e))?;
        let run = RunConfig {
            population_size: self.population_size,
            updates_per_step: self.updates_per_step,
            max_generations: self.max_generations,
            workers: self.workers,
            seed: self.seed,
            search_space: search_space.clone(),
            mutation_probability: self.mutation_probability,
            selection: SelectionConfig {
                handicap: self.handicap,
                ..SelectionConfig::default()
            },
            mode: self.mode,
            fixed_hparams: self.fixed_hparams.clone(),
            max_wall_time: match self.max_wall_time_secs {
                Some(s) if s.is_finite() && s > 0.0 => Some(Duration::from_secs_f64(s)),
                Some(s) => {
                    return Err(anchored(
                        text,
                        "max_wall_time_secs",
                        format!("max_wall_time_secs must be positive, got {s}"),
                    ))
                }
                None => None,
            },
        };
        with_task!(&task, |t| run.validate_for(t)).map_err(|e| {
            let msg = e.to_string();
            let key = [
                "population_size",
                "workers",
                "updates_per_step",
                "mutation_probability",
                "handicap",
                "fixed_hparams",
            ]
            .into_iter()
            .find(|k| msg.contains(k) || (*k == "fixed_hparams" && self.fixed_hparams.is_some()))
            .unwrap_or("search_space");
            anchored(text, key, msg)
        })?;
        let file = ConfigFile {
            task: self.task.resolved(&task)?,
            search_space: SearchSpaceSource::Specs(search_space.specs().to_vec()),
            ..self.clone()
        };
        Ok(Resolved { file, task, run })
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.resolve_with_source("")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses and resolves in one go.
pub fn load_resolved(path: &Path) -> Result<Resolved> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ConfigFile::parse(&text)
        .and_then(|c| c.resolve_with_source(&text))
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
}

/// Writes the resolved config and the task's dataset, if it has one.
pub fn write_run_files(dir: &Path, resolved: &Resolved) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), resolved.file.to_toml()?)?;
    if let Some(data) = resolved.task.dataset() {
        fs::write(dir.join(DATASET_FILE), serde_json::to_vec(&data)?)?;
    }
    Ok(())
}

/// Reads the config echoed into a run directory.
pub fn load_run_dir(dir: &Path) -> Result<Resolved> {
    load_resolved(&dir.join(CONFIG_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
population_size = 4
workers = 2
updates_per_step = 10
max_generations = 5
mode = "deterministic"

[task]
name = "quadratic"
eta = 0.02
"#;

    #[test]
    fn minimal_config_resolves() {
        let r = ConfigFile::parse(MINIMAL).unwrap().resolve().unwrap();
        assert_eq!(r.run.population_size, 4);
        assert_eq!(r.run.mode, Mode::Deterministic);
        assert_eq!(
            r.run.search_space.names().collect::<Vec<_>>(),
            vec!["h1", "h2"]
        );
        let AnyTask::Quadratic(q) = &r.task else {
            panic!()
        };
        assert_eq!(q.options.eta, 0.02);
        assert_eq!(q.options.theta0, [0.9, 0.9]);
    }

    #[test]
    fn echo_round_trips() {
        let r = ConfigFile::parse(MINIMAL).unwrap().resolve().unwrap();
        let text = r.file.to_toml().unwrap();
        let again = ConfigFile::parse(&text).unwrap().resolve().unwrap();
        assert_eq!(again.file, r.file);
        assert_eq!(again.run, r.run);
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        let expected = text.lines().position(|l| l == "[extra]").unwrap() + 1;
        let err = ConfigFile::parse(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {expected}:")), "{err}");
        let text = MINIMAL.replace("eta = 0.02", "eta = 0.02\nbogus = 1");
        let err = ConfigFile::parse(&text)
            .unwrap()
            .resolve_with_source(&text)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_anchor_to_their_line() {
        let text = MINIMAL.replace("population_size = 4", "population_size = 1");
        let err = ConfigFile::parse(&text)
            .unwrap()
            .resolve_with_source(&text)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("line 3") && err.contains("population_size"),
            "{err}"
        );
        let text = MINIMAL.replace("\"quadratic\"", "\"cubic\"");
        let err = ConfigFile::parse(&text)
            .unwrap()
            .resolve_with_source(&text)
            .unwrap_err();
        assert!(err.to_string().contains("line 10"), "{err}");
    }

    #[test]
    fn profiles_and_explicit_specs() {
        let text = format!("{MINIMAL}\nsearch_space = \"table2\"\n")
            .replace("[task]\nname = \"quadratic\"\neta = 0.02\n", "");
        let text = format!("{text}\n[task]\nname = \"spectoy\"\n");
        let r = ConfigFile::parse(&text).unwrap().resolve().unwrap();
        assert_eq!(r.run.search_space.len(), 10);

        let text = MINIMAL.replace(
            "[task]",
            "[[search_space]]\nname = \"h1\"\ninit = 0.5\nmin = 0.0\nmax = 1.0\ndeltas = [0.1]\nfractional_count = false\n\n[[search_space]]\nname = \"h2\"\ninit = 0.5\nmin = 0.0\nmax = 1.0\ndeltas = [0.2]\nfractional_count = false\n\n[task]",
        );
        let r = ConfigFile::parse(&text).unwrap().resolve().unwrap();
        assert_eq!(r.run.search_space.get("h2").unwrap().deltas, vec![0.2]);

        // The quadratic task needs h1 and h2.
        let text = format!("search_space = \"table2\"\n{MINIMAL}");
        assert!(ConfigFile::parse(&text).unwrap().resolve().is_err());
        let text = format!("search_space = \"nope\"\n{MINIMAL}");
        let err = ConfigFile::parse(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("table2"), "{err}");
    }

    #[test]
    fn run_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("\"quadratic\"\neta = 0.02", "\"regression\"");
        let r = ConfigFile::parse(&text).unwrap().resolve().unwrap();
        write_run_files(dir.path(), &r).unwrap();
        assert!(dir.path().join(DATASET_FILE).exists());
        let back = load_run_dir(dir.path()).unwrap();
        assert_eq!(back.run, r.run);
    }
}
