//! The worker loop and the run driver.
//!
//! Every unit of work is a [`Job`]: a pending child record whose parent has
//! already been chosen and whose hyperparameters have already been mutated.
//! Claiming a job happens under the population lock; training and evaluating
//! it do not. Two drivers share this machinery: real threads, and a seeded
//! single-threaded scheduler that replays the same interleaving every time.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::analysis::{best_checkpoint, Window};
use crate::error::{Error, Result};
use crate::hparam::{mutate, HyperparamVector, SearchSpace};
use crate::population::{CheckpointId, PopulationLog, SelectionConfig, SharedPopulation};
use crate::tasks::Trainable;
use crate::PbtRng;

pub const LOG_FILE: &str = "population.log";
pub const STATES_DIR: &str = "states";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOCK_FILE: &str = "run.lock";

const WAIT_SLICE: Duration = Duration::from_millis(20);
const SCHEDULER_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Async,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub population_size: usize,
    pub updates_per_step: usize,
    /// The run stops once this many generations are complete.
    pub max_generations: u32,
    pub workers: usize,
    pub seed: u64,
    pub search_space: SearchSpace,
    pub mutation_probability: f64,
    pub selection: SelectionConfig,
    pub mode: Mode,
    /// Baseline mode: every step trains with exactly this vector.
    pub fixed_hparams: Option<HyperparamVector>,
    pub max_wall_time: Option<Duration>,
}

impl RunConfig {
    /// Population 8 at 2200 updates per step for 160 generations.
    pub fn new(search_space: SearchSpace) -> Self {
        Self {
            population_size: 8,
            updates_per_step: 2200,
            max_generations: 160,
            workers: 8,
            seed: 0,
            search_space,
            mutation_probability: 1.0,
            selection: SelectionConfig::default(),
            mode: Mode::Async,
            fixed_hparams: None,
            max_wall_time: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.population_size < 2 {
            return fail(format!(
                "population_size must be >= 2, got {}",
                self.population_size
            ));
        }
        if self.workers < 1 {
            return fail("workers must be >= 1".into());
        }
        if self.updates_per_step < 1 {
            return fail("updates_per_step must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_probability) {
            return fail(format!(
                "mutation_probability must be in [0, 1], got {}",
                self.mutation_probability
            ));
        }
        let s = &self.selection;
        if !s.handicap.is_finite() {
            return fail(format!("handicap must be finite, got {}", s.handicap));
        }
        if s.rank_window == 0 || s.initiator_window == 0 || s.opponent_window == 0 {
            return fail("selection windows must be >= 1".into());
        }
        if s.min_completed == 0 {
            return fail("min_completed must be >= 1".into());
        }
        self.search_space.validate()?;
        if let Some(h) = &self.fixed_hparams {
            self.search_space.check_vector(h)?;
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the check that the search space
    /// covers every parameter `task` reads.
    pub fn validate_for<T: Trainable>(&self, task: &T) -> Result<()> {
        self.validate()?;
        for name in task.required_params() {
            if self.search_space.get(name).is_none() {
                return Err(Error::Config(format!(
                    "task `{}` needs hyperparameter `{name}`, which the search space lacks",
                    task.name()
                )));
            }
        }
        Ok(())
    }

    fn root_hparams(&self) -> HyperparamVector {
        self.fixed_hparams
            .clone()
            .unwrap_or_else(|| self.search_space.init_vector())
    }
}

/// Where serialized model states live. References are opaque strings
/// recorded in the population log.
#[derive(Debug)]
pub enum StateStore {
    Memory(Mutex<HashMap<String, Vec<u8>>>),
    /// References are paths relative to the run directory.
    Dir(PathBuf),
}

impl StateStore {
    pub fn memory() -> Self {
        StateStore::Memory(Mutex::new(HashMap::new()))
    }

    pub fn dir(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir.join(STATES_DIR))?;
        Ok(StateStore::Dir(run_dir.to_path_buf()))
    }

    pub fn put(&self, id: CheckpointId, bytes: &[u8]) -> Result<String> {
        match self {
            StateStore::Memory(map) => {
                let key = format!("mem:{id}");
                map.lock().insert(key.clone(), bytes.to_vec());
                Ok(key)
            }
            StateStore::Dir(root) => {
                let rel = format!("{STATES_DIR}/{id}.bin");
                let path = root.join(&rel);
                let tmp = path.with_extension("bin.tmp");
                let mut f = File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_data()?;
                fs::rename(&tmp, &path)?;
                Ok(rel)
            }
        }
    }

    pub fn get(&self, state_ref: &str) -> Result<Vec<u8>> {
        match self {
            StateStore::Memory(map) => map
                .lock()
                .get(state_ref)
                .cloned()
                .ok_or_else(|| Error::CorruptLog(format!("missing state blob `{state_ref}`"))),
            StateStore::Dir(root) => Ok(fs::read(root.join(state_ref))?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub checkpoint_id: CheckpointId,
    pub generation: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_checkpoints: usize,
    pub evaluated_checkpoints: usize,
    pub generations_completed: Option<u32>,
    /// Generation the `best` entries were taken from.
    pub final_generation: Option<u32>,
    /// Lowest value per metric at `final_generation`; `loss` is always present
    /// once anything was evaluated.
    pub best: BTreeMap<String, BestEntry>,
    /// Evaluated checkpoints per generation.
    pub per_generation: BTreeMap<u32, usize>,
    pub wall_time_secs: f64,
}

impl RunSummary {
    pub fn from_log(log: &PopulationLog, config: &RunConfig, wall_time: Duration) -> Self {
        let completed = log.last_completed_generation(config.selection.min_completed);
        let final_generation = completed.map(|g| g.min(config.max_generations));
        let mut best = BTreeMap::new();
        if let Some(g) = final_generation {
            let mut metrics: Vec<String> = vec!["loss".into()];
            for r in log.generation(g).filter(|r| r.is_evaluated()) {
                metrics.extend(r.metrics.keys().cloned());
            }
            metrics.sort();
            metrics.dedup();
            for m in metrics {
                if let Ok(r) = best_checkpoint(log, &m, Window::Generations(g, g)) {
                    best.insert(
                        m.clone(),
                        BestEntry {
                            checkpoint_id: r.id,
                            generation: r.generation,
                            value: r.metric(&m).unwrap_or(f64::INFINITY),
                        },
                    );
                }
            }
        }
        let mut per_generation = BTreeMap::new();
        for r in log.evaluated() {
            *per_generation.entry(r.generation).or_insert(0) += 1;
        }
        Self {
            total_checkpoints: log.len(),
            evaluated_checkpoints: log.evaluated().count(),
            generations_completed: completed,
            final_generation,
            best,
            per_generation,
            wall_time_secs: wall_time.as_secs_f64(),
        }
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.get("loss").map(|b| b.value)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub log: PopulationLog,
}

/// A claimed training step.
#[derive(Debug, Clone)]
struct Job {
    child: CheckpointId,
    parent_state: String,
    hparams: HyperparamVector,
}

struct StepResult {
    loss: f64,
    metrics: BTreeMap<String, f64>,
    state_ref: String,
}

struct Engine<'a, T: Trainable> {
    task: &'a T,
    config: &'a RunConfig,
    population: SharedPopulation,
    store: &'a StateStore,
    stop: AtomicBool,
    started: Instant,
}

impl<'a, T: Trainable> Engine<'a, T> {
    fn finished(&self, log: &PopulationLog) -> bool {
        let bound = self.config.max_generations;
        bound == 0
            || log
                .last_completed_generation(self.config.selection.min_completed)
                .is_some_and(|g| g >= bound)
            || self
                .config
                .max_wall_time
                .is_some_and(|limit| self.started.elapsed() >= limit)
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Picks a parent, mutates its hyperparameters and registers the child.
    /// Runs under the population lock.
    fn claim(&self, log: &mut PopulationLog, worker: u32, rng: &mut PbtRng) -> Result<Option<Job>> {
        let Some(selection) = log.select_parent(rng, &self.config.selection)? else {
            return Ok(None);
        };
        let parent = log.get(selection.parent())?;
        let parent_state = parent.state_ref.clone().ok_or_else(|| {
            Error::CorruptLog(format!("parent {} has no stored state", parent.id))
        })?;
        let hparams = match &self.config.fixed_hparams {
            Some(h) => h.clone(),
            None => mutate(
                &self.config.search_space,
                &parent.hparams,
                self.config.mutation_probability,
                rng,
            ),
        };
        let rng_pos = u64::try_from(rng.get_word_pos()).unwrap_or(u64::MAX);
        let child = log.add_child(
            selection.parent(),
            hparams.clone(),
            Some(worker),
            Some(rng_pos),
        )?;
        log::debug!("worker {worker}: {selection:?} -> child {child}");
        Ok(Some(Job {
            child,
            parent_state,
            hparams,
        }))
    }

    /// Trains and evaluates without holding the lock. A failed or diverged
    /// step yields an infinite loss rather than an error; only storage
    /// failures abort the run.
    fn execute(&self, job: &Job, rng: &mut PbtRng) -> Result<StepResult> {
        let bytes = self.store.get(&job.parent_state)?;
        let parent = self.task.deserialize_state(&bytes)?;
        match self
            .task
            .train(&parent, &job.hparams, self.config.updates_per_step, rng)
        {
            Ok(state) => {
                let eval = self.task.evaluate(&state);
                let loss = if eval.loss.is_finite() {
                    eval.loss
                } else {
                    log::warn!(
                        "checkpoint {} evaluated to {}; recording +inf",
                        job.child,
                        eval.loss
                    );
                    f64::INFINITY
                };
                let metrics = eval
                    .metrics
                    .into_iter()
                    .filter(|(_, v)| v.is_finite())
                    .collect();
                let state_ref = self
                    .store
                    .put(job.child, &self.task.serialize_state(&state))?;
                Ok(StepResult {
                    loss,
                    metrics,
                    state_ref,
                })
            }
            Err(e) => {
                log::warn!(
                    "training checkpoint {} failed: {e}; recording +inf",
                    job.child
                );
                Ok(StepResult {
                    loss: f64::INFINITY,
                    metrics: BTreeMap::new(),
                    state_ref: job.parent_state.clone(),
                })
            }
        }
    }

    fn complete(&self, job: &Job, result: StepResult) -> Result<()> {
        let mut log = self.population.lock();
        log.report_result(job.child, result.loss, result.metrics, result.state_ref)?;
        if self.finished(&log) {
            self.stop.store(true, Ordering::SeqCst);
        }
        drop(log);
        self.population.notify_all();
        Ok(())
    }

    fn abort(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.population.notify_all();
    }

    fn worker_loop(&self, worker: u32, mut rng: PbtRng, mut queue: Vec<Job>) -> Result<()> {
        loop {
            let job = match queue.pop() {
                Some(job) => job,
                None => {
                    let mut log = self.population.lock();
                    loop {
                        if self.stopped() {
                            return Ok(());
                        }
                        if self.finished(&log) {
                            self.stop.store(true, Ordering::SeqCst);
                            self.population.notify_all();
                            return Ok(());
                        }
                        if let Some(job) = self.claim(&mut log, worker, &mut rng)? {
                            break job;
                        }
                        self.population.wait(&mut log, WAIT_SLICE);
                    }
                }
            };
            let result = self.execute(&job, &mut rng)?;
            self.complete(&job, result)?;
        }
    }

    fn run_async(&self, rngs: Vec<PbtRng>, mut queues: Vec<Vec<Job>>) -> Result<()> {
        std::thread::scope(|s| {
            let handles: Vec<_> = rngs
                .into_iter()
                .enumerate()
                .map(|(w, rng)| {
                    let queue = std::mem::take(&mut queues[w]);
                    s.spawn(move || {
                        let r = self.worker_loop(w as u32, rng, queue);
                        if r.is_err() {
                            self.abort();
                        }
                        r
                    })
                })
                .collect();
            let mut first_err = None;
            for h in handles {
                let r = h.join().unwrap_or_else(|p| std::panic::resume_unwind(p));
                if let Err(e) = r {
                    first_err.get_or_insert(e);
                }
            }
            first_err.map_or(Ok(()), Err)
        })
    }

    /// Virtual time: every round visits the workers in a shuffled order.
    /// A busy worker ticks its job down and finishes it at zero; an idle
    /// worker tries to claim a job lasting 1 to 3 ticks.
    fn run_deterministic(
        &self,
        mut rngs: Vec<PbtRng>,
        mut scheduler: PbtRng,
        queues: Vec<Vec<Job>>,
    ) -> Result<()> {
        let mut slots: Vec<Option<(Job, u32)>> = vec![None; rngs.len()];
        let mut backlog: Vec<Vec<Job>> = queues;
        let mut order: Vec<usize> = (0..rngs.len()).collect();
        loop {
            if !self.stopped() && self.finished(&self.population.lock()) {
                self.stop.store(true, Ordering::SeqCst);
            }
            let busy = slots.iter().any(Option::is_some) || backlog.iter().any(|q| !q.is_empty());
            if self.stopped() && !busy {
                return Ok(());
            }
            order.shuffle(&mut scheduler);
            let mut progressed = false;
            for &w in &order {
                if let Some((job, ticks)) = slots[w].as_mut() {
                    progressed = true;
                    *ticks -= 1;
                    if *ticks == 0 {
                        let job = job.clone();
                        slots[w] = None;
                        let result = self.execute(&job, &mut rngs[w])?;
                        self.complete(&job, result)?;
                    }
                }
                if slots[w].is_some() {
                    continue;
                }
                let job = match backlog[w].pop() {
                    Some(job) => Some(job),
                    None if self.stopped() => None,
                    None => self.claim(&mut self.population.lock(), w as u32, &mut rngs[w])?,
                };
                if let Some(job) = job {
                    slots[w] = Some((job, scheduler.random_range(1..=3)));
                    progressed = true;
                }
            }
            if !progressed {
                return Err(Error::Config(
                    "scheduler stalled: no worker can claim a parent".into(),
                ));
            }
        }
    }
}

fn mixed_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stream `w + 1` of the run seed for worker `w`; stream 0 initializes seeds.
fn worker_rngs(seed: u64, epoch: u64, workers: usize) -> Vec<PbtRng> {
    (0..workers)
        .map(|w| {
            let mut rng = PbtRng::seed_from_u64(mixed_seed(seed, epoch));
            rng.set_stream(w as u64 + 1);
            rng
        })
        .collect()
}

/// Creates the roots missing from `log` until it holds `population_size`.
fn add_seeds<T: Trainable>(
    log: &mut PopulationLog,
    task: &T,
    config: &RunConfig,
    store: &StateStore,
) -> Result<()> {
    let have = log.generation(0).count();
    let mut rng = PbtRng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let root = config.root_hparams();
    for i in 0..config.population_size {
        let state = task.init_state(&mut rng);
        if i < have {
            continue;
        }
        let id = CheckpointId(log.len() as u64);
        let state_ref = store.put(id, &task.serialize_state(&state))?;
        log.add_seed(root.clone(), state_ref)?;
    }
    Ok(())
}

fn drive<T: Trainable>(
    task: &T,
    config: &RunConfig,
    log: PopulationLog,
    store: &StateStore,
    pending: Vec<Job>,
    epoch: u64,
) -> Result<PopulationLog> {
    let started = Instant::now();
    let mut queues: Vec<Vec<Job>> = vec![Vec::new(); config.workers];
    for (i, job) in pending.into_iter().enumerate() {
        queues[i % config.workers].push(job);
    }
    let engine = Engine {
        task,
        config,
        population: SharedPopulation::new(log),
        store,
        stop: AtomicBool::new(false),
        started,
    };
    let rngs = worker_rngs(config.seed, epoch, config.workers);
    match config.mode {
        Mode::Async => engine.run_async(rngs, queues)?,
        Mode::Deterministic => {
            let mut scheduler = PbtRng::seed_from_u64(mixed_seed(config.seed, epoch));
            scheduler.set_stream(SCHEDULER_STREAM);
            engine.run_deterministic(rngs, scheduler, queues)?
        }
    }
    Ok(engine.population.into_inner())
}

/// Runs a population in memory.
pub fn run<T: Trainable>(config: &RunConfig, task: &T) -> Result<RunOutcome> {
    config.validate_for(task)?;
    let started = Instant::now();
    let store = StateStore::memory();
    let mut log = PopulationLog::new();
    add_seeds(&mut log, task, config, &store)?;
    let log = drive(task, config, log, &store, Vec::new(), 0)?;
    let summary = RunSummary::from_log(&log, config, started.elapsed());
    Ok(RunOutcome { summary, log })
}

/// Exclusive handle on a run directory, held for as long as it lives.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    _lock: File,
}

impl RunDir {
    /// Creates (if needed) and locks `path`.
    pub fn lock(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path.join(LOCK_FILE))?;
        lock.try_lock().map_err(|e| match e {
            fs::TryLockError::WouldBlock => Error::Locked(path.to_path_buf()),
            fs::TryLockError::Error(e) => Error::Io(e),
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log_path(&self) -> PathBuf {
        self.path.join(LOG_FILE)
    }

    fn write_summary(&self, summary: &RunSummary) -> Result<()> {
        let tmp = self.path.join(format!("{SUMMARY_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(summary)?)?;
        fs::rename(tmp, self.path.join(SUMMARY_FILE))?;
        Ok(())
    }
}

/// Runs a population persisted in `dir`: an append-only `population.log`,
/// one state blob per checkpoint under `states/`, and `summary.json`.
pub fn run_in_dir<T: Trainable>(config: &RunConfig, task: &T, dir: &Path) -> Result<RunOutcome> {
    config.validate_for(task)?;
    let started = Instant::now();
    let run_dir = RunDir::lock(dir)?;
    if run_dir.log_path().exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it instead",
            dir.display()
        )));
    }
    let store = StateStore::dir(dir)?;
    let file = OpenOptions::new()
        .create_new(true)
        .append(true)
        .open(run_dir.log_path())?;
    let mut log = PopulationLog::new().with_sink(Box::new(file));
    add_seeds(&mut log, task, config, &store)?;
    let log = drive(task, config, log, &store, Vec::new(), 0)?;
    let summary = RunSummary::from_log(&log, config, started.elapsed());
    run_dir.write_summary(&summary)?;
    Ok(RunOutcome { summary, log })
}

/// Continues the run in `dir` up to `config.max_generations`. A torn final
/// log line is cut off; steps that were claimed but never reported are
/// retrained with the hyperparameters they were logged with.
pub fn resume_in_dir<T: Trainable>(config: &RunConfig, task: &T, dir: &Path) -> Result<RunOutcome> {
    config.validate_for(task)?;
    let started = Instant::now();
    let run_dir = RunDir::lock(dir)?;
    let path = run_dir.log_path();
    let replay = PopulationLog::replay(BufReader::new(File::open(&path)?))?;
    let file = OpenOptions::new().write(true).open(&path)?;
    if replay.discarded_tail {
        file.set_len(replay.valid_len)?;
    }
    drop(file);
    let mut log = replay.log;
    log.set_sink(Box::new(OpenOptions::new().append(true).open(&path)?));
    let store = StateStore::dir(dir)?;
    add_seeds(&mut log, task, config, &store)?;
    let mut pending = Vec::new();
    for r in log
        .records()
        .iter()
        .filter(|r| !r.is_seed() && !r.is_evaluated())
    {
        let parent = log.get(r.parent.expect("non-seed has a parent"))?;
        let parent_state = parent.state_ref.clone().ok_or_else(|| {
            Error::CorruptLog(format!(
                "parent {} of pending {} has no state",
                parent.id, r.id
            ))
        })?;
        pending.push(Job {
            child: r.id,
            parent_state,
            hparams: r.hparams.clone(),
        });
    }
    // Workers pop from the back.
    pending.reverse();
    log::info!(
        "resuming {} with {} records, {} pending",
        dir.display(),
        log.len(),
        pending.len()
    );
    let log = drive(task, config, log, &store, pending, replay.events)?;
    let summary = RunSummary::from_log(&log, config, started.elapsed());
    run_dir.write_summary(&summary)?;
    Ok(RunOutcome { summary, log })
}
