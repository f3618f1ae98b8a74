//! Append-only checkpoint registry and initiator-based parent selection.
//!
//! Every state change of a [`CheckpointRecord`] (creation, being claimed as
//! an initiator, receiving its evaluation) is one event. Events are numbered
//! by a log-wide clock and, when a sink is attached, written as one JSON line
//! holding the full record snapshot. Replaying the lines in order rebuilds the
//! exact in-memory state, last line per id wins.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::time::Duration;

use parking_lot::{Condvar, Mutex, MutexGuard};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hparam::HyperparamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CheckpointId(pub u64);

impl fmt::Display for CheckpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl CheckpointId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRecord {
    pub id: CheckpointId,
    #[serde(rename = "gen")]
    pub generation: u32,
    pub parent: Option<CheckpointId>,
    /// Values used to train this checkpoint.
    pub hparams: HyperparamVector,
    /// `None` while pending. Diverged training is recorded as `+inf`.
    #[serde(with = "loss_repr")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    pub initiated: bool,
    pub state_ref: Option<String>,
    /// Clock value of the creation event.
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<u32>,
    /// Word position of the worker's random stream when the child was spawned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_pos: Option<u64>,
}

impl CheckpointRecord {
    pub fn is_evaluated(&self) -> bool {
        self.loss.is_some()
    }

    pub fn is_seed(&self) -> bool {
        self.parent.is_none()
    }

    /// The named metric, with `"loss"` meaning the selection loss.
    pub fn metric(&self, name: &str) -> Option<f64> {
        if name == "loss" {
            self.loss
        } else {
            self.metrics.get(name).copied()
        }
    }
}

/// JSON has no infinity, so non-finite losses travel as strings.
mod loss_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(&Repr::Num(*x)),
            Some(x) if *x > 0.0 => s.serialize_some(&Repr::Text("inf".into())),
            Some(x) if *x < 0.0 => s.serialize_some(&Repr::Text("-inf".into())),
            Some(_) => s.serialize_some(&Repr::Text("nan".into())),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                "nan" => Ok(Some(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("bad loss `{other}`"))),
            },
        }
    }
}

/// Selection knobs. Defaults follow the matchup procedure: compare rank
/// percentiles over two generations with a 0.25 initiator handicap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub handicap: f64,
    /// Generations `{g - rank_window + 1, ..., g}` form a checkpoint's rank window.
    pub rank_window: u32,
    /// Initiators come from `{G - initiator_window + 1, ..., G}`.
    pub initiator_window: u32,
    /// Opponents come from `{G - opponent_window + 1, ..., G}`.
    pub opponent_window: u32,
    /// Evaluated checkpoints needed for a generation to count as completed.
    pub min_completed: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            handicap: 0.25,
            rank_window: 2,
            initiator_window: 3,
            opponent_window: 2,
            min_completed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    Initiator,
    Opponent,
}

/// The initiator keeps its place unless the opponent ranks better by more
/// than `handicap`.
pub fn matchup_winner(pct_initiator: f64, pct_opponent: f64, handicap: f64) -> Winner {
    if pct_initiator - handicap < pct_opponent {
        Winner::Initiator
    } else {
        Winner::Opponent
    }
}

/// Outcome of a parent search.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// An unclaimed generation-0 seed.
    Seed(CheckpointId),
    Matchup {
        initiator: CheckpointId,
        opponent: Option<CheckpointId>,
        parent: CheckpointId,
    },
}

impl Selection {
    pub fn parent(&self) -> CheckpointId {
        match self {
            Selection::Seed(id) => *id,
            Selection::Matchup { parent, .. } => *parent,
        }
    }
}

fn window(hi: u32, width: u32) -> std::ops::RangeInclusive<u32> {
    hi.saturating_sub(width.saturating_sub(1))..=hi
}

#[derive(Default)]
pub struct PopulationLog {
    records: Vec<CheckpointRecord>,
    by_generation: BTreeMap<u32, Vec<CheckpointId>>,
    clock: u64,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for PopulationLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PopulationLog")
            .field("records", &self.records.len())
            .field("clock", &self.clock)
            .field("sink", &self.sink.is_some())
            .finish()
    }
}

/// Result of rebuilding a log from its event lines.
#[derive(Debug)]
pub struct Replay {
    pub log: PopulationLog,
    /// Events applied.
    pub events: u64,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// Whether a torn trailing line was dropped.
    pub discarded_tail: bool,
}

impl PopulationLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every subsequent event is written to `sink` as one JSON line.
    pub fn with_sink(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn set_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.sink = Some(sink);
    }

    pub fn records(&self) -> &[CheckpointRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn get(&self, id: CheckpointId) -> Result<&CheckpointRecord> {
        self.records
            .get(id.index())
            .ok_or(Error::UnknownCheckpoint(id))
    }

    pub fn generation(&self, g: u32) -> impl Iterator<Item = &CheckpointRecord> {
        self.by_generation
            .get(&g)
            .into_iter()
            .flatten()
            .map(|id| &self.records[id.index()])
    }

    pub fn max_generation(&self) -> Option<u32> {
        self.by_generation.keys().next_back().copied()
    }

    pub fn evaluated(&self) -> impl Iterator<Item = &CheckpointRecord> {
        self.records.iter().filter(|r| r.is_evaluated())
    }

    fn evaluated_in(
        &self,
        gens: std::ops::RangeInclusive<u32>,
    ) -> impl Iterator<Item = &CheckpointRecord> {
        self.by_generation
            .range(gens)
            .flat_map(|(_, ids)| ids.iter())
            .map(|id| &self.records[id.index()])
            .filter(|r| r.is_evaluated())
    }

    /// Children that have been spawned but not yet reported.
    pub fn in_flight(&self) -> usize {
        self.records
            .iter()
            .filter(|r| !r.is_seed() && !r.is_evaluated())
            .count()
    }

    fn emit(&mut self, id: CheckpointId) -> Result<()> {
        self.clock += 1;
        if let Some(sink) = self.sink.as_mut() {
            let mut line = serde_json::to_string(&self.records[id.index()])?;
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        Ok(())
    }

    fn push(&mut self, mut record: CheckpointRecord) -> Result<CheckpointId> {
        let id = CheckpointId(self.records.len() as u64);
        record.id = id;
        record.seq = self.clock;
        self.by_generation
            .entry(record.generation)
            .or_default()
            .push(id);
        self.records.push(record);
        self.emit(id)?;
        Ok(id)
    }

    /// Adds a generation-0 root. Seeds stay unevaluated; they represent the
    /// initial model state and are claimed once by a worker.
    pub fn add_seed(
        &mut self,
        hparams: HyperparamVector,
        state_ref: String,
    ) -> Result<CheckpointId> {
        self.push(CheckpointRecord {
            id: CheckpointId(0),
            generation: 0,
            parent: None,
            hparams,
            loss: None,
            metrics: BTreeMap::new(),
            initiated: false,
            state_ref: Some(state_ref),
            seq: 0,
            reported_at: None,
            worker: None,
            rng_pos: None,
        })
    }

    /// Adds a pending child of `parent`, one generation later.
    pub fn add_child(
        &mut self,
        parent: CheckpointId,
        hparams: HyperparamVector,
        worker: Option<u32>,
        rng_pos: Option<u64>,
    ) -> Result<CheckpointId> {
        let generation = self.get(parent)?.generation + 1;
        self.push(CheckpointRecord {
            id: CheckpointId(0),
            generation,
            parent: Some(parent),
            hparams,
            loss: None,
            metrics: BTreeMap::new(),
            initiated: false,
            state_ref: None,
            seq: 0,
            reported_at: None,
            worker,
            rng_pos,
        })
    }

    pub fn report_result(
        &mut self,
        id: CheckpointId,
        loss: f64,
        metrics: BTreeMap<String, f64>,
        state_ref: String,
    ) -> Result<()> {
        let clock = self.clock;
        let record = self
            .records
            .get_mut(id.index())
            .ok_or(Error::UnknownCheckpoint(id))?;
        if record.is_evaluated() {
            return Err(Error::AlreadyReported(id));
        }
        record.loss = Some(loss);
        record.metrics = metrics;
        record.state_ref = Some(state_ref);
        record.reported_at = Some(clock);
        self.emit(id)
    }

    pub fn mark_initiated(&mut self, id: CheckpointId) -> Result<()> {
        let record = self
            .records
            .get_mut(id.index())
            .ok_or(Error::UnknownCheckpoint(id))?;
        if record.initiated {
            return Err(Error::CorruptLog(format!(
                "checkpoint {id} initiated twice"
            )));
        }
        record.initiated = true;
        self.emit(id)
    }

    /// Latest generation with at least `min_completed` evaluated checkpoints.
    pub fn last_completed_generation(&self, min_completed: usize) -> Option<u32> {
        self.by_generation
            .iter()
            .rev()
            .find(|(_, ids)| {
                ids.iter()
                    .filter(|id| self.records[id.index()].is_evaluated())
                    .count()
                    >= min_completed
            })
            .map(|(g, _)| *g)
    }

    /// Loss rank of `id` among evaluated checkpoints of its generation and
    /// the `rank_window - 1` before it: 0 is best, 1 is worst. A checkpoint
    /// alone in its window gets 0.5. Ties are broken by id.
    pub fn rank_percentile(&self, id: CheckpointId, rank_window: u32) -> Result<f64> {
        let record = self.get(id)?;
        if !record.is_evaluated() {
            return Err(Error::NotEvaluated(id));
        }
        let mut pool: Vec<(f64, CheckpointId)> = self
            .evaluated_in(window(record.generation, rank_window))
            .map(|r| (r.loss.unwrap_or(f64::INFINITY), r.id))
            .collect();
        if pool.len() == 1 {
            return Ok(0.5);
        }
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rank = pool
            .iter()
            .position(|(_, other)| *other == id)
            .expect("record is in its own window");
        Ok(rank as f64 / (pool.len() - 1) as f64)
    }

    /// Plays `initiator` against `opponent` and returns the winner's id.
    pub fn matchup(
        &self,
        initiator: CheckpointId,
        opponent: CheckpointId,
        cfg: &SelectionConfig,
    ) -> Result<CheckpointId> {
        let pi = self.rank_percentile(initiator, cfg.rank_window)?;
        let po = self.rank_percentile(opponent, cfg.rank_window)?;
        Ok(match matchup_winner(pi, po, cfg.handicap) {
            Winner::Initiator => initiator,
            Winner::Opponent => opponent,
        })
    }

    /// Draws an evaluated, non-initiated checkpoint from the initiator window
    /// and marks it initiated.
    pub fn sample_initiator<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        cfg: &SelectionConfig,
    ) -> Result<Option<CheckpointId>> {
        let Some(g) = self.last_completed_generation(cfg.min_completed) else {
            return Ok(None);
        };
        let pool: Vec<CheckpointId> = self
            .evaluated_in(window(g, cfg.initiator_window))
            .filter(|r| !r.initiated)
            .map(|r| r.id)
            .collect();
        let Some(&id) = pool.choose(rng) else {
            return Ok(None);
        };
        self.mark_initiated(id)?;
        Ok(Some(id))
    }

    /// Draws any evaluated checkpoint of the opponent window other than the
    /// initiator.
    pub fn sample_opponent<R: Rng + ?Sized>(
        &self,
        initiator: CheckpointId,
        rng: &mut R,
        cfg: &SelectionConfig,
    ) -> Option<CheckpointId> {
        let g = self.last_completed_generation(cfg.min_completed)?;
        let pool: Vec<CheckpointId> = self
            .evaluated_in(window(g, cfg.opponent_window))
            .filter(|r| r.id != initiator)
            .map(|r| r.id)
            .collect();
        pool.choose(rng).copied()
    }

    /// Picks the checkpoint the next training step should start from, or
    /// `None` when the caller has to wait for more evaluations.
    ///
    /// Unclaimed seeds go first, so every root is trained once. After that
    /// an initiator is drawn and plays a matchup against a random opponent.
    /// When the initiator window is exhausted and nothing is in flight, the
    /// initiator is drawn from the remaining unclaimed evaluated checkpoints
    /// of the newest generations instead, so a serial run cannot stall.
    pub fn select_parent<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        cfg: &SelectionConfig,
    ) -> Result<Option<Selection>> {
        let unclaimed_seed = self
            .generation(0)
            .find(|r| r.is_seed() && !r.initiated)
            .map(|r| r.id);
        if let Some(seed) = unclaimed_seed {
            self.mark_initiated(seed)?;
            return Ok(Some(Selection::Seed(seed)));
        }
        let Some(g) = self.last_completed_generation(cfg.min_completed) else {
            return Ok(None);
        };
        let initiator = match self.sample_initiator(rng, cfg)? {
            Some(id) => id,
            None if self.in_flight() == 0 => {
                let pool: Vec<CheckpointId> = self
                    .records
                    .iter()
                    .filter(|r| r.is_evaluated() && !r.initiated && r.generation > g)
                    .map(|r| r.id)
                    .collect();
                let pool = if pool.is_empty() {
                    self.evaluated()
                        .filter(|r| !r.initiated)
                        .map(|r| r.id)
                        .collect()
                } else {
                    pool
                };
                let Some(&id) = pool.choose(rng) else {
                    return Ok(None);
                };
                self.mark_initiated(id)?;
                id
            }
            None => return Ok(None),
        };
        let opponent = self.sample_opponent(initiator, rng, cfg);
        let parent = match opponent {
            Some(opp) => self.matchup(initiator, opp, cfg)?,
            None => initiator,
        };
        Ok(Some(Selection::Matchup {
            initiator,
            opponent,
            parent,
        }))
    }

    /// Applies one event snapshot during replay.
    fn apply(&mut self, record: CheckpointRecord) -> Result<()> {
        let idx = record.id.index();
        if idx == self.records.len() {
            match record.parent {
                None if record.generation != 0 => {
                    return Err(Error::CorruptLog(format!(
                        "root {} has generation {}",
                        record.id, record.generation
                    )))
                }
                Some(p) => {
                    let parent = self.records.get(p.index()).ok_or_else(|| {
                        Error::CorruptLog(format!("{} refers to unknown parent {p}", record.id))
                    })?;
                    if parent.generation + 1 != record.generation {
                        return Err(Error::CorruptLog(format!(
                            "{} has generation {} but parent {p} has {}",
                            record.id, record.generation, parent.generation
                        )));
                    }
                }
                None => {}
            }
            self.by_generation
                .entry(record.generation)
                .or_default()
                .push(record.id);
            self.records.push(record);
        } else if let Some(old) = self.records.get_mut(idx) {
            let same_identity = old.generation == record.generation
                && old.parent == record.parent
                && old.hparams == record.hparams
                && old.seq == record.seq;
            if !same_identity {
                return Err(Error::CorruptLog(format!(
                    "record {} changed identity",
                    record.id
                )));
            }
            if old.initiated && !record.initiated {
                return Err(Error::CorruptLog(format!(
                    "record {} un-initiated",
                    record.id
                )));
            }
            if old.is_evaluated() && old.reported_at != record.reported_at {
                return Err(Error::CorruptLog(format!(
                    "record {} reported twice",
                    record.id
                )));
            }
            *old = record;
        } else {
            return Err(Error::CorruptLog(format!(
                "record {} appears before {}",
                record.id,
                self.records.len()
            )));
        }
        self.clock += 1;
        Ok(())
    }

    /// Rebuilds a log from event lines. A torn or unparsable final line is
    /// dropped with a warning; damage anywhere else is an error.
    pub fn replay<R: BufRead>(mut reader: R) -> Result<Replay> {
        let mut log = PopulationLog::new();
        let mut valid_len = 0u64;
        let mut discarded_tail = false;
        let mut buf = Vec::new();
        let mut pending_error: Option<(u64, String)> = None;
        let mut line_no = 0u64;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if let Some((bad_line, msg)) = pending_error.take() {
                return Err(Error::CorruptLog(format!("line {bad_line}: {msg}")));
            }
            let complete = buf.last() == Some(&b'\n');
            let parsed = serde_json::from_slice::<CheckpointRecord>(&buf)
                .map_err(|e| e.to_string())
                .and_then(|r| {
                    if complete {
                        Ok(r)
                    } else {
                        Err("missing newline".into())
                    }
                });
            match parsed {
                Ok(record) => {
                    log.apply(record)
                        .map_err(|e| Error::CorruptLog(format!("line {line_no}: {e}")))?;
                    valid_len += n as u64;
                }
                Err(msg) => pending_error = Some((line_no, msg)),
            }
        }
        if let Some((bad_line, msg)) = pending_error {
            log::warn!("discarding torn trailing record at line {bad_line}: {msg}");
            discarded_tail = true;
        }
        let events = log.clock;
        Ok(Replay {
            log,
            events,
            valid_len,
            discarded_tail,
        })
    }
}

/// Checks the structural invariants of a set of records: ids are unique and
/// dense, every parent precedes its child, and generations step by one.
pub fn validate_forest(records: &[CheckpointRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.id.index() != i {
            return Err(Error::CorruptLog(format!("record {i} has id {}", r.id)));
        }
        match r.parent {
            None if r.generation != 0 => {
                return Err(Error::CorruptLog(format!(
                    "root {} at generation {}",
                    r.id, r.generation
                )))
            }
            Some(p) if p.index() >= i => {
                return Err(Error::CorruptLog(format!("{} has later parent {p}", r.id)))
            }
            Some(p) if records[p.index()].generation + 1 != r.generation => {
                return Err(Error::CorruptLog(format!("{} skips a generation", r.id)))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-id transition counts over a raw event stream.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct EventAudit {
    pub events: usize,
    pub records: usize,
    pub max_initiations_per_record: usize,
    pub max_reports_per_record: usize,
}

/// Counts how often each record flipped `initiated` and `loss` across the
/// event lines, without going through replay validation.
pub fn audit_events<R: BufRead>(reader: R) -> Result<EventAudit> {
    let mut last: BTreeMap<CheckpointId, (bool, bool)> = BTreeMap::new();
    let mut flips: BTreeMap<CheckpointId, (usize, usize)> = BTreeMap::new();
    let mut audit = EventAudit::default();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let r: CheckpointRecord = serde_json::from_str(&line)?;
        audit.events += 1;
        let prev = last.get(&r.id).copied().unwrap_or((false, false));
        let f = flips.entry(r.id).or_default();
        if r.initiated != prev.0 {
            f.0 += 1;
        }
        if r.is_evaluated() != prev.1 {
            f.1 += 1;
        }
        last.insert(r.id, (r.initiated, r.is_evaluated()));
    }
    audit.records = last.len();
    audit.max_initiations_per_record = flips.values().map(|f| f.0).max().unwrap_or(0);
    audit.max_reports_per_record = flips.values().map(|f| f.1).max().unwrap_or(0);
    Ok(audit)
}

/// A [`PopulationLog`] shared by concurrent workers. Every operation takes
/// the lock briefly; waiters park on a condition variable that is signalled
/// on every report.
#[derive(Debug, Default)]
pub struct SharedPopulation {
    log: Mutex<PopulationLog>,
    changed: Condvar,
}

impl SharedPopulation {
    pub fn new(log: PopulationLog) -> Self {
        Self {
            log: Mutex::new(log),
            changed: Condvar::new(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, PopulationLog> {
        self.log.lock()
    }

    pub fn notify_all(&self) {
        self.changed.notify_all();
    }

    /// Releases `guard` until another worker reports or `timeout` elapses.
    pub fn wait(&self, guard: &mut MutexGuard<'_, PopulationLog>, timeout: Duration) {
        self.changed.wait_for(guard, timeout);
    }

    pub fn snapshot(&self) -> Vec<CheckpointRecord> {
        self.log.lock().records().to_vec()
    }

    pub fn into_inner(self) -> PopulationLog {
        self.log.into_inner()
    }
}
