//! Offline analysis over a population log: best checkpoints, lineages and
//! the hyperparameter schedules along them, population scatter series,
//! Lowess trends and metric correlations, plus tabular export.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hparam::{HyperparamVector, SearchSpace};
use crate::population::{CheckpointId, CheckpointRecord, PopulationLog, SelectionConfig};

/// Which generations a query looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    All,
    /// The latest generation with at least two evaluated checkpoints.
    #[default]
    LastCompleted,
    /// Inclusive range.
    Generations(u32, u32),
}

impl Window {
    fn bounds(self, log: &PopulationLog) -> Option<(u32, u32)> {
        match self {
            Window::All => Some((0, u32::MAX)),
            Window::LastCompleted => log
                .last_completed_generation(SelectionConfig::default().min_completed)
                .map(|g| (g, g)),
            Window::Generations(lo, hi) => Some((lo, hi)),
        }
    }
}

/// The evaluated checkpoint with the lowest `metric` in `window`; the lower
/// id wins ties. `metric` is `"loss"` or any per-checkpoint metric name.
pub fn best_checkpoint<'a>(
    log: &'a PopulationLog,
    metric: &str,
    window: Window,
) -> Result<&'a CheckpointRecord> {
    if log.evaluated().next().is_none() {
        return Err(Error::NoEvaluated);
    }
    let (lo, hi) = window.bounds(log).ok_or(Error::NoEvaluated)?;
    let mut best: Option<(&CheckpointRecord, f64)> = None;
    for r in log
        .evaluated()
        .filter(|r| (lo..=hi).contains(&r.generation))
    {
        let Some(v) = r.metric(metric) else { continue };
        if best.is_none_or(|(_, b)| v.total_cmp(&b).is_lt()) {
            best = Some((r, v));
        }
    }
    best.map(|(r, _)| r).ok_or_else(|| {
        Error::Analysis(format!(
            "no evaluated checkpoint in the window carries `{metric}`"
        ))
    })
}

/// Ancestors of `id` followed by `id` itself, root first.
pub fn lineage(log: &PopulationLog, id: CheckpointId) -> Result<Vec<&CheckpointRecord>> {
    let mut chain = vec![log.get(id)?];
    while let Some(parent) = chain.last().and_then(|r| r.parent) {
        let child = *chain.last().expect("non-empty");
        let record = log.get(parent).map_err(|_| {
            Error::CorruptLog(format!("{} refers to missing parent {parent}", child.id))
        })?;
        if record.generation + 1 != child.generation || chain.len() > log.len() {
            return Err(Error::CorruptLog(format!(
                "broken parent link {} -> {parent}",
                child.id
            )));
        }
        chain.push(record);
    }
    if chain.last().is_some_and(|r| r.generation != 0) {
        return Err(Error::CorruptLog(format!(
            "lineage of {id} does not reach a root"
        )));
    }
    chain.reverse();
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub generation: u32,
    pub checkpoint_id: CheckpointId,
    pub hparams: HyperparamVector,
}

/// Hyperparameters along one lineage, indexed by generation from 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values of one parameter, in generation order.
    pub fn values(&self, param: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| e.hparams.get(param))
            .collect()
    }
}

pub fn extract_schedule(log: &PopulationLog, id: CheckpointId) -> Result<Schedule> {
    Ok(Schedule {
        entries: lineage(log, id)?
            .into_iter()
            .map(|r| ScheduleEntry {
                generation: r.generation,
                checkpoint_id: r.id,
                hparams: r.hparams.clone(),
            })
            .collect(),
    })
}

/// Checks that every step of `schedule` is a single mutation of each
/// parameter: no change, one signed delta, or a move cut short by a bound.
pub fn check_schedule(schedule: &Schedule, space: &SearchSpace) -> Result<()> {
    const EPS: f64 = 1e-9;
    for pair in schedule.entries.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.generation != a.generation + 1 {
            return Err(Error::Analysis(format!(
                "schedule skips from generation {} to {}",
                a.generation, b.generation
            )));
        }
        for spec in space.specs() {
            let (Some(x), Some(y)) = (a.hparams.get(&spec.name), b.hparams.get(&spec.name)) else {
                return Err(Error::Analysis(format!(
                    "`{}` missing from schedule",
                    spec.name
                )));
            };
            let step = (y - x).abs();
            let at_bound = (y - spec.min).abs() < EPS || (y - spec.max).abs() < EPS;
            let max_delta = spec.deltas.iter().cloned().fold(0.0, f64::max);
            let ok = step < EPS
                || spec.deltas.iter().any(|d| (step - d).abs() < EPS)
                || (at_bound && step <= max_delta + EPS);
            if !ok {
                return Err(Error::Analysis(format!(
                    "`{}` moved {x} -> {y} between generations {} and {}",
                    spec.name, a.generation, b.generation
                )));
            }
        }
    }
    Ok(())
}

/// Per-parameter mean over the last `min(k, len)` entries.
pub fn tail_average(schedule: &Schedule, k: usize) -> Result<HyperparamVector> {
    if k == 0 {
        return Err(Error::Analysis("tail length must be >= 1".into()));
    }
    let Some(last) = schedule.entries.last() else {
        return Err(Error::Analysis("empty schedule".into()));
    };
    let tail = &schedule.entries[schedule.len().saturating_sub(k)..];
    last.hparams
        .names()
        .map(|name| {
            let sum: f64 = tail
                .iter()
                .map(|e| e.hparams.get(name).unwrap_or(f64::NAN))
                .sum();
            let mean = sum / tail.len() as f64;
            if mean.is_nan() {
                return Err(Error::Analysis(format!(
                    "`{name}` missing from part of the schedule"
                )));
            }
            Ok((name.to_string(), mean))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub generation: u32,
    pub checkpoint_id: CheckpointId,
    pub value: f64,
}

/// One point per evaluated checkpoint: the value of `param` it was trained with.
pub fn population_series(
    log: &PopulationLog,
    param: &str,
    space: &SearchSpace,
) -> Result<Vec<SeriesPoint>> {
    space.require(param)?;
    log.evaluated()
        .map(|r| {
            let value = r
                .hparams
                .get(param)
                .ok_or_else(|| Error::Analysis(format!("checkpoint {} lacks `{param}`", r.id)))?;
            Ok(SeriesPoint {
                generation: r.generation,
                checkpoint_id: r.id,
                value,
            })
        })
        .collect()
}

/// Locally weighted linear regression. For every input x, a weighted
/// least-squares line is fitted to the `ceil(frac * n)` nearest points with
/// tricube weights scaled by the farthest of them, and evaluated at x.
/// Neighbourhoods without spread in x fall back to the weighted mean.
/// Output follows input order.
pub fn lowess(points: &[(f64, f64)], frac: f64) -> Result<Vec<(f64, f64)>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Analysis(format!(
            "lowess needs >= 2 points, got {n}"
        )));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Analysis(format!(
            "lowess frac must be in (0, 1], got {frac}"
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Analysis("lowess points must be finite".into()));
    }
    let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    Ok(points
        .iter()
        .map(|&(x0, _)| {
            order.sort_by(|&a, &b| {
                (points[a].0 - x0)
                    .abs()
                    .total_cmp(&(points[b].0 - x0).abs())
                    .then(a.cmp(&b))
            });
            let hood = &order[..k];
            let dmax = (points[hood[k - 1]].0 - x0).abs();
            let weight = |x: f64| {
                if dmax == 0.0 {
                    1.0
                } else {
                    let u = ((x - x0).abs() / dmax).min(1.0);
                    (1.0 - u * u * u).powi(3)
                }
            };
            let (mut sw, mut swx, mut swy) = (0.0, 0.0, 0.0);
            for &i in hood {
                let (x, y) = points[i];
                let w = weight(x);
                sw += w;
                swx += w * x;
                swy += w * y;
            }
            let (xbar, ybar) = (swx / sw, swy / sw);
            let (mut sxx, mut sxy) = (0.0, 0.0);
            for &i in hood {
                let (x, y) = points[i];
                let w = weight(x);
                sxx += w * (x - xbar) * (x - xbar);
                sxy += w * (x - xbar) * (y - ybar);
            }
            if dmax == 0.0 || sxx <= 1e-12 * sw * dmax * dmax {
                (x0, ybar)
            } else {
                (x0, ybar + sxy / sxx * (x0 - xbar))
            }
        })
        .collect())
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Analysis(format!(
            "correlation needs >= 2 paired values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Analysis(
            "correlation undefined for zero variance".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of two metrics over the evaluated checkpoints that
/// carry finite values for both.
pub fn metric_correlation(log: &PopulationLog, a: &str, b: &str) -> Result<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = log
        .evaluated()
        .filter_map(|r| Some((r.metric(a)?, r.metric(b)?)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .unzip();
    pearson(&xs, &ys)
}

/// Every known metric name in the log, `loss` included.
pub fn metric_names(log: &PopulationLog) -> Vec<String> {
    let mut names: Vec<String> = std::iter::once("loss".to_string())
        .chain(log.evaluated().flat_map(|r| r.metrics.keys().cloned()))
        .collect();
    names.sort();
    names.dedup();
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Analysis(format!(
                "unknown format `{other}` (valid: csv, json)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

/// One exported value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub generation: u32,
    pub checkpoint_id: CheckpointId,
    pub parameter: String,
    pub value: f64,
}

pub const COLUMNS: [&str; 4] = ["generation", "checkpoint_id", "parameter", "value"];

pub fn schedule_rows(schedule: &Schedule) -> Vec<Row> {
    schedule
        .entries
        .iter()
        .flat_map(|e| {
            e.hparams.iter().map(move |(name, value)| Row {
                generation: e.generation,
                checkpoint_id: e.checkpoint_id,
                parameter: name.to_string(),
                value,
            })
        })
        .collect()
}

pub fn series_rows(param: &str, series: &[SeriesPoint]) -> Vec<Row> {
    series
        .iter()
        .map(|p| Row {
            generation: p.generation,
            checkpoint_id: p.checkpoint_id,
            parameter: param.to_string(),
            value: p.value,
        })
        .collect()
}

/// Every hyperparameter of every record.
pub fn log_rows(log: &PopulationLog) -> Vec<Row> {
    log.records()
        .iter()
        .flat_map(|r| {
            r.hparams.iter().map(move |(name, value)| Row {
                generation: r.generation,
                checkpoint_id: r.id,
                parameter: name.to_string(),
                value,
            })
        })
        .collect()
}

/// Writes rows to `out`. CSV always carries the header, even with no rows.
pub fn write_rows<W: Write>(out: W, rows: &[Row], format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(out);
            w.write_record(COLUMNS)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_rows<R: std::io::Read>(input: R, format: Format) -> Result<Vec<Row>> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(input);
            let headers = r.headers()?.clone();
            if headers.iter().ne(COLUMNS) {
                return Err(Error::Analysis(format!(
                    "unexpected columns {:?}",
                    headers.iter().collect::<Vec<_>>()
                )));
            }
            Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
        }
        Format::Json => Ok(serde_json::from_reader(input)?),
    }
}

pub fn export(path: &Path, rows: &[Row], format: Format) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_rows(&mut out, rows, format)?;
    out.flush()?;
    Ok(())
}

pub fn import(path: &Path, format: Format) -> Result<Vec<Row>> {
    read_rows(BufReader::new(File::open(path)?), format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hparam::HyperparamSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn hv(x: f64) -> HyperparamVector {
        [("x", x)].into_iter().collect()
    }

    /// Two seeds; seed 0 grows a chain of three children, seed 1 one child.
    fn sample_log() -> PopulationLog {
        let mut log = PopulationLog::new();
        let s0 = log.add_seed(hv(0.5), "s0".into()).unwrap();
        let s1 = log.add_seed(hv(0.5), "s1".into()).unwrap();
        let a = log.add_child(s0, hv(0.6), None, None).unwrap();
        let b = log.add_child(s1, hv(0.4), None, None).unwrap();
        let c = log.add_child(a, hv(0.7), None, None).unwrap();
        let d = log.add_child(c, hv(0.8), None, None).unwrap();
        let e = log.add_child(b, hv(0.3), None, None).unwrap();
        for (id, loss, sel) in [
            (a, 3.0, 1.0),
            (b, 2.0, 2.0),
            (c, 1.0, 3.0),
            (d, 0.5, 4.0),
            (e, 1.0, 5.0),
        ] {
            let m: BTreeMap<_, _> = [("sel".to_string(), sel)].into_iter().collect();
            log.report_result(id, loss, m, format!("{id}")).unwrap();
        }
        log
    }

    #[test]
    fn best_matches_scan() {
        let log = sample_log();
        let all = best_checkpoint(&log, "loss", Window::All).unwrap();
        let oracle = log
            .evaluated()
            .min_by(|a, b| {
                a.loss
                    .unwrap()
                    .total_cmp(&b.loss.unwrap())
                    .then(a.id.cmp(&b.id))
            })
            .unwrap();
        assert_eq!(all.id, oracle.id);
        // Generation 2 holds c and e, tied on loss: the lower id wins.
        let g2 = best_checkpoint(&log, "loss", Window::LastCompleted).unwrap();
        assert_eq!(g2.id, CheckpointId(4));
        assert_eq!(
            best_checkpoint(&log, "sel", Window::All).unwrap().id,
            CheckpointId(2)
        );
        assert!(best_checkpoint(&log, "nope", Window::All).is_err());
        assert!(matches!(
            best_checkpoint(&PopulationLog::new(), "loss", Window::All),
            Err(Error::NoEvaluated)
        ));
    }

    #[test]
    fn best_of_single_record() {
        let mut log = PopulationLog::new();
        let s = log.add_seed(hv(0.5), "s".into()).unwrap();
        let c = log.add_child(s, hv(0.5), None, None).unwrap();
        log.report_result(c, 7.0, BTreeMap::new(), "c".into())
            .unwrap();
        assert_eq!(best_checkpoint(&log, "loss", Window::All).unwrap().id, c);
    }

    /// Reverse breadth-first search from the root set down to `target`.
    fn bfs_path(log: &PopulationLog, target: CheckpointId) -> Vec<CheckpointId> {
        let mut prev: BTreeMap<CheckpointId, CheckpointId> = BTreeMap::new();
        let mut queue: std::collections::VecDeque<CheckpointId> = log
            .records()
            .iter()
            .filter(|r| r.parent.is_none())
            .map(|r| r.id)
            .collect();
        while let Some(id) = queue.pop_front() {
            for child in log.records().iter().filter(|r| r.parent == Some(id)) {
                prev.insert(child.id, id);
                queue.push_back(child.id);
            }
        }
        let mut path = vec![target];
        while let Some(p) = prev.get(path.last().unwrap()) {
            path.push(*p);
        }
        path.reverse();
        path
    }

    #[test]
    fn lineage_examples() {
        let log = sample_log();
        let root = lineage(&log, CheckpointId(0)).unwrap();
        assert_eq!(root.len(), 1);
        for r in log.records() {
            let chain = lineage(&log, r.id).unwrap();
            assert_eq!(chain.len(), r.generation as usize + 1);
            let ids: Vec<_> = chain.iter().map(|r| r.id).collect();
            assert_eq!(ids, bfs_path(&log, r.id));
        }
        let s = extract_schedule(&log, CheckpointId(5)).unwrap();
        assert_eq!(s.values("x"), vec![0.5, 0.6, 0.7, 0.8]);
        assert_eq!(
            s.entries.iter().map(|e| e.generation).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!(lineage(&log, CheckpointId(99)).is_err());
    }

    #[test]
    fn schedule_step_check() {
        let space =
            SearchSpace::new(vec![HyperparamSpec::new("x", 0.5, 0.0, 0.85, &[0.1])]).unwrap();
        let log = sample_log();
        check_schedule(&extract_schedule(&log, CheckpointId(5)).unwrap(), &space).unwrap();
        let mut s = extract_schedule(&log, CheckpointId(5)).unwrap();
        s.entries[2].hparams.insert("x", 0.9);
        assert!(check_schedule(&s, &space).is_err());
        // Clamped at the upper bound: 0.8 -> 0.85 is a cut-short +0.1.
        s.entries[2].hparams.insert("x", 0.7);
        s.entries.push(ScheduleEntry {
            generation: 4,
            checkpoint_id: CheckpointId(9),
            hparams: hv(0.85),
        });
        check_schedule(&s, &space).unwrap();
        s.entries[4].generation = 5;
        assert!(check_schedule(&s, &space).is_err());
    }

    fn schedule_of(values: &[f64]) -> Schedule {
        Schedule {
            entries: values
                .iter()
                .enumerate()
                .map(|(i, &v)| ScheduleEntry {
                    generation: i as u32,
                    checkpoint_id: CheckpointId(i as u64),
                    hparams: [("a", v), ("b", 2.0 * v)].into_iter().collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn tail_average_examples() {
        let s = schedule_of(&[1.0, 2.0, 4.0, 8.0]);
        assert_eq!(tail_average(&s, 1).unwrap(), s.entries[3].hparams);
        assert_eq!(
            tail_average(&schedule_of(&[3.0; 5]), 3).unwrap().get("a"),
            Some(3.0)
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..37).map(|_| rng.random::<f64>()).collect();
        let s = schedule_of(&values);
        let mut oracle = 0.0;
        for v in &values {
            oracle += v;
        }
        oracle /= values.len() as f64;
        assert!((tail_average(&s, values.len()).unwrap().get("a").unwrap() - oracle).abs() < 1e-12);
        assert!((tail_average(&s, 1000).unwrap().get("a").unwrap() - oracle).abs() < 1e-12);
        assert!(tail_average(&s, 0).is_err());
        assert!(tail_average(&Schedule::default(), 1).is_err());
    }

    #[test]
    fn series_examples() {
        let space =
            SearchSpace::new(vec![HyperparamSpec::new("x", 0.5, 0.0, 1.0, &[0.1])]).unwrap();
        assert!(population_series(&PopulationLog::new(), "x", &space)
            .unwrap()
            .is_empty());
        let log = sample_log();
        let series = population_series(&log, "x", &space).unwrap();
        assert_eq!(series.len(), log.evaluated().count());
        assert!(series.iter().all(|p| (0.0..=1.0).contains(&p.value)));
        let err = population_series(&log, "y", &space).unwrap_err();
        assert!(err.to_string().contains("valid: x"), "{err}");
    }

    /// Dense reference: weights over all points (zero outside the
    /// neighbourhood), normal equations solved by Cramer's rule.
    fn lowess_reference(points: &[(f64, f64)], frac: f64) -> Vec<f64> {
        let n = points.len();
        let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
        points
            .iter()
            .map(|&(x0, _)| {
                let mut d: Vec<f64> = points.iter().map(|p| (p.0 - x0).abs()).collect();
                d.sort_by(f64::total_cmp);
                let h = d[k - 1];
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| {
                    (points[a].0 - x0)
                        .abs()
                        .total_cmp(&(points[b].0 - x0).abs())
                        .then(a.cmp(&b))
                });
                let mut w = vec![0.0; n];
                for &i in &idx[..k] {
                    let u = (points[i].0 - x0).abs() / h;
                    w[i] = (1.0 - u.powi(3)).powi(3);
                }
                let (mut a00, mut a01, mut a11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    let (x, y) = points[i];
                    a00 += w[i];
                    a01 += w[i] * x;
                    a11 += w[i] * x * x;
                    b0 += w[i] * y;
                    b1 += w[i] * x * y;
                }
                let det = a00 * a11 - a01 * a01;
                let beta0 = (b0 * a11 - a01 * b1) / det;
                let beta1 = (a00 * b1 - a01 * b0) / det;
                beta0 + beta1 * x0
            })
            .collect()
    }

    fn noisy_sine(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = i as f64 / 10.0;
                (x, x.sin() + rng.random_range(-0.3..0.3))
            })
            .collect()
    }

    #[test]
    fn lowess_matches_reference() {
        let pts = noisy_sine(100, 0);
        let ours = lowess(&pts, 0.3).unwrap();
        for (o, r) in ours.iter().zip(lowess_reference(&pts, 0.3)) {
            assert!((o.1 - r).abs() < 1e-9, "{} vs {r}", o.1);
        }
    }

    #[test]
    fn lowess_reproduces_lines() {
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|i| (i as f64 * 0.7, 3.0 - 2.5 * i as f64 * 0.7))
            .collect();
        for frac in [0.05, 0.1, 0.3, 1.0] {
            for (x, y) in lowess(&pts, frac).unwrap() {
                assert!((y - (3.0 - 2.5 * x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lowess_symmetric_midpoint() {
        // Symmetric about x = 2: with frac 1 the fit at 2 is the weighted mean.
        let pts = [(0.0, 1.0), (1.0, 3.0), (2.0, 2.0), (3.0, 3.0), (4.0, 1.0)];
        let mid = lowess(&pts, 1.0).unwrap()[2].1;
        let w = |d: f64| (1.0 - (d / 2.0f64).powi(3)).powi(3);
        let oracle = (w(1.0) * 3.0 * 2.0 + w(0.0) * 2.0) / (2.0 * w(1.0) + w(0.0));
        assert!((mid - oracle).abs() < 1e-12);
        assert!((mid - lowess_reference(&pts, 1.0)[2]).abs() < 1e-12);
    }

    #[test]
    fn lowess_degenerate_neighbourhood() {
        let pts = [(1.0, 2.0), (1.0, 4.0), (1.0, 6.0)];
        for (_, y) in lowess(&pts, 1.0).unwrap() {
            assert!((y - 4.0).abs() < 1e-12);
        }
        assert!(lowess(&pts[..1], 0.5).is_err());
        assert!(lowess(&pts, 0.0).is_err());
        assert!(lowess(&pts, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn lowess_shift_equivariant(seed in 0u64..1000, shift in -50.0f64..50.0, frac in 0.1f64..=1.0) {
            let pts = noisy_sine(40, seed);
            let shifted: Vec<_> = pts.iter().map(|&(x, y)| (x, y + shift)).collect();
            let a = lowess(&pts, frac).unwrap();
            let b = lowess(&shifted, frac).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p.1 + shift - q.1).abs() < 1e-9);
            }
        }

        #[test]
        fn lowess_reproduces_affine(a in -10.0f64..10.0, b in -10.0f64..10.0, frac in 0.05f64..=1.0) {
            let pts: Vec<(f64, f64)> = (0..30).map(|i| {
                let x = (i * i) as f64 / 7.0;
                (x, a + b * x)
            }).collect();
            for (x, y) in lowess(&pts, frac).unwrap() {
                prop_assert!((y - (a + b * x)).abs() < 1e-9 * (1.0 + (a + b * x).abs()));
            }
        }

        #[test]
        fn tail_average_within_window(values in proptest::collection::vec(-5.0f64..5.0, 1..40), k in 1usize..50) {
            let s = schedule_of(&values);
            let avg = tail_average(&s, k).unwrap().get("a").unwrap();
            let tail = &values[values.len().saturating_sub(k)..];
            let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(avg >= lo - 1e-12 && avg <= hi + 1e-12);
        }
    }

    fn textbook_r(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn correlation_examples() {
        let log = sample_log();
        assert!((metric_correlation(&log, "sel", "sel").unwrap() - 1.0).abs() < 1e-12);
        let xs: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        assert!((pearson(&a, &b).unwrap() - textbook_r(&a, &b)).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
        let r = metric_correlation(&log, "loss", "sel").unwrap();
        assert!((-1.0..=1.0).contains(&r));
        assert_eq!(
            metric_names(&log),
            vec!["loss".to_string(), "sel".to_string()]
        );
    }

    #[test]
    fn export_round_trip() {
        let log = sample_log();
        let rows = schedule_rows(&extract_schedule(&log, CheckpointId(5)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        for format in [Format::Csv, Format::Json] {
            let path = dir.path().join(format!("s.{format}"));
            export(&path, &rows, format).unwrap();
            assert_eq!(import(&path, format).unwrap(), rows);
            // Stable bytes across identical exports.
            let first = std::fs::read(&path).unwrap();
            export(&path, &rows, format).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), first);
        }
        let mut buf = Vec::new();
        write_rows(&mut buf, &[], Format::Csv).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "generation,checkpoint_id,parameter,value\n"
        );
        assert!(read_rows(
            &b"generation,checkpoint_id,parameter,value\n"[..],
            Format::Csv
        )
        .unwrap()
        .is_empty());
        assert_eq!(log_rows(&log).len(), log.len());
        assert!(export(&dir.path().join("missing/x.csv"), &rows, Format::Csv).is_err());
    }
}
