//! Turns raw observable states into the model's normalized sliding windows
//! and persists (window, schedule, ground truth) training datasets.

use crate::sim::{EpisodeLog, FaultKinds, ScheduleMatrix, StateObs};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// The observable state matrix x_t; host rows then task rows, n features
/// each.
pub type StateMatrix = StateObs;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("interval {t} not covered by history of length {len}")]
    OutOfRange { t: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

/// Sliding window of k consecutive states for the entities active at its
/// last step: `(m + p) x n x k`, laid out entity-major, then feature, then
/// time (`index = (e * n + f) * k + s`, s = 0 oldest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateWindow {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub task_ids: Vec<u64>,
    pub data: Vec<f64>,
}

impl StateWindow {
    pub fn p(&self) -> usize {
        self.task_ids.len()
    }

    pub fn entities(&self) -> usize {
        self.m + self.task_ids.len()
    }

    pub fn at(&self, entity: usize, feature: usize, step: usize) -> f64 {
        self.data[(entity * self.n + feature) * self.k + step]
    }

    /// The newest time slice as an `(m+p) x n` row-major matrix.
    pub fn last_step_matrix(&self) -> Vec<f64> {
        let e = self.entities();
        let mut out = Vec::with_capacity(e * self.n);
        for ent in 0..e {
            for f in 0..self.n {
                out.push(self.at(ent, f, self.k - 1));
            }
        }
        out
    }

    /// Per-entity `k x n` (time-major) block, the layout attention runs on.
    pub fn entity_time_rows(&self, entity: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * self.n);
        for s in 0..self.k {
            for f in 0..self.n {
                out.push(self.at(entity, f, s));
            }
        }
        out
    }
}

/// Builds the raw (pre-normalization) window ending at `history[t]`.
///
/// Replication padding: steps before interval 0 replicate x_0; a task that
/// arrived after the window start replicates its earliest observed row.
pub fn build_window(
    history: &[StateMatrix],
    t: usize,
    k: usize,
) -> Result<StateWindow, TelemetryError> {
    if history.is_empty() {
        return Err(TelemetryError::EmptyHistory);
    }
    if t >= history.len() {
        return Err(TelemetryError::OutOfRange {
            t,
            len: history.len(),
        });
    }
    let last = &history[t];
    let (m, n) = (last.m, last.n);
    let p = last.task_count();
    // id -> row index per interval of the window
    let maps: Vec<HashMap<u64, usize>> = (0..=t)
        .map(|i| {
            history[i]
                .task_ids
                .iter()
                .enumerate()
                .map(|(row, &id)| (id, row))
                .collect()
        })
        .collect();
    let mut data = vec![0.0; (m + p) * n * k];
    for s in 0..k {
        let want = t as i64 - (k as i64 - 1) + s as i64;
        let idx = want.max(0) as usize;
        let snap = &history[idx];
        for h in 0..m {
            for f in 0..n {
                data[(h * n + f) * k + s] = snap.row(h)[f];
            }
        }
        for (row, &id) in last.task_ids.iter().enumerate() {
            // replicate earliest appearance when the task is not yet present
            let (src_snap, src_row) = match maps[idx].get(&id) {
                Some(&r) => (snap, r),
                None => {
                    let mut found = None;
                    for (j, map) in maps.iter().enumerate().take(t + 1).skip(idx + 1) {
                        if let Some(&r) = map.get(&id) {
                            found = Some((&history[j], r));
                            break;
                        }
                    }
                    found.ok_or_else(|| {
                        TelemetryError::Corrupt(format!("task {id} missing from history"))
                    })?
                }
            };
            for f in 0..n {
                data[((m + row) * n + f) * k + s] = src_snap.row(src_snap.m + src_row)[f];
            }
        }
    }
    Ok(StateWindow {
        m,
        n,
        k,
        task_ids: last.task_ids.clone(),
        data,
    })
}

/// Per-feature min/max observed during fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    /// Fits over every entity row of every state in `states`.
    pub fn fit(states: &[StateMatrix]) -> Result<Scaler, TelemetryError> {
        let n = states.first().ok_or(TelemetryError::EmptyHistory)?.n;
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for s in states {
            if s.n != n {
                return Err(TelemetryError::Shape(format!(
                    "feature count {} vs {}",
                    s.n, n
                )));
            }
            let entities = s.m + s.task_count();
            for e in 0..entities {
                for (f, v) in s.row(e).iter().enumerate() {
                    min[f] = min[f].min(*v);
                    max[f] = max[f].max(*v);
                }
            }
        }
        Ok(Scaler { min, max })
    }

    pub fn normalize_value(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi <= lo {
            0.0
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
    }

    /// Min-max normalizes a window into [0, 1]; constant features map to 0,
    /// out-of-range values clamp.
    pub fn normalize(&self, window: &StateWindow) -> StateWindow {
        let mut out = window.clone();
        for e in 0..window.entities() {
            for f in 0..window.n {
                for s in 0..window.k {
                    let i = (e * window.n + f) * window.k + s;
                    out.data[i] = self.normalize_value(f, window.data[i]);
                }
            }
        }
        out
    }
}

/// One training record: normalized window, the executed one-hot decision,
/// placements at decision time, and ground truth for the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub t: usize,
    pub window: StateWindow,
    pub schedule: ScheduleMatrix,
    pub placements: Vec<Option<usize>>,
    pub gt_flags: Vec<bool>,
    pub gt_kinds: Vec<FaultKinds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub scaler: Scaler,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// Builds windows over an episode log, fits (or reuses) a scaler, and
    /// pairs each interval with its executed schedule and next-state ground
    /// truth.
    pub fn from_episode(
        log: &EpisodeLog,
        k: usize,
        scaler: Option<Scaler>,
    ) -> Result<Dataset, TelemetryError> {
        let states: Vec<StateMatrix> = log.records.iter().map(|r| r.obs.clone()).collect();
        let scaler = match scaler {
            Some(s) => s,
            None => Scaler::fit(&states)?,
        };
        let mut records = Vec::with_capacity(states.len());
        for (i, rec) in log.records.iter().enumerate() {
            let raw = build_window(&states, i, k)?;
            let window = scaler.normalize(&raw);
            records.push(DatasetRecord {
                t: rec.t,
                window,
                schedule: ScheduleMatrix::from_targets(&rec.targets, log.meta.m),
                placements: rec.obs.placements.clone(),
                gt_flags: rec.outcome.fault_flags.clone(),
                gt_kinds: rec.outcome.fault_kinds.clone(),
            });
        }
        Ok(Dataset {
            m: log.meta.m,
            n: log.meta.n,
            k,
            scaler,
            records,
        })
    }
}

/// Append-only on-disk record store sharing the trace conventions: `meta`
/// key=value text, `scaler` min,max lines, `records.csv` one record per row.
pub struct DatasetStore {
    dir: std::path::PathBuf,
    m: usize,
    n: usize,
    k: usize,
    count: usize,
    rows: String,
}

impl DatasetStore {
    pub fn create(
        dir: &Path,
        m: usize,
        n: usize,
        k: usize,
        scaler: &Scaler,
    ) -> Result<DatasetStore, TelemetryError> {
        std::fs::create_dir_all(dir)?;
        let mut scaler_text = String::new();
        for f in 0..n {
            let _ = writeln!(scaler_text, "{},{}", scaler.min[f], scaler.max[f]);
        }
        std::fs::write(dir.join("scaler"), scaler_text)?;
        Ok(DatasetStore {
            dir: dir.to_path_buf(),
            m,
            n,
            k,
            count: 0,
            rows: String::new(),
        })
    }

    pub fn append(&mut self, rec: &DatasetRecord) -> Result<(), TelemetryError> {
        let w = &rec.window;
        if w.m != self.m || w.n != self.n || w.k != self.k {
            return Err(TelemetryError::Shape(format!(
                "record (m={}, n={}, k={}) vs store (m={}, n={}, k={})",
                w.m, w.n, w.k, self.m, self.n, self.k
            )));
        }
        let p = w.p();
        if rec.schedule.tasks != p
            || rec.schedule.hosts != self.m
            || rec.placements.len() != p
            || rec.gt_flags.len() != self.m
            || rec.gt_kinds.len() != self.m
        {
            return Err(TelemetryError::Shape(
                "schedule/placement/ground-truth lengths disagree with window".into(),
            ));
        }
        let mut line = format!("{},{}", rec.t, p);
        for id in &w.task_ids {
            let _ = write!(line, ",{id}");
        }
        for pl in &rec.placements {
            let _ = write!(line, ",{}", pl.map(|h| h as i64).unwrap_or(-1));
        }
        for v in &w.data {
            let _ = write!(line, ",{v}");
        }
        for v in &rec.schedule.rows {
            let _ = write!(line, ",{v}");
        }
        for f in &rec.gt_flags {
            let _ = write!(line, ",{}", u8::from(*f));
        }
        for kinds in &rec.gt_kinds {
            for b in kinds.as_array() {
                let _ = write!(line, ",{}", u8::from(b));
            }
        }
        line.push('\n');
        self.rows.push_str(&line);
        self.count += 1;
        Ok(())
    }

    /// Writes `meta` and flushes all appended rows.
    pub fn finish(self) -> Result<(), TelemetryError> {
        let meta = format!(
            "m={}\nn={}\nk={}\nrecords={}\n",
            self.m, self.n, self.k, self.count
        );
        std::fs::write(self.dir.join("meta"), meta)?;
        std::fs::write(self.dir.join("records.csv"), self.rows)?;
        Ok(())
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), TelemetryError> {
    let mut store = DatasetStore::create(dir, dataset.m, dataset.n, dataset.k, &dataset.scaler)?;
    for rec in &dataset.records {
        store.append(rec)?;
    }
    store.finish()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, TelemetryError> {
    let meta_text = std::fs::read_to_string(dir.join("meta"))?;
    let mut kv = HashMap::new();
    for line in meta_text.lines() {
        if let Some((a, b)) = line.split_once('=') {
            kv.insert(a.to_string(), b.to_string());
        }
    }
    let get_usize = |k: &str| -> Result<usize, TelemetryError> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TelemetryError::Corrupt(format!("meta missing {k}")))
    };
    let (m, n, k, expect) = (
        get_usize("m")?,
        get_usize("n")?,
        get_usize("k")?,
        get_usize("records")?,
    );
    let scaler_text = std::fs::read_to_string(dir.join("scaler"))?;
    let mut min = Vec::new();
    let mut max = Vec::new();
    for line in scaler_text.lines().filter(|l| !l.trim().is_empty()) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| TelemetryError::Corrupt("bad scaler line".into()))?;
        min.push(
            a.parse()
                .map_err(|_| TelemetryError::Corrupt("bad scaler min".into()))?,
        );
        max.push(
            b.parse()
                .map_err(|_| TelemetryError::Corrupt("bad scaler max".into()))?,
        );
    }
    if min.len() != n {
        return Err(TelemetryError::Corrupt(format!(
            "scaler has {} features, meta says {}",
            min.len(),
            n
        )));
    }
    let scaler = Scaler { min, max };
    let csv = std::fs::read_to_string(dir.join("records.csv"))?;
    let mut records = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut pos = 0usize;
        let mut next = |what: &str| -> Result<&str, TelemetryError> {
            let f = fields.get(pos).ok_or_else(|| {
                TelemetryError::Corrupt(format!("line {lineno}: truncated at {what}"))
            })?;
            pos += 1;
            Ok(f)
        };
        let t: usize = next("t")?
            .parse()
            .map_err(|_| TelemetryError::Corrupt(format!("line {lineno}: bad t")))?;
        let p: usize = next("p")?
            .parse()
            .map_err(|_| TelemetryError::Corrupt(format!("line {lineno}: bad p")))?;
        let mut task_ids = Vec::with_capacity(p);
        for _ in 0..p {
            task_ids.push(
                next("task id")?
                    .parse()
                    .map_err(|_| TelemetryError::Corrupt(format!("line {lineno}: bad id")))?,
            );
        }
        let mut placements = Vec::with_capacity(p);
        for _ in 0..p {
            let v: i64 = next("placement")?
                .parse()
                .map_err(|_| TelemetryError::Corrupt(format!("line {lineno}: bad placement")))?;
            placements.push(if v < 0 { None } else { Some(v as usize) });
        }
        let mut data = Vec::with_capacity((m + p) * n * k);
        for _ in 0..(m + p) * n * k {
            data.push(
                next("window value")?
                    .parse()
                    .map_err(|_| TelemetryError::Corrupt(format!("line {lineno}: bad value")))?,
            );
        }
        let mut sched = Vec::with_capacity(p * m);
        for _ in 0..p * m {
            sched.push(
                next("schedule value")?
                    .parse()
                    .map_err(|_| TelemetryError::Corrupt(format!("line {lineno}: bad schedule")))?,
            );
        }
        let mut gt_flags = Vec::with_capacity(m);
        for _ in 0..m {
            gt_flags.push(next("flag")? == "1");
        }
        let mut gt_kinds = Vec::with_capacity(m);
        for _ in 0..m {
            let mut a = [false; 3];
            for slot in a.iter_mut() {
                *slot = next("kind")? == "1";
            }
            gt_kinds.push(FaultKinds::from_array(a));
        }
        records.push(DatasetRecord {
            t,
            window: StateWindow {
                m,
                n,
                k,
                task_ids,
                data,
            },
            schedule: ScheduleMatrix::from_rows(p, m, sched),
            placements,
            gt_flags,
            gt_kinds,
        });
    }
    if records.len() != expect {
        return Err(TelemetryError::Corrupt(format!(
            "meta says {} records, file has {}",
            expect,
            records.len()
        )));
    }
    Ok(Dataset {
        m,
        n,
        k,
        scaler,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskProfile;

    fn obs(t: usize, m: usize, n: usize, task_ids: &[u64], fill: f64) -> StateMatrix {
        let p = task_ids.len();
        StateMatrix {
            t,
            m,
            n,
            rows: (0..(m + p) * n).map(|i| fill + i as f64 * 0.01).collect(),
            task_ids: task_ids.to_vec(),
            placements: task_ids.iter().map(|_| Some(0)).collect(),
            profiles: task_ids.iter().map(|_| TaskProfile::Balanced).collect(),
        }
    }

    #[test]
    fn window_at_t0_replicates_x0() {
        let history = vec![obs(0, 2, 3, &[7], 0.5)];
        let w = build_window(&history, 0, 5).unwrap();
        assert_eq!(w.entities(), 3);
        for e in 0..3 {
            for f in 0..3 {
                let v = w.at(e, f, 4);
                for s in 0..4 {
                    assert_eq!(w.at(e, f, s), v);
                }
            }
        }
    }

    #[test]
    fn window_slices_exactly_when_history_is_long() {
        let history: Vec<_> = (0..6).map(|t| obs(t, 1, 3, &[], t as f64)).collect();
        let w = build_window(&history, 5, 3).unwrap();
        // feature 0 of host 0 at steps [3, 4, 5]
        assert_eq!(w.at(0, 0, 0), 3.0);
        assert_eq!(w.at(0, 0, 1), 4.0);
        assert_eq!(w.at(0, 0, 2), 5.0);
    }

    #[test]
    fn window_partial_padding() {
        // t = 2, k = 5 -> steps [x0, x0, x0, x1, x2]
        let history: Vec<_> = (0..3).map(|t| obs(t, 1, 3, &[], t as f64 * 10.0)).collect();
        let w = build_window(&history, 2, 5).unwrap();
        let vals: Vec<f64> = (0..5).map(|s| w.at(0, 0, s)).collect();
        assert_eq!(vals, vec![0.0, 0.0, 0.0, 10.0, 20.0]);
    }

    #[test]
    fn late_arriving_task_replicates_first_row() {
        let mut history = vec![obs(0, 1, 3, &[], 0.0), obs(1, 1, 3, &[], 1.0)];
        history.push(obs(2, 1, 3, &[42], 2.0));
        let w = build_window(&history, 2, 4).unwrap();
        // the task row replicates its t=2 value across all steps
        let v = w.at(1, 0, 3);
        for s in 0..3 {
            assert_eq!(w.at(1, 0, s), v);
        }
    }

    #[test]
    fn empty_history_errors() {
        assert!(matches!(
            build_window(&[], 0, 3),
            Err(TelemetryError::EmptyHistory)
        ));
    }

    #[test]
    fn scaler_normalizes_and_clamps() {
        let states = vec![obs(0, 1, 3, &[], 0.0), obs(1, 1, 3, &[], 1.0)];
        let scaler = Scaler::fit(&states).unwrap();
        let w = build_window(&states, 1, 2).unwrap();
        let norm = scaler.normalize(&w);
        for v in &norm.data {
            assert!((0.0..=1.0).contains(v));
        }
        // window at the scaler minima everywhere -> all zeros
        let zero_scaler = Scaler {
            min: vec![5.0; 3],
            max: vec![9.0; 3],
        };
        let all_min = StateWindow {
            m: 1,
            n: 3,
            k: 2,
            task_ids: vec![],
            data: vec![5.0; 6],
        };
        assert!(zero_scaler
            .normalize(&all_min)
            .data
            .iter()
            .all(|&v| v == 0.0));
        // above max -> clamped to 1
        let above = StateWindow {
            data: vec![99.0; 6],
            ..all_min.clone()
        };
        assert!(zero_scaler.normalize(&above).data.iter().all(|&v| v == 1.0));
        // constant feature -> 0 by convention
        let flat = Scaler {
            min: vec![2.0; 3],
            max: vec![2.0; 3],
        };
        assert!(flat.normalize(&above).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_idempotent_on_unit_scaler() {
        let unit = Scaler {
            min: vec![0.0; 3],
            max: vec![1.0; 3],
        };
        let w = StateWindow {
            m: 1,
            n: 3,
            k: 2,
            task_ids: vec![],
            data: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1],
        };
        let once = unit.normalize(&w);
        let twice = unit.normalize(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn store_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        let scaler = Scaler {
            min: vec![0.0; 3],
            max: vec![1.0; 3],
        };
        let mut store = DatasetStore::create(dir.path(), 2, 3, 2, &scaler).unwrap();
        let rec = DatasetRecord {
            t: 0,
            window: StateWindow {
                m: 2,
                n: 4, // wrong n
                k: 2,
                task_ids: vec![],
                data: vec![0.0; 2 * 4 * 2],
            },
            schedule: ScheduleMatrix::from_rows(0, 2, vec![]),
            placements: vec![],
            gt_flags: vec![false; 2],
            gt_kinds: vec![FaultKinds::default(); 2],
        };
        assert!(store.append(&rec).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scaler = Scaler {
            min: vec![0.0, 0.1, 0.2],
            max: vec![1.0, 0.9, 1.7],
        };
        let rec = DatasetRecord {
            t: 3,
            window: StateWindow {
                m: 2,
                n: 3,
                k: 2,
                task_ids: vec![11, 5],
                data: (0..(2 + 2) * 3 * 2).map(|i| (i as f64) / 7.0).collect(),
            },
            schedule: ScheduleMatrix::from_targets(&[1, 0], 2),
            placements: vec![Some(1), None],
            gt_flags: vec![true, false],
            gt_kinds: vec![
                FaultKinds::from_array([true, false, true]),
                FaultKinds::default(),
            ],
        };
        let ds = Dataset {
            m: 2,
            n: 3,
            k: 2,
            scaler,
            records: vec![rec],
        };
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }
}
