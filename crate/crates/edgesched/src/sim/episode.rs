use super::cluster::{ClusterState, Resources, ScheduleMatrix, SimError, TaskProfile, TaskState};
use super::labels::{FaultKinds, GroundTruthLabeler};
use super::step::{advance_bursts, advance_interval, IntervalOutcome, QosNormalizer};
use super::workload::{spawn_tasks, SimConfig};
use crate::seed::SeedSplitter;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Which per-entity features the observable state exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// cpu, ram, disk utilization (n = 3).
    Basic,
    /// Basic plus overload excess for hosts / progress features for tasks
    /// (n = 5).
    Extended,
}

impl FeatureMode {
    pub fn n(&self) -> usize {
        match self {
            FeatureMode::Basic => 3,
            FeatureMode::Extended => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMode::Basic => "basic",
            FeatureMode::Extended => "extended",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "basic" => Some(FeatureMode::Basic),
            "extended" => Some(FeatureMode::Extended),
            _ => None,
        }
    }
}

/// Observable system state at the start of an interval: n features for each
/// of the m hosts and p active tasks, plus the identity/placement metadata
/// needed to align rows across intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateObs {
    pub t: usize,
    pub m: usize,
    pub n: usize,
    /// Row-major `(m + p) x n`: host rows first, then task rows.
    pub rows: Vec<f64>,
    pub task_ids: Vec<u64>,
    /// Current placement per task row; `None` for tasks not yet placed.
    pub placements: Vec<Option<usize>>,
    pub profiles: Vec<TaskProfile>,
}

impl StateObs {
    pub fn task_count(&self) -> usize {
        self.task_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    /// Host utilization triple from the first 3 features of a host row.
    pub fn host_util(&self, h: usize) -> Resources {
        let r = self.row(h);
        Resources::new(r[0], r[1], r[2])
    }
}

/// Builds the observable state matrix for the current cluster state.
pub fn observe(state: &ClusterState, cfg: &SimConfig, mode: FeatureMode) -> StateObs {
    let n = mode.n();
    let m = state.hosts.len();
    let util = state.host_utilization(cfg.burst.factor);
    let refcap = cfg.reference_capacity();
    let mut rows = Vec::with_capacity((m + state.tasks.len()) * n);
    for u in &util {
        rows.push(u.cpu);
        rows.push(u.ram);
        rows.push(u.disk);
        if mode == FeatureMode::Extended {
            rows.push((u.cpu - 1.0).max(0.0));
            rows.push((u.max_component() - 1.0).max(0.0));
        }
    }
    let mut task_ids = Vec::with_capacity(state.tasks.len());
    let mut placements = Vec::with_capacity(state.tasks.len());
    let mut profiles = Vec::with_capacity(state.tasks.len());
    for task in &state.tasks {
        let d = task.demand(cfg.burst.factor);
        rows.push(d.cpu / refcap.cpu);
        rows.push(d.ram / refcap.ram);
        rows.push(d.disk / refcap.disk);
        if mode == FeatureMode::Extended {
            rows.push(task.remaining_work / task.spec.total_work);
            rows.push(if task.host.is_none() { 1.0 } else { 0.0 });
        }
        task_ids.push(task.spec.id);
        placements.push(task.host);
        profiles.push(task.spec.profile);
    }
    StateObs {
        t: state.t,
        m,
        n,
        rows,
        task_ids,
        placements,
        profiles,
    }
}

/// Stateful single-interval oracle: wraps the pure stepping function with
/// the utilization history needed for ground-truth labels and the ART
/// normalization caps. `fork` yields an independent copy for hypothetical
/// queries.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub cfg: SimConfig,
    pub splitter: SeedSplitter,
    labeler: GroundTruthLabeler,
    pub normalizer: QosNormalizer,
}

impl Simulator {
    pub fn new(cfg: SimConfig, splitter: SeedSplitter) -> Result<(Simulator, ClusterState), SimError> {
        let hosts = cfg.build_hosts()?;
        let state = ClusterState::new(hosts);
        let labeler = GroundTruthLabeler::new(cfg.label_window, cfg.label_kappa, cfg.label_cap);
        let normalizer = QosNormalizer::new(
            cfg.art_warmup,
            cfg.fleet_peak_power(),
            cfg.interval_seconds,
        );
        Ok((
            Simulator {
                cfg,
                splitter,
                labeler,
                normalizer,
            },
            state,
        ))
    }

    /// Records the initial utilization snapshot as labeling baseline.
    pub fn seed_label_history(&mut self, state: &ClusterState) {
        self.labeler
            .push(state.host_utilization(self.cfg.burst.factor));
    }

    /// Executes one interval for real: advances normalization caps and the
    /// labeling history.
    pub fn step(
        &mut self,
        state: &ClusterState,
        schedule: &ScheduleMatrix,
    ) -> Result<(ClusterState, IntervalOutcome), SimError> {
        let stats = advance_interval(state, schedule, &self.cfg, &self.splitter)?;
        self.normalizer.observe(stats.art_raw);
        let util_next = stats.state.host_utilization(self.cfg.burst.factor);
        let kinds = self.labeler.label_and_push(util_next.clone());
        Ok(self.assemble(state.t, stats, util_next, kinds))
    }

    /// Hypothetical step: same dynamics, but leaves this simulator's
    /// history and caps untouched.
    pub fn peek_step(
        &self,
        state: &ClusterState,
        schedule: &ScheduleMatrix,
    ) -> Result<(ClusterState, IntervalOutcome), SimError> {
        let stats = advance_interval(state, schedule, &self.cfg, &self.splitter)?;
        let util_next = stats.state.host_utilization(self.cfg.burst.factor);
        let mut labeler = self.labeler.clone();
        let kinds = labeler.label_and_push(util_next.clone());
        Ok(self.assemble(state.t, stats, util_next, kinds))
    }

    fn assemble(
        &self,
        t: usize,
        stats: super::step::StepStats,
        util_next: Vec<Resources>,
        kinds: Vec<FaultKinds>,
    ) -> (ClusterState, IntervalOutcome) {
        let outcome = IntervalOutcome {
            t,
            art_raw: stats.art_raw,
            art_norm: self.normalizer.normalize_art(stats.art_raw),
            aec_norm: stats.aec_norm,
            energy_ws: stats.energy_ws,
            completions: stats.completions,
            slo_violations: stats.slo_violations,
            migrations: stats.migrations,
            migration_time: stats.migration_time,
            fault_flags: kinds.iter().map(|k| k.any()).collect(),
            fault_kinds: kinds,
            util_next,
        };
        (stats.state, outcome)
    }

    pub fn fork(&self) -> Simulator {
        self.clone()
    }
}

/// Inputs a policy sees when asked for a decision.
pub struct DecisionContext<'a> {
    pub t: usize,
    pub obs: &'a StateObs,
    pub obs_history: &'a [StateObs],
    pub state: &'a ClusterState,
    pub sim: &'a Simulator,
    pub lambda: f64,
    pub feature_mode: FeatureMode,
}

/// A scheduling policy: maps the current context to a one-hot placement
/// matrix with one row per active task.
pub trait Policy {
    fn name(&self) -> &'static str;
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<ScheduleMatrix, SimError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub m: usize,
    pub n: usize,
    pub label_window: usize,
    pub t_intervals: usize,
    pub seed: u64,
    pub lambda: f64,
    pub interval_seconds: f64,
    pub feature_mode: FeatureMode,
    pub profiles: Vec<String>,
    pub art_cap: f64,
    pub fleet_peak_power: f64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord {
    pub t: usize,
    pub obs: StateObs,
    /// Executed decision: target host per task row of `obs`.
    pub targets: Vec<usize>,
    pub outcome: IntervalOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub meta: EpisodeMeta,
    pub records: Vec<IntervalRecord>,
}

/// Runs `t_intervals` scheduling intervals: spawn, decide, step, label.
pub fn run_episode(
    cfg: &SimConfig,
    lambda: f64,
    t_intervals: usize,
    feature_mode: FeatureMode,
    seed: u64,
    policy: &mut dyn Policy,
) -> Result<EpisodeLog, SimError> {
    let splitter = SeedSplitter::new(seed);
    let (mut sim, mut state) = Simulator::new(cfg.clone(), splitter)?;
    let mut records = Vec::with_capacity(t_intervals);
    let mut obs_history: Vec<StateObs> = Vec::with_capacity(t_intervals);
    for t in 0..t_intervals {
        let mut rng = splitter.stream("spawn", t as u64, 0);
        let new = spawn_tasks(lambda, t, state.spawned_total, cfg, &mut rng)?;
        state.spawned_total += new.len() as u64;
        state.tasks.extend(new.into_iter().map(TaskState::new));
        advance_bursts(&mut state, &splitter, &cfg.burst);
        if t == 0 {
            sim.seed_label_history(&state);
        }
        let obs = observe(&state, cfg, feature_mode);
        obs_history.push(obs.clone());
        let schedule = {
            let ctx = DecisionContext {
                t,
                obs: &obs,
                obs_history: &obs_history,
                state: &state,
                sim: &sim,
                lambda,
                feature_mode,
            };
            policy.decide(&ctx)?
        };
        if schedule.tasks != state.tasks.len() || schedule.hosts != state.hosts.len() {
            return Err(SimError::SchedulerAbort {
                t,
                reason: format!(
                    "policy {} returned {}x{} matrix for {} tasks on {} hosts",
                    policy.name(),
                    schedule.tasks,
                    schedule.hosts,
                    state.tasks.len(),
                    state.hosts.len()
                ),
            });
        }
        let targets = schedule.targets();
        let (next, outcome) = sim.step(&state, &schedule)?;
        records.push(IntervalRecord {
            t,
            obs,
            targets,
            outcome,
        });
        state = next;
    }
    let meta = EpisodeMeta {
        m: cfg.hosts,
        n: feature_mode.n(),
        label_window: cfg.label_window,
        t_intervals,
        seed,
        lambda,
        interval_seconds: cfg.interval_seconds,
        feature_mode,
        profiles: TaskProfile::ALL.iter().map(|p| p.name().to_string()).collect(),
        art_cap: sim.normalizer.art_cap,
        fleet_peak_power: sim.normalizer.fleet_peak_power,
        policy: policy.name().to_string(),
    };
    Ok(EpisodeLog { meta, records })
}

fn push_f64(out: &mut String, v: f64) {
    // Rust's shortest round-trip float formatting keeps reload bit-exact.
    let _ = write!(out, ",{v}");
}

impl EpisodeLog {
    /// Serializes to `dir/meta` (key=value text) and `dir/trace.csv` (one
    /// row per interval; layout documented in the README).
    pub fn save(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        let m = &self.meta;
        let meta_text = format!(
            "m={}\nn={}\nlabel_window={}\nT={}\nseed={}\nlambda={}\ninterval_seconds={}\nfeature_mode={}\nprofiles={}\nart_cap={}\nfleet_peak_power={}\npolicy={}\n",
            m.m,
            m.n,
            m.label_window,
            m.t_intervals,
            m.seed,
            m.lambda,
            m.interval_seconds,
            m.feature_mode.name(),
            m.profiles.join(","),
            m.art_cap,
            m.fleet_peak_power,
            m.policy,
        );
        std::fs::write(dir.join("meta"), meta_text)?;
        let mut csv = String::new();
        for r in &self.records {
            let p = r.obs.task_count();
            let mut line = format!("{},{}", r.t, p);
            for id in &r.obs.task_ids {
                let _ = write!(line, ",{id}");
            }
            for pl in &r.obs.placements {
                let v = pl.map(|h| h as i64).unwrap_or(-1);
                let _ = write!(line, ",{v}");
            }
            for pr in &r.obs.profiles {
                let _ = write!(line, ",{}", pr.index());
            }
            for v in &r.obs.rows {
                push_f64(&mut line, *v);
            }
            for &tgt in &r.targets {
                // one-hot flattened row per task
                for h in 0..self.meta.m {
                    let _ = write!(line, ",{}", if h == tgt { 1.0 } else { 0.0 });
                }
            }
            let o = &r.outcome;
            push_f64(&mut line, o.art_raw);
            push_f64(&mut line, o.art_norm);
            push_f64(&mut line, o.aec_norm);
            push_f64(&mut line, o.energy_ws);
            let _ = write!(
                line,
                ",{},{},{}",
                o.slo_violations, o.migrations, o.migration_time
            );
            let _ = write!(line, ",{}", o.completions.len());
            for c in &o.completions {
                let _ = write!(
                    line,
                    ",{},{},{},{}",
                    c.id,
                    c.profile.index(),
                    c.response_time,
                    u8::from(c.violated_slo)
                );
            }
            for f in &o.fault_flags {
                let _ = write!(line, ",{}", u8::from(*f));
            }
            for k in &o.fault_kinds {
                for b in k.as_array() {
                    let _ = write!(line, ",{}", u8::from(b));
                }
            }
            for u in &o.util_next {
                push_f64(&mut line, u.cpu);
                push_f64(&mut line, u.ram);
                push_f64(&mut line, u.disk);
            }
            csv.push_str(&line);
            csv.push('\n');
        }
        std::fs::write(dir.join("trace.csv"), csv)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<EpisodeLog, SimError> {
        let meta_text = std::fs::read_to_string(dir.join("meta"))?;
        let mut kv = std::collections::HashMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String, SimError> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| SimError::CorruptLog(format!("meta missing key {k}")))
        };
        let parse_err = |k: &str| SimError::CorruptLog(format!("meta: bad value for {k}"));
        let feature_mode = FeatureMode::from_name(&get("feature_mode")?)
            .ok_or_else(|| parse_err("feature_mode"))?;
        let meta = EpisodeMeta {
            m: get("m")?.parse().map_err(|_| parse_err("m"))?,
            n: get("n")?.parse().map_err(|_| parse_err("n"))?,
            label_window: get("label_window")?
                .parse()
                .map_err(|_| parse_err("label_window"))?,
            t_intervals: get("T")?.parse().map_err(|_| parse_err("T"))?,
            seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
            lambda: get("lambda")?.parse().map_err(|_| parse_err("lambda"))?,
            interval_seconds: get("interval_seconds")?
                .parse()
                .map_err(|_| parse_err("interval_seconds"))?,
            feature_mode,
            profiles: get("profiles")?.split(',').map(str::to_string).collect(),
            art_cap: get("art_cap")?.parse().map_err(|_| parse_err("art_cap"))?,
            fleet_peak_power: get("fleet_peak_power")?
                .parse()
                .map_err(|_| parse_err("fleet_peak_power"))?,
            policy: get("policy")?,
        };
        let csv = std::fs::read_to_string(dir.join("trace.csv"))?;
        let mut records = Vec::new();
        for (lineno, line) in csv.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let mut cur = Cursor {
                fields: &fields,
                pos: 0,
                lineno,
            };
            let t: usize = cur.next()?;
            let p: usize = cur.next()?;
            let task_ids: Vec<u64> = cur.take(p)?;
            let placements_raw: Vec<i64> = cur.take(p)?;
            let profile_idx: Vec<usize> = cur.take(p)?;
            let rows: Vec<f64> = cur.take((meta.m + p) * meta.n)?;
            let sched: Vec<f64> = cur.take(p * meta.m)?;
            let art_raw: f64 = cur.next()?;
            let art_norm: f64 = cur.next()?;
            let aec_norm: f64 = cur.next()?;
            let energy_ws: f64 = cur.next()?;
            let slo_violations: usize = cur.next()?;
            let migrations: usize = cur.next()?;
            let migration_time: f64 = cur.next()?;
            let ncomp: usize = cur.next()?;
            let mut completions = Vec::with_capacity(ncomp);
            for _ in 0..ncomp {
                let id: u64 = cur.next()?;
                let prof: usize = cur.next()?;
                let response_time: f64 = cur.next()?;
                let violated: u8 = cur.next()?;
                completions.push(super::cluster::CompletedTask {
                    id,
                    profile: TaskProfile::from_index(prof)
                        .ok_or_else(|| SimError::CorruptLog(format!("line {lineno}: bad profile")))?,
                    response_time,
                    completed_interval: t,
                    violated_slo: violated != 0,
                });
            }
            let flags_raw: Vec<u8> = cur.take(meta.m)?;
            let kinds_raw: Vec<u8> = cur.take(meta.m * 3)?;
            let util_raw: Vec<f64> = cur.take(meta.m * 3)?;
            let placements: Vec<Option<usize>> = placements_raw
                .iter()
                .map(|&v| if v < 0 { None } else { Some(v as usize) })
                .collect();
            let profiles: Vec<TaskProfile> = profile_idx
                .iter()
                .map(|&i| {
                    TaskProfile::from_index(i)
                        .ok_or_else(|| SimError::CorruptLog(format!("line {lineno}: bad profile")))
                })
                .collect::<Result<_, _>>()?;
            let obs = StateObs {
                t,
                m: meta.m,
                n: meta.n,
                rows,
                task_ids,
                placements,
                profiles,
            };
            let schedule = ScheduleMatrix::from_rows(p, meta.m, sched);
            let targets = schedule.targets();
            let fault_kinds: Vec<FaultKinds> = kinds_raw
                .chunks(3)
                .map(|c| FaultKinds::from_array([c[0] != 0, c[1] != 0, c[2] != 0]))
                .collect();
            let util_next: Vec<Resources> = util_raw
                .chunks(3)
                .map(|c| Resources::new(c[0], c[1], c[2]))
                .collect();
            records.push(IntervalRecord {
                t,
                obs,
                targets,
                outcome: IntervalOutcome {
                    t,
                    art_raw,
                    art_norm,
                    aec_norm,
                    energy_ws,
                    completions,
                    slo_violations,
                    migrations,
                    migration_time,
                    fault_flags: flags_raw.iter().map(|&f| f != 0).collect(),
                    fault_kinds,
                    util_next,
                },
            });
        }
        Ok(EpisodeLog { meta, records })
    }
}

struct Cursor<'a> {
    fields: &'a [&'a str],
    pos: usize,
    lineno: usize,
}

impl<'a> Cursor<'a> {
    fn next<T: std::str::FromStr>(&mut self) -> Result<T, SimError> {
        let f = self.fields.get(self.pos).ok_or_else(|| {
            SimError::CorruptLog(format!("line {}: truncated at field {}", self.lineno, self.pos))
        })?;
        self.pos += 1;
        f.parse::<T>().map_err(|_| {
            SimError::CorruptLog(format!(
                "line {}: unparsable field {} ({f})",
                self.lineno,
                self.pos - 1
            ))
        })
    }

    fn take<T: std::str::FromStr>(&mut self, count: usize) -> Result<Vec<T>, SimError> {
        (0..count).map(|_| self.next()).collect()
    }
}
