use super::cluster::{
    ClusterState, CompletedTask, Resources, ScheduleMatrix, SimError, TaskProfile,
};
use super::labels::FaultKinds;
use super::workload::SimConfig;
use crate::seed::SeedSplitter;
use serde::{Deserialize, Serialize};

/// Everything measured while executing one scheduling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalOutcome {
    pub t: usize,
    /// Mean response time of tasks completing in the interval, seconds
    /// (0 when nothing completed).
    pub art_raw: f64,
    /// ART normalized to [0, 1] by the episode's (warmup-frozen) cap.
    pub art_norm: f64,
    /// Energy normalized by fleet peak power, in [0, 1].
    pub aec_norm: f64,
    /// Total energy drawn in the interval, watt seconds.
    pub energy_ws: f64,
    pub completions: Vec<CompletedTask>,
    pub slo_violations: usize,
    pub migrations: usize,
    pub migration_time: f64,
    /// Ground-truth contention flags of the *next* state (one per host).
    pub fault_flags: Vec<bool>,
    pub fault_kinds: Vec<FaultKinds>,
    /// Host utilization snapshot of the next state (labeling input).
    pub util_next: Vec<Resources>,
}

/// Effective per-host slowdown: every resident task progresses at
/// `min_r min(1, capacity_r / demand_r)` of its base rate. Monotone in
/// added demand.
pub fn contention_slowdown(demand: &Resources, capacity: &Resources) -> f64 {
    let per_resource = [
        (capacity.cpu / demand.cpu.max(f64::MIN_POSITIVE)).min(1.0),
        (capacity.ram / demand.ram.max(f64::MIN_POSITIVE)).min(1.0),
        (capacity.disk / demand.disk.max(f64::MIN_POSITIVE)).min(1.0),
    ];
    per_resource.iter().cloned().fold(1.0, f64::min)
}

/// QoS of an interval: `1 - alpha * ART - beta * AEC` on normalized terms.
pub fn compute_qos(outcome: &IntervalOutcome, alpha: f64, beta: f64) -> Result<f64, SimError> {
    if alpha < 0.0 || beta < 0.0 || alpha + beta > 1.0 + 1e-12 {
        return Err(SimError::BadParameter(format!(
            "qos weights must be nonnegative with alpha + beta <= 1 (got {alpha}, {beta})"
        )));
    }
    Ok(1.0 - alpha * outcome.art_norm - beta * outcome.aec_norm)
}

/// Jain's fairness index `(sum x)^2 / (n * sum x^2)`.
pub fn jain_fairness(values: &[f64]) -> Result<f64, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptyInput("jain_fairness"));
    }
    if values.iter().any(|&v| v <= 0.0) {
        return Err(SimError::BadParameter(
            "jain_fairness requires positive values".into(),
        ));
    }
    let s: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|v| v * v).sum();
    Ok(s * s / (values.len() as f64 * sq))
}

/// ART normalization cap: running maximum during a warmup prefix, then
/// frozen for the rest of the episode so QoS stays comparable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QosNormalizer {
    pub warmup: usize,
    pub seen: usize,
    pub art_cap: f64,
    pub fleet_peak_power: f64,
}

impl QosNormalizer {
    pub fn new(warmup: usize, fleet_peak_power: f64, interval_seconds: f64) -> Self {
        QosNormalizer {
            warmup,
            seen: 0,
            // floor at one interval so early ART values stay in range
            art_cap: interval_seconds,
            fleet_peak_power,
        }
    }

    pub fn normalize_art(&self, art_raw: f64) -> f64 {
        (art_raw / self.art_cap).clamp(0.0, 1.0)
    }

    pub fn observe(&mut self, art_raw: f64) {
        if self.seen < self.warmup {
            self.art_cap = self.art_cap.max(art_raw);
        }
        self.seen += 1;
    }
}

/// Result of advancing the cluster by one interval, before ground-truth
/// labeling is attached.
pub(crate) struct StepStats {
    pub state: ClusterState,
    pub art_raw: f64,
    pub energy_ws: f64,
    pub aec_norm: f64,
    pub completions: Vec<CompletedTask>,
    pub slo_violations: usize,
    pub migrations: usize,
    pub migration_time: f64,
}

/// Advances `state` through interval `state.t` under `schedule`.
///
/// Semantics: new tasks are placed at their target for free; an existing
/// task whose target differs from its placement migrates, losing
/// `migration_downtime` of the interval's progress and counting its demand
/// against both hosts for the interval. Per-host throughput degrades by the
/// contention slowdown; a tasks's progress is its base CPU demand times its
/// host's slowdown. Burst state for interval `t` must already be advanced.
pub(crate) fn advance_interval(
    state: &ClusterState,
    schedule: &ScheduleMatrix,
    cfg: &SimConfig,
    splitter: &SeedSplitter,
) -> Result<StepStats, SimError> {
    if schedule.tasks != state.tasks.len() {
        return Err(SimError::ScheduleRowMismatch {
            got: schedule.tasks,
            want: state.tasks.len(),
        });
    }
    if !schedule.is_one_hot() {
        let bad = (0..schedule.tasks)
            .find(|&i| {
                let row = schedule.row(i);
                row.iter().filter(|&&v| v == 1.0).count() != 1
                    || row.iter().filter(|&&v| v == 0.0).count() != schedule.hosts - 1
            })
            .unwrap_or(0);
        return Err(SimError::ScheduleNotOneHot { row: bad });
    }
    let t = state.t;
    let targets = schedule.targets();
    let m = state.hosts.len();

    // Demand accounting with migration double-counting.
    let mut demand = vec![Resources::zero(); m];
    let mut migrating = vec![false; state.tasks.len()];
    let mut migrations = 0;
    for (i, task) in state.tasks.iter().enumerate() {
        let d = task.demand(cfg.burst.factor);
        match task.host {
            Some(current) if current != targets[i] => {
                migrating[i] = true;
                migrations += 1;
                demand[current].add(&d);
                demand[targets[i]].add(&d);
            }
            _ => demand[targets[i]].add(&d),
        }
    }
    let slowdown: Vec<f64> = demand
        .iter()
        .zip(&state.hosts)
        .map(|(d, h)| contention_slowdown(d, &h.capacity))
        .collect();

    // Energy: linear power on clipped CPU utilization during the interval.
    let mut energy_ws = 0.0;
    for (h, host) in state.hosts.iter().enumerate() {
        let cpu_util = demand[h].cpu / host.capacity.cpu;
        energy_ws += host.power(cpu_util) * cfg.interval_seconds;
    }
    let fleet_peak: f64 = state.hosts.iter().map(|h| h.power_peak).sum();
    let aec_norm = energy_ws / (fleet_peak * cfg.interval_seconds);

    // Progress, completions, survivor bookkeeping.
    let mut next = ClusterState {
        t: t + 1,
        hosts: state.hosts.clone(),
        tasks: Vec::with_capacity(state.tasks.len()),
        completed: state.completed.clone(),
        spawned_total: state.spawned_total,
    };
    let mut completions = Vec::new();
    let mut slo_violations = 0;
    let mut response_times = Vec::new();
    for (i, task) in state.tasks.iter().enumerate() {
        let target = targets[i];
        let mut progress = task.spec.demand.cpu * slowdown[target];
        if migrating[i] {
            progress *= 1.0 - cfg.migration_downtime;
        }
        if progress >= task.remaining_work && progress > 0.0 {
            let frac = (task.remaining_work / progress).clamp(0.0, 1.0);
            let response =
                ((t - task.spec.arrival_interval) as f64 + frac) * cfg.interval_seconds;
            let violated = response > task.spec.slo_deadline;
            if violated {
                slo_violations += 1;
            }
            response_times.push(response);
            let done = CompletedTask {
                id: task.spec.id,
                profile: task.spec.profile,
                response_time: response,
                completed_interval: t,
                violated_slo: violated,
            };
            completions.push(done.clone());
            next.completed.push(done);
        } else {
            let mut survivor = task.clone();
            survivor.host = Some(target);
            survivor.remaining_work = (task.remaining_work - progress).max(0.0);
            next.tasks.push(survivor);
        }
    }
    // Survivor burst states advance to the next interval so the t+1 snapshot
    // is fully determined before new arrivals.
    advance_bursts(&mut next, splitter, &cfg.burst);

    let art_raw = if response_times.is_empty() {
        0.0
    } else {
        response_times.iter().sum::<f64>() / response_times.len() as f64
    };
    let migration_time = migrations as f64 * cfg.migration_downtime * cfg.interval_seconds;
    Ok(StepStats {
        state: next,
        art_raw,
        energy_ws,
        aec_norm,
        completions,
        slo_violations,
        migrations,
        migration_time,
    })
}

/// Applies burst coins up to `state.t` for every task. Coins are keyed by
/// (task id, interval), so outcomes do not depend on placement history and
/// stay identical across diverging policy trajectories.
pub(crate) fn advance_bursts(
    state: &mut ClusterState,
    splitter: &SeedSplitter,
    burst: &super::workload::BurstConfig,
) {
    let t = state.t;
    for task in state.tasks.iter_mut() {
        while task.burst_interval < t {
            task.burst_interval += 1;
            let coin = splitter.coin("burst", task.spec.id, task.burst_interval as u64);
            if task.bursting {
                if coin < burst.p_off {
                    task.bursting = false;
                }
            } else if coin < burst.p_on {
                task.bursting = true;
            }
        }
    }
}

/// Per-profile percentile used for SLO calibration.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Mean response time per profile over a completed-task list; used by the
/// SLO calibration pass.
pub fn per_profile_percentile(completed: &[CompletedTask], q: f64) -> [f64; 3] {
    let mut out = [f64::INFINITY; 3];
    for profile in TaskProfile::ALL {
        let mut v: Vec<f64> = completed
            .iter()
            .filter(|c| c.profile == profile)
            .map(|c| c.response_time)
            .collect();
        if !v.is_empty() {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[profile.index()] = percentile(&v, q);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(art_norm: f64, aec_norm: f64) -> IntervalOutcome {
        IntervalOutcome {
            t: 0,
            art_raw: 0.0,
            art_norm,
            aec_norm,
            energy_ws: 0.0,
            completions: vec![],
            slo_violations: 0,
            migrations: 0,
            migration_time: 0.0,
            fault_flags: vec![],
            fault_kinds: vec![],
            util_next: vec![],
        }
    }

    #[test]
    fn qos_examples() {
        assert_eq!(compute_qos(&outcome(0.0, 0.0), 0.5, 0.5).unwrap(), 1.0);
        assert!((compute_qos(&outcome(0.4, 0.2), 0.5, 0.5).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(compute_qos(&outcome(1.0, 1.0), 0.5, 0.5).unwrap(), 0.0);
        assert!(compute_qos(&outcome(0.0, 0.0), 0.8, 0.5).is_err());
        assert!(compute_qos(&outcome(0.0, 0.0), -0.1, 0.5).is_err());
    }

    #[test]
    fn jain_examples() {
        assert_eq!(jain_fairness(&[2.0, 2.0, 2.0]).unwrap(), 1.0);
        assert!((jain_fairness(&[1.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(jain_fairness(&[]).is_err());
        // one dominant value: tends to 1/n
        let v = [1000.0, 1e-9, 1e-9, 1e-9];
        assert!((jain_fairness(&v).unwrap() - 0.25).abs() < 1e-3);
    }

    #[test]
    fn slowdown_monotone_in_demand() {
        let cap = Resources::new(100.0, 100.0, 100.0);
        let mut last = 1.0;
        for k in 1..12 {
            let d = Resources::new(20.0 * k as f64, 10.0, 10.0);
            let s = contention_slowdown(&d, &cap);
            assert!(s <= last + 1e-12);
            last = s;
        }
        assert_eq!(contention_slowdown(&Resources::new(50.0, 10.0, 5.0), &cap), 1.0);
        assert!((contention_slowdown(&Resources::new(200.0, 10.0, 5.0), &cap) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn percentile_is_deterministic() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&v, 1.0), 10.0);
        assert_eq!(percentile(&v, 0.05), 1.0);
    }
}
