use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("schedule has {got} rows but {want} tasks are active")]
    ScheduleRowMismatch { got: usize, want: usize },
    #[error("schedule row {row} is not one-hot")]
    ScheduleNotOneHot { row: usize },
    #[error("invalid host spec: {0}")]
    BadHostSpec(String),
    #[error("invalid task spec: {0}")]
    BadTaskSpec(String),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("undefined on empty input: {0}")]
    EmptyInput(&'static str),
    #[error("scheduler returned infeasible schedule at interval {t}: {reason}")]
    SchedulerAbort { t: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log: {0}")]
    CorruptLog(String),
}

/// Per-resource quantities (demand, capacity, or utilization).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Resources {
    pub cpu: f64,
    pub ram: f64,
    pub disk: f64,
}

impl Resources {
    pub fn new(cpu: f64, ram: f64, disk: f64) -> Self {
        Resources { cpu, ram, disk }
    }

    pub fn zero() -> Self {
        Resources::default()
    }

    pub fn add(&mut self, other: &Resources) {
        self.cpu += other.cpu;
        self.ram += other.ram;
        self.disk += other.disk;
    }

    pub fn scaled(&self, f: f64) -> Resources {
        Resources {
            cpu: self.cpu * f,
            ram: self.ram * f,
            disk: self.disk * f,
        }
    }

    /// Element-wise ratio self/denom.
    pub fn ratio(&self, denom: &Resources) -> Resources {
        Resources {
            cpu: self.cpu / denom.cpu,
            ram: self.ram / denom.ram,
            disk: self.disk / denom.disk,
        }
    }

    pub fn max_component(&self) -> f64 {
        self.cpu.max(self.ram).max(self.disk)
    }

    pub fn sum(&self) -> f64 {
        self.cpu + self.ram + self.disk
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.cpu, self.ram, self.disk]
    }

    pub fn non_negative(&self) -> bool {
        self.cpu >= 0.0 && self.ram >= 0.0 && self.disk >= 0.0
    }
}

/// Static description of one edge host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub id: usize,
    pub capacity: Resources,
    pub power_idle: f64,
    pub power_peak: f64,
}

impl HostSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.capacity.cpu <= 0.0 || self.capacity.ram <= 0.0 || self.capacity.disk <= 0.0 {
            return Err(SimError::BadHostSpec(format!(
                "host {}: capacities must be positive",
                self.id
            )));
        }
        if !(self.power_peak >= self.power_idle && self.power_idle > 0.0) {
            return Err(SimError::BadHostSpec(format!(
                "host {}: need peak >= idle > 0",
                self.id
            )));
        }
        Ok(())
    }

    /// Linear power model on clipped CPU utilization.
    pub fn power(&self, cpu_utilization: f64) -> f64 {
        self.power_idle + (self.power_peak - self.power_idle) * cpu_utilization.clamp(0.0, 1.0)
    }
}

/// Synthetic application profiles standing in for heterogeneous workloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskProfile {
    ComputeHeavy,
    MemoryHeavy,
    Balanced,
}

impl TaskProfile {
    pub const ALL: [TaskProfile; 3] = [
        TaskProfile::ComputeHeavy,
        TaskProfile::MemoryHeavy,
        TaskProfile::Balanced,
    ];

    pub fn index(&self) -> usize {
        match self {
            TaskProfile::ComputeHeavy => 0,
            TaskProfile::MemoryHeavy => 1,
            TaskProfile::Balanced => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<TaskProfile> {
        TaskProfile::ALL.get(i).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskProfile::ComputeHeavy => "compute_heavy",
            TaskProfile::MemoryHeavy => "memory_heavy",
            TaskProfile::Balanced => "balanced",
        }
    }
}

/// Immutable description of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub profile: TaskProfile,
    /// Compute units to finish; progress is measured in the same units.
    pub total_work: f64,
    /// Resource demand per interval at base (non-bursting) intensity.
    pub demand: Resources,
    pub arrival_interval: usize,
    pub slo_deadline: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.total_work <= 0.0 {
            return Err(SimError::BadTaskSpec(format!(
                "task {}: total_work must be positive",
                self.id
            )));
        }
        if !self.demand.non_negative() {
            return Err(SimError::BadTaskSpec(format!(
                "task {}: demand components must be >= 0",
                self.id
            )));
        }
        if self.slo_deadline <= 0.0 {
            return Err(SimError::BadTaskSpec(format!(
                "task {}: slo_deadline must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Runtime state of an active task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub spec: TaskSpec,
    /// Current host; `None` until first placement.
    pub host: Option<usize>,
    pub remaining_work: f64,
    pub bursting: bool,
    /// Last interval whose burst coin has been applied.
    pub burst_interval: usize,
}

impl TaskState {
    pub fn new(spec: TaskSpec) -> Self {
        let arrival = spec.arrival_interval;
        TaskState {
            remaining_work: spec.total_work,
            spec,
            host: None,
            bursting: false,
            burst_interval: arrival,
        }
    }

    /// Demand the task currently imposes (burst-inflated when bursting).
    pub fn demand(&self, burst_factor: f64) -> Resources {
        if self.bursting {
            self.spec.demand.scaled(burst_factor)
        } else {
            self.spec.demand
        }
    }
}

/// A finished task with its measured response time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedTask {
    pub id: u64,
    pub profile: TaskProfile,
    pub response_time: f64,
    pub completed_interval: usize,
    pub violated_slo: bool,
}

/// Ground truth of hosts and tasks at an interval boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub t: usize,
    pub hosts: Vec<HostSpec>,
    pub tasks: Vec<TaskState>,
    pub completed: Vec<CompletedTask>,
    pub spawned_total: u64,
}

impl ClusterState {
    pub fn new(hosts: Vec<HostSpec>) -> Self {
        ClusterState {
            t: 0,
            hosts,
            tasks: Vec::new(),
            completed: Vec::new(),
            spawned_total: 0,
        }
    }

    pub fn host_count(&self) -> usize {
        self.hosts.len()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Aggregate demand placed on each host (unplaced tasks contribute
    /// nothing), given the burst factor in effect.
    pub fn host_demand(&self, burst_factor: f64) -> Vec<Resources> {
        let mut load = vec![Resources::zero(); self.hosts.len()];
        for task in &self.tasks {
            if let Some(h) = task.host {
                load[h].add(&task.demand(burst_factor));
            }
        }
        load
    }

    /// Per-host utilization: aggregate demand over capacity, may exceed 1.
    pub fn host_utilization(&self, burst_factor: f64) -> Vec<Resources> {
        self.host_demand(burst_factor)
            .iter()
            .zip(&self.hosts)
            .map(|(d, h)| d.ratio(&h.capacity))
            .collect()
    }
}

/// Placement decision: one row per active task over m hosts. Rows are
/// one-hot for executable decisions and row-stochastic during relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMatrix {
    pub tasks: usize,
    pub hosts: usize,
    /// Row-major `tasks x hosts`.
    pub rows: Vec<f64>,
}

impl ScheduleMatrix {
    pub fn from_targets(targets: &[usize], hosts: usize) -> Self {
        let mut rows = vec![0.0; targets.len() * hosts];
        for (i, &h) in targets.iter().enumerate() {
            assert!(h < hosts, "target host out of range");
            rows[i * hosts + h] = 1.0;
        }
        ScheduleMatrix {
            tasks: targets.len(),
            hosts,
            rows,
        }
    }

    pub fn from_rows(tasks: usize, hosts: usize, rows: Vec<f64>) -> Self {
        assert_eq!(rows.len(), tasks * hosts);
        ScheduleMatrix { tasks, hosts, rows }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.hosts..(i + 1) * self.hosts]
    }

    /// Argmax host per row; ties resolve to the lowest host index.
    pub fn targets(&self) -> Vec<usize> {
        (0..self.tasks)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for j in 1..self.hosts {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_one_hot(&self) -> bool {
        (0..self.tasks).all(|i| {
            let row = self.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            ones == 1 && zeros == self.hosts - 1
        })
    }

    pub fn rows_stochastic(&self, tol: f64) -> bool {
        (0..self.tasks).all(|i| {
            let row = self.row(i);
            row.iter().all(|&v| (-tol..=1.0 + tol).contains(&v))
                && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_roundtrip() {
        let s = ScheduleMatrix::from_targets(&[2, 0, 1], 3);
        assert!(s.is_one_hot());
        assert!(s.rows_stochastic(1e-12));
        assert_eq!(s.targets(), vec![2, 0, 1]);
    }

    #[test]
    fn utilization_aggregates_resident_tasks() {
        let hosts = vec![
            HostSpec {
                id: 0,
                capacity: Resources::new(100.0, 100.0, 100.0),
                power_idle: 10.0,
                power_peak: 100.0,
            },
            HostSpec {
                id: 1,
                capacity: Resources::new(100.0, 100.0, 100.0),
                power_idle: 10.0,
                power_peak: 100.0,
            },
        ];
        let mut state = ClusterState::new(hosts);
        let mk = |id: u64, cpu: f64| TaskState {
            spec: TaskSpec {
                id,
                profile: TaskProfile::Balanced,
                total_work: 10.0,
                demand: Resources::new(cpu, 5.0, 5.0),
                arrival_interval: 0,
                slo_deadline: 1e9,
            },
            host: Some(0),
            remaining_work: 10.0,
            bursting: false,
            burst_interval: 0,
        };
        state.tasks.push(mk(1, 60.0));
        state.tasks.push(mk(2, 70.0));
        let util = state.host_utilization(2.0);
        assert!((util[0].cpu - 1.3).abs() < 1e-12, "contention exceeds 1");
        assert_eq!(util[1].cpu, 0.0);
    }

    #[test]
    fn bursting_scales_demand() {
        let spec = TaskSpec {
            id: 1,
            profile: TaskProfile::ComputeHeavy,
            total_work: 10.0,
            demand: Resources::new(10.0, 4.0, 2.0),
            arrival_interval: 0,
            slo_deadline: 100.0,
        };
        let mut task = TaskState::new(spec);
        assert_eq!(task.demand(1.8).cpu, 10.0);
        task.bursting = true;
        assert!((task.demand(1.8).cpu - 18.0).abs() < 1e-12);
    }

    #[test]
    fn power_is_linear_and_clipped() {
        let h = HostSpec {
            id: 0,
            capacity: Resources::new(100.0, 100.0, 100.0),
            power_idle: 20.0,
            power_peak: 120.0,
        };
        assert_eq!(h.power(0.0), 20.0);
        assert_eq!(h.power(0.5), 70.0);
        assert_eq!(h.power(1.0), 120.0);
        assert_eq!(h.power(1.7), 120.0);
    }
}
