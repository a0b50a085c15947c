use super::cluster::{HostSpec, Resources, SimError, TaskProfile, TaskSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Per-profile demand/duration shape. Demands are absolute units against a
/// reference capacity of 100 per resource.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfileShape {
    pub cpu: f64,
    pub ram: f64,
    pub disk: f64,
    /// Uniform duration range in intervals at full speed.
    pub duration_min: f64,
    pub duration_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BurstConfig {
    /// Per-interval probability that a calm task starts bursting.
    pub p_on: f64,
    /// Per-interval probability that a bursting task calms down.
    pub p_off: f64,
    /// Demand multiplier while bursting (progress stays at base rate).
    pub factor: f64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        BurstConfig {
            p_on: 0.08,
            p_off: 0.5,
            factor: 1.8,
        }
    }
}

/// Full simulator configuration: fleet, workload shapes, and cost model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub hosts: usize,
    pub interval_seconds: f64,
    /// Capacity of even-indexed hosts; odd-indexed hosts get
    /// `capacity * alt_capacity_scale` (heterogeneous fleet).
    pub base_capacity: f64,
    pub alt_capacity_scale: f64,
    pub power_idle: f64,
    pub power_peak: f64,
    pub profiles: [ProfileShape; 3],
    /// Multiplicative demand jitter: each resource scaled by
    /// U[1-jitter, 1+jitter] at spawn.
    pub demand_jitter: f64,
    pub burst: BurstConfig,
    /// Fraction of an interval's progress lost by a migrating task.
    pub migration_downtime: f64,
    /// Per-profile SLO deadlines in seconds (calibrated externally).
    pub slo_deadlines: [f64; 3],
    /// Ground-truth labeler: rolling window length.
    pub label_window: usize,
    /// Ground-truth labeler: std multiplier.
    pub label_kappa: f64,
    /// Ground-truth labeler: threshold floor (utilization).
    pub label_cap: f64,
    /// Intervals of ART normalization warmup before the cap freezes.
    pub art_warmup: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            hosts: 8,
            interval_seconds: 300.0,
            base_capacity: 100.0,
            alt_capacity_scale: 1.5,
            power_idle: 15.0,
            power_peak: 120.0,
            profiles: [
                // compute heavy
                ProfileShape {
                    cpu: 26.0,
                    ram: 10.0,
                    disk: 8.0,
                    duration_min: 3.0,
                    duration_max: 6.0,
                },
                // memory heavy
                ProfileShape {
                    cpu: 12.0,
                    ram: 26.0,
                    disk: 10.0,
                    duration_min: 2.0,
                    duration_max: 5.0,
                },
                // balanced
                ProfileShape {
                    cpu: 16.0,
                    ram: 16.0,
                    disk: 14.0,
                    duration_min: 2.0,
                    duration_max: 5.0,
                },
            ],
            demand_jitter: 0.2,
            burst: BurstConfig::default(),
            migration_downtime: 0.5,
            slo_deadlines: [f64::INFINITY; 3],
            label_window: 5,
            label_kappa: 3.0,
            label_cap: 0.9,
            art_warmup: 10,
        }
    }
}

impl SimConfig {
    pub fn build_hosts(&self) -> Result<Vec<HostSpec>, SimError> {
        if self.hosts == 0 {
            return Err(SimError::BadParameter("hosts must be >= 1".into()));
        }
        let mut out = Vec::with_capacity(self.hosts);
        for id in 0..self.hosts {
            let scale = if id % 2 == 1 {
                self.alt_capacity_scale
            } else {
                1.0
            };
            let cap = self.base_capacity * scale;
            let host = HostSpec {
                id,
                capacity: Resources::new(cap, cap, cap),
                power_idle: self.power_idle * scale.sqrt(),
                power_peak: self.power_peak * scale,
            };
            host.validate()?;
            out.push(host);
        }
        Ok(out)
    }

    /// Mean capacity per resource; reference scale for task-row features.
    pub fn reference_capacity(&self) -> Resources {
        let mean = self.base_capacity * (1.0 + self.alt_capacity_scale) / 2.0;
        Resources::new(mean, mean, mean)
    }

    pub fn fleet_peak_power(&self) -> f64 {
        (0..self.hosts)
            .map(|id| {
                if id % 2 == 1 {
                    self.power_peak * self.alt_capacity_scale
                } else {
                    self.power_peak
                }
            })
            .sum()
    }
}

/// Draws `Poisson(lambda)` new tasks for interval `t`, profiles sampled
/// uniformly from the three shapes.
pub fn spawn_tasks(
    lambda: f64,
    t: usize,
    next_id: u64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskSpec>, SimError> {
    if lambda < 0.0 {
        return Err(SimError::BadParameter("lambda must be >= 0".into()));
    }
    let count = if lambda == 0.0 {
        0
    } else {
        let dist = Poisson::new(lambda).map_err(|e| SimError::BadParameter(e.to_string()))?;
        dist.sample(rng) as usize
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let profile = TaskProfile::ALL[rng.gen_range(0..3)];
        let shape = cfg.profiles[profile.index()];
        let j = cfg.demand_jitter;
        let jit = |rng: &mut ChaCha8Rng| rng.gen_range(1.0 - j..=1.0 + j);
        let demand = Resources::new(
            shape.cpu * jit(rng),
            shape.ram * jit(rng),
            shape.disk * jit(rng),
        );
        let duration = rng.gen_range(shape.duration_min..shape.duration_max);
        let spec = TaskSpec {
            id: next_id + i as u64,
            profile,
            total_work: demand.cpu * duration,
            demand,
            arrival_interval: t,
            slo_deadline: cfg.slo_deadlines[profile.index()],
        };
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}
