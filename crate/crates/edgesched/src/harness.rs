//! Experiment orchestration: seed handling, SLO calibration, instrumented
//! episodes with a side-by-side reference comparison, metric bundles, file
//! outputs, and the workload-intensity sweep.

use crate::detect::fault_label;
use crate::metrics::{
    detection_metrics, diagnosis_metrics, improvement_ratio, qos_suite, DetectionReport,
    MetricsError, QosSuite,
};
use crate::sched::{
    GobiRefPolicy, ModelPolicy, OnlineConfig, OptConfig, RandomPolicy, ReactiveThresholdPolicy,
    SchedError,
};
use crate::sim::{
    compute_qos, per_profile_percentile, run_episode, DecisionContext, EpisodeLog, FeatureMode,
    Policy, ScheduleMatrix, SimConfig, SimError,
};
use crate::telemetry::{build_window, Dataset, TelemetryError};
use crate::train::{
    load_checkpoint, train_offline, Checkpoint, TrainConfig, TrainError, TrainResult,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("sim: {0}")]
    Sim(#[from] SimError),
    #[error("sched: {0}")]
    Sched(#[from] SchedError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("telemetry: {0}")]
    Telemetry(#[from] TelemetryError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("model: {0}")]
    Model(#[from] crate::surrogate::ModelError),
    #[error("detect: {0}")]
    Detect(#[from] crate::detect::DetectError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing checkpoint: the '{0}' policy needs --checkpoint")]
    MissingCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Random,
    ReactiveThreshold,
    GobiRef,
    Model,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::ReactiveThreshold => "reactive_threshold",
            PolicyKind::GobiRef => "gobi_ref",
            PolicyKind::Model => "deepsched",
        }
    }

    pub fn from_name(s: &str) -> Option<PolicyKind> {
        match s {
            "random" => Some(PolicyKind::Random),
            "reactive_threshold" | "reactive" => Some(PolicyKind::ReactiveThreshold),
            "gobi_ref" | "gobi" => Some(PolicyKind::GobiRef),
            "deepsched" | "model" => Some(PolicyKind::Model),
            _ => None,
        }
    }
}

/// Everything one experiment needs; flags, config-file keys, and env
/// overrides all map onto these fields 1:1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub m: usize,
    pub k: usize,
    pub t_intervals: usize,
    pub lambda: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub policy: PolicyKind,
    pub feature_mode: FeatureMode,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub opt: OptConfig,
    pub online: OnlineConfig,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Skip the reference-policy comparison (faster, drops improvement
    /// ratio and overhead ratio from the summary).
    pub compare_reference: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            m: 8,
            k: 5,
            t_intervals: 100,
            lambda: 5.0,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            policy: PolicyKind::Random,
            feature_mode: FeatureMode::Basic,
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            opt: OptConfig::default(),
            online: OnlineConfig::default(),
            checkpoint: None,
            out_dir: None,
            compare_reference: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.m == 0 || self.t_intervals == 0 {
            return Err(HarnessError::Config("m and t must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(HarnessError::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }

    /// Sets a field from a flat `key=value` pair (config file and env
    /// override format). Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad = |k: &str, v: &str| HarnessError::Config(format!("bad value for {k}: {v}"));
        match key {
            "m" => self.m = value.parse().map_err(|_| bad(key, value))?,
            "k" => self.k = value.parse().map_err(|_| bad(key, value))?,
            "t" | "t_intervals" => {
                self.t_intervals = value.parse().map_err(|_| bad(key, value))?
            }
            "lambda" => self.lambda = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad(key, value))?,
            "beta" => self.beta = value.parse().map_err(|_| bad(key, value))?,
            "policy" => {
                self.policy =
                    PolicyKind::from_name(value).ok_or_else(|| bad(key, value))?
            }
            "feature_mode" => {
                self.feature_mode =
                    FeatureMode::from_name(value).ok_or_else(|| bad(key, value))?
            }
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "compare_reference" => {
                self.compare_reference = value.parse().map_err(|_| bad(key, value))?
            }
            "interval_seconds" => {
                self.sim.interval_seconds = value.parse().map_err(|_| bad(key, value))?
            }
            "burst_p_on" => self.sim.burst.p_on = value.parse().map_err(|_| bad(key, value))?,
            "burst_factor" => {
                self.sim.burst.factor = value.parse().map_err(|_| bad(key, value))?
            }
            "migration_downtime" => {
                self.sim.migration_downtime = value.parse().map_err(|_| bad(key, value))?
            }
            "learning_rate" => {
                self.train.learning_rate = value.parse().map_err(|_| bad(key, value))?
            }
            "weight_decay" => {
                self.train.weight_decay = value.parse().map_err(|_| bad(key, value))?
            }
            "fault_classes" => {
                self.train.fault_classes = value.parse().map_err(|_| bad(key, value))?
            }
            "max_epochs" => self.train.max_epochs = value.parse().map_err(|_| bad(key, value))?,
            "patience" => self.train.patience = value.parse().map_err(|_| bad(key, value))?,
            "hidden" => self.train.hidden = value.parse().map_err(|_| bad(key, value))?,
            "proto_dim" => self.train.proto_dim = value.parse().map_err(|_| bad(key, value))?,
            "pot_risk" => self.train.pot.risk = value.parse().map_err(|_| bad(key, value))?,
            "pot_n_init" => self.train.pot.n_init = value.parse().map_err(|_| bad(key, value))?,
            "iterations" => self.opt.iterations = value.parse().map_err(|_| bad(key, value))?,
            "opt_learning_rate" => {
                self.opt.learning_rate = value.parse().map_err(|_| bad(key, value))?
            }
            "cosine_period" => {
                self.opt.cosine_period = value.parse().map_err(|_| bad(key, value))?
            }
            "fine_tune" => self.online.fine_tune = value.parse().map_err(|_| bad(key, value))?,
            "online_learning_rate" => {
                self.online.learning_rate = value.parse().map_err(|_| bad(key, value))?
            }
            _ => return Err(HarnessError::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines from a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), HarnessError> {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("bad config line: {line}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    fn sim_config(&self, slo_deadlines: [f64; 3]) -> SimConfig {
        let mut sim = self.sim.clone();
        sim.hosts = self.m;
        sim.label_window = self.k;
        sim.slo_deadlines = slo_deadlines;
        sim
    }
}

/// Runs the reference policy with open deadlines and returns the per-profile
/// 90th-percentile response times to use as SLO deadlines.
pub fn calibrate_slo(cfg: &ExperimentConfig) -> Result<[f64; 3], HarnessError> {
    let sim = cfg.sim_config([f64::INFINITY; 3]);
    let mut reference = GobiRefPolicy::new(cfg.alpha, cfg.beta);
    let log = run_episode(
        &sim,
        cfg.lambda,
        cfg.t_intervals,
        cfg.feature_mode,
        cfg.seed,
        &mut reference,
    )?;
    let completed: Vec<crate::sim::CompletedTask> = log
        .records
        .iter()
        .flat_map(|r| r.outcome.completions.clone())
        .collect();
    let mut p90 = per_profile_percentile(&completed, 0.9);
    // profiles unseen during calibration stay unconstrained
    for v in p90.iter_mut() {
        if !v.is_finite() {
            *v = f64::INFINITY;
        }
    }
    Ok(p90)
}

/// Per-interval comparison row produced while the instrumented episode runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRecord {
    pub t: usize,
    pub qos_policy: f64,
    pub qos_reference: f64,
    pub policy_seconds: f64,
    pub reference_seconds: f64,
}

/// Wraps a policy so every decision is timed and scored against the
/// reference scheduler's decision on the same state via the co-simulator.
struct InstrumentedPolicy<'p> {
    inner: &'p mut dyn Policy,
    reference: GobiRefPolicy,
    alpha: f64,
    beta: f64,
    compare: bool,
    records: Vec<CompareRecord>,
}

impl<'p> Policy for InstrumentedPolicy<'p> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<ScheduleMatrix, SimError> {
        let start = Instant::now();
        let decision = self.inner.decide(ctx)?;
        let policy_seconds = start.elapsed().as_secs_f64();
        if !self.compare {
            self.records.push(CompareRecord {
                t: ctx.t,
                qos_policy: 0.0,
                qos_reference: 0.0,
                policy_seconds,
                reference_seconds: 0.0,
            });
            return Ok(decision);
        }
        let start_ref = Instant::now();
        let ref_decision = self.reference.decide(ctx)?;
        let reference_seconds = start_ref.elapsed().as_secs_f64();
        let (_, outcome_policy) = ctx.sim.peek_step(ctx.state, &decision)?;
        let (_, outcome_ref) = ctx.sim.peek_step(ctx.state, &ref_decision)?;
        let qos_policy = compute_qos(&outcome_policy, self.alpha, self.beta)
            .map_err(|e| SimError::SchedulerAbort {
                t: ctx.t,
                reason: e.to_string(),
            })?;
        let qos_reference = compute_qos(&outcome_ref, self.alpha, self.beta).map_err(|e| {
            SimError::SchedulerAbort {
                t: ctx.t,
                reason: e.to_string(),
            }
        })?;
        self.records.push(CompareRecord {
            t: ctx.t,
            qos_policy,
            qos_reference,
            policy_seconds,
            reference_seconds,
        });
        Ok(decision)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosisScores {
    pub hitrate: f64,
    pub ndcg: f64,
}

/// The metrics bundle of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub m: usize,
    pub k: usize,
    pub t_intervals: usize,
    pub lambda: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub slo_deadlines: [f64; 3],
    pub qos: QosSuite,
    pub improvement_ratio: Option<f64>,
    /// Wall-clock decision-time ratio vs the reference; excluded from all
    /// determinism guarantees.
    pub overhead_ratio: Option<f64>,
    pub detection: Option<DetectionReport>,
    pub diagnosis: Option<DiagnosisScores>,
    pub ground_truth_fault_intervals: usize,
}

pub struct ExperimentOutput {
    pub summary: Summary,
    pub log: EpisodeLog,
    pub compare: Vec<CompareRecord>,
    pub detections: Vec<crate::sched::OnlineDetection>,
    pub trajectories: Vec<(usize, Vec<crate::sched::TrajectoryPoint>)>,
    pub attention: Vec<(usize, usize, Vec<f64>)>,
}

fn f64_csv(v: f64) -> String {
    format!("{v}")
}

/// Runs one full experiment: calibrate SLOs on the reference policy, run the
/// chosen policy on the identical workload, compute the metric bundle, and
/// write the output files when `out_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let slo = calibrate_slo(cfg)?;
    let sim = cfg.sim_config(slo);
    let mut model_policy: Option<ModelPolicy> = None;
    let mut random_policy;
    let mut reactive_policy;
    let mut gobi_policy;
    let inner: &mut dyn Policy = match cfg.policy {
        PolicyKind::Random => {
            random_policy = RandomPolicy::new(cfg.seed ^ 0x7061);
            &mut random_policy
        }
        PolicyKind::ReactiveThreshold => {
            reactive_policy = ReactiveThresholdPolicy::new();
            &mut reactive_policy
        }
        PolicyKind::GobiRef => {
            gobi_policy = GobiRefPolicy::new(cfg.alpha, cfg.beta);
            &mut gobi_policy
        }
        PolicyKind::Model => {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| HarnessError::MissingCheckpoint(cfg.policy.name().into()))?;
            let ckpt = load_checkpoint(path)?;
            model_policy = Some(ModelPolicy::new(
                ckpt,
                cfg.opt.clone(),
                cfg.online.clone(),
                cfg.seed ^ 0x6d70,
            ));
            model_policy.as_mut().unwrap()
        }
    };
    let mut instrumented = InstrumentedPolicy {
        inner,
        reference: GobiRefPolicy::new(cfg.alpha, cfg.beta),
        alpha: cfg.alpha,
        beta: cfg.beta,
        compare: cfg.compare_reference,
        records: Vec::new(),
    };
    let log = run_episode(
        &sim,
        cfg.lambda,
        cfg.t_intervals,
        cfg.feature_mode,
        cfg.seed,
        &mut instrumented,
    )?;
    let compare = instrumented.records;

    let qos = qos_suite(&log, cfg.alpha, cfg.beta)?;
    let (improvement, overhead) = if cfg.compare_reference {
        let qos_x: Vec<f64> = compare.iter().map(|c| c.qos_policy).collect();
        let qos_r: Vec<f64> = compare.iter().map(|c| c.qos_reference).collect();
        let ratio = improvement_ratio(&qos_x, &qos_r)?;
        let policy_time: f64 = compare.iter().map(|c| c.policy_seconds).sum();
        let ref_time: f64 = compare.iter().map(|c| c.reference_seconds).sum();
        let overhead = if ref_time > 0.0 {
            Some(policy_time / ref_time)
        } else {
            None
        };
        (Some(ratio), overhead)
    } else {
        (None, None)
    };

    let gt_any: Vec<bool> = log
        .records
        .iter()
        .map(|r| r.outcome.fault_flags.iter().any(|f| *f))
        .collect();
    let gt_fault_intervals = gt_any.iter().filter(|x| **x).count();

    let (detection, diagnosis, detections, trajectories, attention) = match &model_policy {
        Some(policy) => {
            let pred: Vec<bool> = policy.detections.iter().map(|d| d.label).collect();
            let report = detection_metrics(&pred, &gt_any)?;
            let rankings: Vec<Vec<usize>> =
                policy.detections.iter().map(|d| d.ranking.clone()).collect();
            let truths: Vec<Vec<bool>> = log
                .records
                .iter()
                .map(|r| r.outcome.fault_flags.clone())
                .collect();
            let (hitrate, ndcg) = diagnosis_metrics(&rankings, &truths)?;
            (
                Some(report),
                Some(DiagnosisScores { hitrate, ndcg }),
                policy.detections.clone(),
                policy.trajectories.clone(),
                policy.attention.clone(),
            )
        }
        None => (None, None, Vec::new(), Vec::new(), Vec::new()),
    };

    let summary = Summary {
        policy: cfg.policy.name().to_string(),
        m: cfg.m,
        k: cfg.k,
        t_intervals: cfg.t_intervals,
        lambda: cfg.lambda,
        seed: cfg.seed,
        alpha: cfg.alpha,
        beta: cfg.beta,
        slo_deadlines: slo,
        qos,
        improvement_ratio: improvement,
        overhead_ratio: overhead,
        detection,
        diagnosis,
        ground_truth_fault_intervals: gt_fault_intervals,
    };
    let out = ExperimentOutput {
        summary,
        log,
        compare,
        detections,
        trajectories,
        attention,
    };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

/// Writes `trace.csv`/`meta` (episode log), `metrics.csv`, `summary.json`,
/// `trajectory.csv`, `attention.csv`, and `timings.csv`. Wall-clock numbers
/// live only in `timings.csv` and the summary's overhead ratio, keeping
/// `metrics.csv` and the log bit-reproducible for a fixed config and seed.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    out.log.save(dir)?;
    let mut metrics = String::from(
        "t,p,qos,art_raw,art_norm,aec_norm,energy_ws,completions,slo_violations,migrations,migration_time,gt_fault,pred_fault,f_score,threshold,qos_reference,win\n",
    );
    for (i, rec) in out.log.records.iter().enumerate() {
        let o = &rec.outcome;
        let qos = compute_qos(o, 0.5, 0.5).unwrap_or(f64::NAN);
        let det = out.detections.get(i);
        let cmp = out.compare.get(i);
        let _ = writeln!(
            metrics,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rec.t,
            rec.obs.task_count(),
            f64_csv(qos),
            f64_csv(o.art_raw),
            f64_csv(o.art_norm),
            f64_csv(o.aec_norm),
            f64_csv(o.energy_ws),
            o.completions.len(),
            o.slo_violations,
            o.migrations,
            f64_csv(o.migration_time),
            u8::from(o.fault_flags.iter().any(|f| *f)),
            det.map(|d| u8::from(d.label)).unwrap_or(0),
            f64_csv(det.map(|d| d.f_score).unwrap_or(0.0)),
            f64_csv(det.map(|d| d.threshold).unwrap_or(0.0)),
            f64_csv(cmp.map(|c| c.qos_reference).unwrap_or(0.0)),
            u8::from(cmp.map(|c| c.qos_policy > c.qos_reference).unwrap_or(false)),
        );
    }
    std::fs::write(dir.join("metrics.csv"), metrics)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&out.summary)
            .map_err(|e| HarnessError::Config(e.to_string()))?,
    )?;
    let mut traj = String::from("t,iter,loss,nap_distance,class\n");
    for (t, points) in &out.trajectories {
        for p in points {
            let _ = writeln!(
                traj,
                "{},{},{},{},{}",
                t,
                p.iter,
                f64_csv(p.loss),
                f64_csv(p.nap_distance),
                p.class
            );
        }
    }
    std::fs::write(dir.join("trajectory.csv"), traj)?;
    let mut attn = String::from("t,entity,kind,weight\n");
    for (t, p, weights) in &out.attention {
        if *p == 0 {
            continue;
        }
        let entities = weights.len() / p;
        for e in 0..entities {
            // mean over task rows
            let mean: f64 =
                (0..*p).map(|i| weights[i * entities + e]).sum::<f64>() / *p as f64;
            let kind = if e < out.summary.m { "host" } else { "task" };
            let _ = writeln!(attn, "{t},{e},{kind},{}", f64_csv(mean));
        }
    }
    std::fs::write(dir.join("attention.csv"), attn)?;
    let mut timings = String::from("t,policy_seconds,reference_seconds\n");
    for c in &out.compare {
        let _ = writeln!(
            timings,
            "{},{},{}",
            c.t,
            f64_csv(c.policy_seconds),
            f64_csv(c.reference_seconds)
        );
    }
    std::fs::write(dir.join("timings.csv"), timings)?;
    Ok(())
}

/// Generates a training dataset: a random-policy episode folded into
/// normalized windows with a freshly fitted scaler.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, EpisodeLog), HarnessError> {
    cfg.validate()?;
    let sim = cfg.sim_config([f64::INFINITY; 3]);
    let mut policy = RandomPolicy::new(cfg.seed ^ 0x7061);
    let log = run_episode(
        &sim,
        cfg.lambda,
        cfg.t_intervals,
        cfg.feature_mode,
        cfg.seed,
        &mut policy,
    )?;
    let dataset = Dataset::from_episode(&log, cfg.k, None)?;
    Ok((dataset, log))
}

/// Trains offline and bundles the result into a checkpoint.
pub fn train_from_dataset(
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainResult), HarnessError> {
    let result = train_offline(dataset, cfg)?;
    let ckpt = Checkpoint {
        model: crate::surrogate::Model {
            cfg: result.model.cfg.clone(),
            params: result.model.params.clone(),
            bn_mean: result.model.bn_mean.clone(),
            bn_var: result.model.bn_var.clone(),
        },
        stats: result.stats.clone(),
        pot: result.pot.clone(),
        scaler: dataset.scaler.clone(),
    };
    Ok((ckpt, result))
}

/// Replays a logged episode through a checkpointed model: per-interval fault
/// scores against the actually-observed next window, POT labels continuing
/// from the checkpoint's state, and score-ranked host diagnosis.
pub fn evaluate_on_log(
    log: &EpisodeLog,
    ckpt: &Checkpoint,
) -> Result<(DetectionReport, DiagnosisScores), HarnessError> {
    let k = ckpt.model.cfg.k;
    let states: Vec<crate::sim::StateObs> = log.records.iter().map(|r| r.obs.clone()).collect();
    let mut pot = ckpt.pot.clone();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut rankings = Vec::new();
    let mut truth_sets = Vec::new();
    for i in 0..states.len().saturating_sub(1) {
        if states[i].task_count() == 0 {
            continue;
        }
        let raw = build_window(&states, i, k)?;
        let window = ckpt.scaler.normalize(&raw);
        let raw_next = build_window(&states, i + 1, k)?;
        let next_window = ckpt.scaler.normalize(&raw_next);
        let schedule = ScheduleMatrix::from_targets(&log.records[i].targets, log.meta.m);
        let mut tape = tapegrad::Tape::new();
        let binding = ckpt.model.bind(&mut tape, false)?;
        let ev = crate::train::eval_pair(
            &mut tape,
            &ckpt.model,
            &binding,
            &window,
            &schedule,
            &log.records[i].obs.placements,
            &next_window,
            crate::surrogate::Mode::Eval,
        )?;
        let threshold = pot.threshold();
        pred.push(pot.is_initialized() && fault_label(ev.f_score, threshold));
        pot.observe_init(ev.f_score);
        truth.push(log.records[i].outcome.fault_flags.iter().any(|f| *f));
        let thresholds = vec![f64::INFINITY; log.meta.m];
        let (ranking, _) = crate::detect::diagnose_hosts(&ev.per_host, &thresholds)?;
        rankings.push(ranking);
        truth_sets.push(log.records[i].outcome.fault_flags.clone());
    }
    let report = detection_metrics(&pred, &truth)?;
    let (hitrate, ndcg) = diagnosis_metrics(&rankings, &truth_sets)?;
    Ok((report, DiagnosisScores { hitrate, ndcg }))
}

/// Per-lambda sweep: each workload intensity runs the full experiment on
/// shared seeds; rows collect into a long-format table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub f1: f64,
    pub accuracy: f64,
    pub improvement_ratio: f64,
    pub energy_per_task_kwh: f64,
    pub slo_fraction: f64,
    pub mean_qos: f64,
}

pub fn sweep_lambda(
    base: &ExperimentConfig,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.lambda = lambda;
            cfg.seed = seed;
            cfg.out_dir = None;
            let out = run_experiment(&cfg)?;
            rows.push(SweepRow {
                lambda,
                seed,
                f1: out.summary.detection.map(|d| d.f1).unwrap_or(0.0),
                accuracy: out.summary.detection.map(|d| d.accuracy).unwrap_or(0.0),
                improvement_ratio: out.summary.improvement_ratio.unwrap_or(0.0),
                energy_per_task_kwh: out.summary.qos.energy_per_task_kwh,
                slo_fraction: out.summary.qos.slo_fraction,
                mean_qos: out.summary.qos.mean_qos,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut csv = String::from(
        "lambda,seed,f1,accuracy,improvement_ratio,energy_per_task_kwh,slo_fraction,mean_qos\n",
    );
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.lambda,
            r.seed,
            f64_csv(r.f1),
            f64_csv(r.accuracy),
            f64_csv(r.improvement_ratio),
            f64_csv(r.energy_per_task_kwh),
            f64_csv(r.slo_fraction),
            f64_csv(r.mean_qos)
        );
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Writes the per-epoch loss curves of an offline training run.
pub fn write_loss_curves(result: &TrainResult, path: &Path) -> Result<(), HarnessError> {
    let mut csv = String::from("epoch,train_recon,train_triplet,val_recon,detect_accuracy\n");
    for e in &result.curves {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            e.epoch,
            f64_csv(e.train_recon),
            f64_csv(e.train_triplet),
            f64_csv(e.val_recon),
            f64_csv(e.detect_accuracy)
        );
    }
    std::fs::write(path, csv)?;
    Ok(())
}
