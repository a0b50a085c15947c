//! Fault scoring from reconstruction error, extreme-value dynamic
//! thresholding, per-host diagnosis, and prototype-based fault
//! classification.

use crate::telemetry::StateWindow;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("threshold state not initialized (needs >= {needed} scores, got {got})")]
    NotInitialized { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Squared L2 norm of the upward deviation `relu(true - predicted)` between
/// two aligned flat windows, plus per-host partial scores. Only entities
/// present in both windows contribute; task-row error is attributed to the
/// task's host given by `hosts_of_rows`.
pub struct FaultScore {
    pub total: f64,
    pub per_host: Vec<f64>,
}

/// `w_true` and `w_hat` are `(m+p) x (n*k)` flat matrices over the same
/// entity order; `mask` marks rows to include; `hosts_of_rows[e]` maps each
/// row to the host charged with its error.
pub fn fault_score(
    w_true: &[f64],
    w_hat: &[f64],
    row_len: usize,
    row_mask: &[bool],
    hosts_of_rows: &[usize],
    m: usize,
) -> Result<FaultScore, DetectError> {
    if w_true.len() != w_hat.len() {
        return Err(DetectError::Shape(format!(
            "windows differ: {} vs {}",
            w_true.len(),
            w_hat.len()
        )));
    }
    if w_true.len() != row_mask.len() * row_len || row_mask.len() != hosts_of_rows.len() {
        return Err(DetectError::Shape(
            "mask/rows do not tile the window".into(),
        ));
    }
    let mut per_host = vec![0.0; m];
    let mut total = 0.0;
    for (row, (&keep, &host)) in row_mask.iter().zip(hosts_of_rows).enumerate() {
        if !keep {
            continue;
        }
        let mut acc = 0.0;
        for i in row * row_len..(row + 1) * row_len {
            let d = (w_true[i] - w_hat[i]).max(0.0);
            acc += d * d;
        }
        per_host[host] += acc;
        total += acc;
    }
    Ok(FaultScore { total, per_host })
}

/// Alignment of a predicted window's rows against the true next window:
/// which rows survive and where each row's true values live.
pub struct WindowAlignment {
    /// Flat target values, same layout as the prediction.
    pub target: Vec<f64>,
    /// Per-row inclusion (hosts always; tasks only when still alive).
    pub row_mask: Vec<bool>,
    /// Element mask (row mask expanded), for tape-side losses.
    pub elem_mask: Vec<f64>,
    /// Host charged with each row's error.
    pub hosts_of_rows: Vec<usize>,
}

/// Aligns the entities of `predicted_for` (the window the model consumed)
/// with `next` (the true subsequent window): host rows match by index, task
/// rows by id, departed tasks are masked out.
pub fn align_windows(
    predicted_for: &StateWindow,
    next: &StateWindow,
    placements: &[Option<usize>],
    targets: &[usize],
) -> Result<WindowAlignment, DetectError> {
    if predicted_for.m != next.m || predicted_for.n != next.n || predicted_for.k != next.k {
        return Err(DetectError::Shape(format!(
            "window dims differ: ({},{},{}) vs ({},{},{})",
            predicted_for.m, predicted_for.n, predicted_for.k, next.m, next.n, next.k
        )));
    }
    let m = predicted_for.m;
    let nk = predicted_for.n * predicted_for.k;
    let rows = predicted_for.entities();
    if placements.len() != predicted_for.p() || targets.len() != predicted_for.p() {
        return Err(DetectError::Shape(
            "placements/targets do not match task rows".into(),
        ));
    }
    let mut target = vec![0.0; rows * nk];
    let mut row_mask = vec![false; rows];
    let mut hosts_of_rows = vec![0usize; rows];
    for h in 0..m {
        target[h * nk..(h + 1) * nk].copy_from_slice(&next.data[h * nk..(h + 1) * nk]);
        row_mask[h] = true;
        hosts_of_rows[h] = h;
    }
    for (i, id) in predicted_for.task_ids.iter().enumerate() {
        let row = m + i;
        hosts_of_rows[row] = placements[i].unwrap_or(targets[i]);
        if let Some(j) = next.task_ids.iter().position(|x| x == id) {
            let src = (m + j) * nk;
            target[row * nk..(row + 1) * nk].copy_from_slice(&next.data[src..src + nk]);
            row_mask[row] = true;
        }
    }
    let mut elem_mask = Vec::with_capacity(rows * nk);
    for &keep in &row_mask {
        elem_mask.extend(std::iter::repeat(if keep { 1.0 } else { 0.0 }).take(nk));
    }
    Ok(WindowAlignment {
        target,
        row_mask,
        elem_mask,
        hosts_of_rows,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PotConfig {
    /// Scores required before the threshold is defined.
    pub n_init: usize,
    /// Empirical quantile of the init batch used as the peak cutoff.
    pub init_quantile: f64,
    /// Risk level q: target exceedance probability of the final threshold.
    pub risk: f64,
}

impl Default for PotConfig {
    fn default() -> Self {
        PotConfig {
            n_init: 120,
            init_quantile: 0.98,
            risk: 1e-2,
        }
    }
}

/// Streaming peaks-over-threshold state. The initial cutoff is an empirical
/// quantile of the init batch; excesses over it feed a method-of-moments
/// generalized-Pareto fit, and the reported threshold is the fitted
/// quantile at risk `q`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotState {
    pub cfg: PotConfig,
    init_buffer: Vec<f64>,
    initialized: bool,
    cutoff: f64,
    peak_count: usize,
    peak_sum: f64,
    peak_sumsq: f64,
    total: usize,
}

impl PotState {
    pub fn new(cfg: PotConfig) -> Self {
        PotState {
            cfg,
            init_buffer: Vec::new(),
            initialized: false,
            cutoff: 0.0,
            peak_count: 0,
            peak_sum: 0.0,
            peak_sumsq: 0.0,
            total: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Feeds a score during warmup; initializes once `n_init` scores are in.
    pub fn observe_init(&mut self, score: f64) {
        if self.initialized {
            self.ingest(score);
            return;
        }
        self.init_buffer.push(score);
        if self.init_buffer.len() >= self.cfg.n_init {
            let mut sorted = self.init_buffer.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            self.cutoff = crate::sim::percentile(&sorted, self.cfg.init_quantile);
            self.initialized = true;
            self.total = 0;
            let buf = std::mem::take(&mut self.init_buffer);
            for s in buf {
                self.ingest(s);
            }
        }
    }

    /// Explicit initialization from a batch of at least `n_init` scores.
    pub fn init_from(cfg: PotConfig, scores: &[f64]) -> Result<PotState, DetectError> {
        if scores.len() < cfg.n_init {
            return Err(DetectError::NotInitialized {
                needed: cfg.n_init,
                got: scores.len(),
            });
        }
        let mut state = PotState::new(cfg);
        for &s in scores {
            state.observe_init(s);
        }
        Ok(state)
    }

    fn ingest(&mut self, score: f64) {
        self.total += 1;
        if score > self.cutoff {
            let excess = score - self.cutoff;
            self.peak_count += 1;
            self.peak_sum += excess;
            self.peak_sumsq += excess * excess;
        }
    }

    /// Ingests one score and returns the refreshed threshold.
    pub fn update(&mut self, score: f64) -> Result<f64, DetectError> {
        if !self.initialized {
            return Err(DetectError::NotInitialized {
                needed: self.cfg.n_init,
                got: self.init_buffer.len(),
            });
        }
        self.ingest(score);
        Ok(self.threshold())
    }

    /// Current dynamic threshold. With no peaks yet, an epsilon guard above
    /// the cutoff keeps constant streams label-free.
    pub fn threshold(&self) -> f64 {
        if !self.initialized {
            return f64::INFINITY;
        }
        let guard = self.cutoff + 1e-9 + self.cutoff.abs() * 1e-9;
        if self.peak_count == 0 || self.total == 0 {
            return guard;
        }
        let nt = self.peak_count as f64;
        let n = self.total as f64;
        let mean = self.peak_sum / nt;
        if mean <= 0.0 {
            return guard;
        }
        let var = (self.peak_sumsq / nt - mean * mean).max(0.0);
        // method of moments for the generalized Pareto excesses
        let (gamma, sigma) = if self.peak_count < 2 || var <= 1e-12 * mean * mean {
            (0.0, mean)
        } else {
            let r = mean * mean / var;
            (0.5 * (1.0 - r), (0.5 * mean * (1.0 + r)).max(f64::MIN_POSITIVE))
        };
        let ratio = self.cfg.risk * n / nt;
        let add = if gamma.abs() < 1e-9 {
            sigma * (1.0 / ratio).ln()
        } else {
            (sigma / gamma) * (ratio.powf(-gamma) - 1.0)
        };
        (self.cutoff + add).max(guard)
    }

    /// Threshold the same fitted state would report at risk `q`.
    pub fn threshold_at_risk(&self, q: f64) -> f64 {
        let mut alt = self.clone();
        alt.cfg.risk = q;
        alt.threshold()
    }

    pub fn serialize_fields(&self) -> Vec<f64> {
        vec![
            self.cfg.n_init as f64,
            self.cfg.init_quantile,
            self.cfg.risk,
            if self.initialized { 1.0 } else { 0.0 },
            self.cutoff,
            self.peak_count as f64,
            self.peak_sum,
            self.peak_sumsq,
            self.total as f64,
        ]
    }

    pub fn deserialize_fields(fields: &[f64]) -> Result<PotState, DetectError> {
        if fields.len() != 9 {
            return Err(DetectError::BadParameter(format!(
                "POT state needs 9 fields, got {}",
                fields.len()
            )));
        }
        Ok(PotState {
            cfg: PotConfig {
                n_init: fields[0] as usize,
                init_quantile: fields[1],
                risk: fields[2],
            },
            init_buffer: Vec::new(),
            initialized: fields[3] != 0.0,
            cutoff: fields[4],
            peak_count: fields[5] as usize,
            peak_sum: fields[6],
            peak_sumsq: fields[7],
            total: fields[8] as usize,
        })
    }
}

/// Strict comparison: the label fires only above the threshold.
pub fn fault_label(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Per-class prototype statistics; class 0 is the no-anomaly class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStats {
    /// `classes x dim` means.
    pub mu: Vec<Vec<f64>>,
    /// `classes x dim` standard deviations, floored.
    pub sigma: Vec<Vec<f64>>,
    pub sigma_floor: f64,
}

impl PrototypeStats {
    /// Fresh stats: means staggered across (0,1) so untrained classes are
    /// distinguishable, sigmas at 1.
    pub fn fresh(classes: usize, dim: usize, sigma_floor: f64) -> Self {
        let mu = (0..classes)
            .map(|c| vec![(c as f64 + 1.0) / (classes as f64 + 1.0); dim])
            .collect();
        let sigma = vec![vec![1.0; dim]; classes];
        PrototypeStats {
            mu,
            sigma,
            sigma_floor,
        }
    }

    pub fn classes(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map(|v| v.len()).unwrap_or(0)
    }
}

/// Divergence of a prototype vector from a class representative:
/// `sum_d (mu_d - p_d)^2 / (2 sigma_d^2) + ln(sigma_d^2) / 2`.
pub fn proto_distance(p: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64, DetectError> {
    if p.len() != mu.len() || p.len() != sigma.len() {
        return Err(DetectError::Shape(format!(
            "prototype dims differ: {} vs {} vs {}",
            p.len(),
            mu.len(),
            sigma.len()
        )));
    }
    let mut d = 0.0;
    for i in 0..p.len() {
        let s2 = sigma[i] * sigma[i];
        let diff = mu[i] - p[i];
        d += diff * diff / (2.0 * s2) + 0.5 * s2.ln();
    }
    Ok(d)
}

/// Distances of `p` to every class in order.
pub fn class_distances(p: &[f64], stats: &PrototypeStats) -> Result<Vec<f64>, DetectError> {
    (0..stats.classes())
        .map(|c| proto_distance(p, &stats.mu[c], &stats.sigma[c]))
        .collect()
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Class assignment: 0 when no fault is flagged, otherwise the closest
/// non-NAP class prototype (1..=j).
pub fn classify(p: &[f64], stats: &PrototypeStats, flagged: bool) -> Result<usize, DetectError> {
    if !flagged {
        return Ok(0);
    }
    let d = class_distances(p, stats)?;
    if d.len() < 2 {
        return Err(DetectError::BadParameter(
            "need at least one fault class beyond the no-anomaly class".into(),
        ));
    }
    Ok(argmin_index(&d[1..]) + 1)
}

/// Per-host diagnosis: POT label per host plus a ranking by descending
/// score (ties by host index).
pub fn diagnose_hosts(
    per_host_scores: &[f64],
    per_host_thresholds: &[f64],
) -> Result<(Vec<usize>, Vec<bool>), DetectError> {
    if per_host_scores.len() != per_host_thresholds.len() {
        return Err(DetectError::Shape(format!(
            "{} scores vs {} thresholds",
            per_host_scores.len(),
            per_host_thresholds.len()
        )));
    }
    let labels: Vec<bool> = per_host_scores
        .iter()
        .zip(per_host_thresholds)
        .map(|(s, t)| fault_label(*s, *t))
        .collect();
    let mut ranking: Vec<usize> = (0..per_host_scores.len()).collect();
    ranking.sort_by(|&a, &b| {
        per_host_scores[b]
            .partial_cmp(&per_host_scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok((ranking, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_score(w_true: &[f64], w_hat: &[f64]) -> f64 {
        let mask = vec![true];
        fault_score(w_true, w_hat, w_true.len(), &mask, &[0], 1)
            .unwrap()
            .total
    }

    #[test]
    fn fault_score_examples() {
        assert_eq!(plain_score(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        // predictions above truth are clamped out
        assert_eq!(plain_score(&[0.2, 0.4], &[0.9, 0.8]), 0.0);
        assert!((plain_score(&[0.9], &[0.6]) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn fault_score_partials_sum_to_total() {
        let w_true = vec![0.9, 0.1, 0.8, 0.3];
        let w_hat = vec![0.5, 0.2, 0.5, 0.4];
        let fs = fault_score(&w_true, &w_hat, 2, &[true, true], &[0, 1], 2).unwrap();
        assert!((fs.per_host.iter().sum::<f64>() - fs.total).abs() < 1e-12);
        assert!((fs.per_host[0] - 0.16).abs() < 1e-12);
        assert!((fs.per_host[1] - 0.09).abs() < 1e-12);
    }

    #[test]
    fn pot_update_before_init_errors() {
        let mut pot = PotState::new(PotConfig::default());
        assert!(matches!(
            pot.update(1.0),
            Err(DetectError::NotInitialized { .. })
        ));
    }

    #[test]
    fn pot_constant_stream_stays_quiet() {
        let cfg = PotConfig {
            n_init: 50,
            ..PotConfig::default()
        };
        let scores = vec![2.5; 50];
        let mut pot = PotState::init_from(cfg, &scores).unwrap();
        for _ in 0..200 {
            let th = pot.update(2.5).unwrap();
            assert!(th > 2.5);
            assert!(!fault_label(2.5, th));
        }
    }

    #[test]
    fn pot_exponential_matches_analytic_quantile() {
        // exp(1) scores: the analytic quantile at risk q is -ln(q)
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let cfg = PotConfig {
            n_init: 120,
            init_quantile: 0.98,
            risk: 1e-3,
        };
        let mut pot = PotState::new(cfg);
        let n = 100_000;
        for _ in 0..n {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            pot.observe_init(-u.ln());
        }
        let th = pot.threshold();
        let analytic = -(1e-3f64).ln();
        assert!(
            (th - analytic).abs() / analytic < 0.15,
            "threshold {th} vs analytic {analytic}"
        );
    }

    #[test]
    fn pot_uniform_threshold_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        let cfg = PotConfig {
            n_init: 120,
            init_quantile: 0.98,
            risk: 1e-2,
        };
        let mut pot = PotState::new(cfg);
        let mut all = Vec::new();
        for _ in 0..100_000 {
            let u: f64 = rng.gen_range(0.0..1.0);
            all.push(u);
            pot.observe_init(u);
        }
        let th = pot.threshold();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = crate::sim::percentile(&all, 0.99);
        assert!(th <= 1.1, "uniform threshold {th} should stay near 1");
        assert!(th >= p99, "threshold {th} below empirical 99th {p99}");
    }

    #[test]
    fn pot_threshold_monotone_in_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PotConfig {
            n_init: 200,
            init_quantile: 0.95,
            risk: 1e-2,
        };
        let scores: Vec<f64> = (0..5000).map(|_| rng.gen_range(0.0f64..1.0).powi(3)).collect();
        let pot = PotState::init_from(cfg, &scores).unwrap();
        assert!(pot.threshold_at_risk(1e-4) >= pot.threshold_at_risk(1e-3));
        assert!(pot.threshold_at_risk(1e-3) >= pot.threshold_at_risk(1e-2));
    }

    #[test]
    fn fault_label_is_strict() {
        assert!(!fault_label(1.0, 1.0));
        assert!(fault_label(1.0 + 1e-12, 1.0));
        assert!(!fault_label(0.0, 0.5));
    }

    #[test]
    fn proto_distance_examples() {
        // P = mu, sigma = 1 -> 0
        assert_eq!(proto_distance(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 1.0]).unwrap(), 0.0);
        // scalar P=1, mu=0, sigma=1 -> 0.5
        assert!((proto_distance(&[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        // scalar P=mu, sigma=e -> 1
        let e = std::f64::consts::E;
        assert!((proto_distance(&[0.4], &[0.4], &[e]).unwrap() - 1.0).abs() < 1e-12);
        // unit sigma reduces to half squared euclidean
        let p = [0.1, 0.9, 0.4];
        let mu = [0.6, 0.2, 0.3];
        let ones = [1.0, 1.0, 1.0];
        let d = proto_distance(&p, &mu, &ones).unwrap();
        let sq: f64 = p.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((d - 0.5 * sq).abs() < 1e-12);
    }

    #[test]
    fn classify_rules() {
        let mut stats = PrototypeStats::fresh(3, 2, 1e-2);
        stats.mu = vec![vec![0.5, 0.5], vec![0.1, 0.1], vec![0.9, 0.9]];
        stats.sigma = vec![vec![1.0; 2]; 3];
        // no flag -> NAP regardless of the vector
        assert_eq!(classify(&[0.9, 0.9], &stats, false).unwrap(), 0);
        // exact match with class 2
        assert_eq!(classify(&[0.9, 0.9], &stats, true).unwrap(), 2);
        // single fault class j=1
        let one = PrototypeStats::fresh(2, 2, 1e-2);
        assert_eq!(classify(&[0.0, 0.0], &one, true).unwrap(), 1);
        // ties resolve to the lowest class index
        let mut tied = PrototypeStats::fresh(3, 1, 1e-2);
        tied.mu = vec![vec![0.5], vec![0.2], vec![0.8]];
        tied.sigma = vec![vec![1.0]; 3];
        assert_eq!(classify(&[0.5], &tied, true).unwrap(), 1);
    }

    #[test]
    fn diagnose_ranks_by_score() {
        let (rank, labels) = diagnose_hosts(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(rank, vec![0, 1, 2]);
        assert!(labels.iter().all(|l| !l));
        let (rank, labels) = diagnose_hosts(&[0.1, 5.0, 0.2], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(rank[0], 1);
        assert_eq!(labels, vec![false, true, false]);
    }
}
