//! Metric computation over episode logs and per-interval predictions:
//! binary detection scores, ranked diagnosis quality, the strict
//! improvement ratio against the reference scheduler, and the QoS suite.

use crate::sim::{compute_qos, jain_fairness, EpisodeLog, SimError, TaskProfile};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("sim: {0}")]
    Sim(#[from] SimError),
}

/// Binary fault-detection scores; fault is the positive class. When a rate
/// is undefined (no positives predicted or present) it reports 0 with the
/// degenerate flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

pub fn detection_metrics(pred: &[bool], truth: &[bool]) -> Result<DetectionReport, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = pred.len().max(1) as f64;
    let accuracy = (tp + tn) as f64 / total;
    let mut degenerate = false;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        degenerate = true;
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        degenerate = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// HitRate@100%: fraction of the g ground-truth hosts found in the top g of
/// the ranking.
pub fn interval_hitrate(ranking: &[usize], truth: &[bool]) -> Option<f64> {
    let g = truth.iter().filter(|&&t| t).count();
    if g == 0 {
        return None;
    }
    let hits = ranking.iter().take(g).filter(|&&h| truth[h]).count();
    Some(hits as f64 / g as f64)
}

/// NDCG@100%: binary-relevance DCG of the top-g ranked hosts over the ideal
/// DCG, with the standard log2 position discount.
pub fn interval_ndcg(ranking: &[usize], truth: &[bool]) -> Option<f64> {
    let g = truth.iter().filter(|&&t| t).count();
    if g == 0 {
        return None;
    }
    let mut dcg = 0.0;
    for (pos, &h) in ranking.iter().take(g).enumerate() {
        if truth[h] {
            dcg += 1.0 / ((pos as f64 + 2.0).log2());
        }
    }
    let ideal: f64 = (0..g).map(|pos| 1.0 / ((pos as f64 + 2.0).log2())).sum();
    Some(dcg / ideal)
}

/// Averages HitRate/NDCG over the intervals that have ground-truth faults.
pub fn diagnosis_metrics(
    rankings: &[Vec<usize>],
    truths: &[Vec<bool>],
) -> Result<(f64, f64), MetricsError> {
    if rankings.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(rankings.len(), truths.len()));
    }
    let mut hr_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut count = 0usize;
    for (ranking, truth) in rankings.iter().zip(truths) {
        if let (Some(hr), Some(nd)) = (
            interval_hitrate(ranking, truth),
            interval_ndcg(ranking, truth),
        ) {
            hr_sum += hr;
            ndcg_sum += nd;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hr_sum / count as f64, ndcg_sum / count as f64))
}

/// Fraction of intervals where the policy's co-simulated QoS strictly beats
/// the reference's. A policy compared against itself scores 0.
pub fn improvement_ratio(qos_policy: &[f64], qos_ref: &[f64]) -> Result<f64, MetricsError> {
    if qos_policy.len() != qos_ref.len() {
        return Err(MetricsError::LengthMismatch(
            qos_policy.len(),
            qos_ref.len(),
        ));
    }
    if qos_policy.is_empty() {
        return Ok(0.0);
    }
    let wins = qos_policy
        .iter()
        .zip(qos_ref)
        .filter(|(a, b)| a > b)
        .count();
    Ok(wins as f64 / qos_policy.len() as f64)
}

/// Aggregate QoS measurements of one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QosSuite {
    pub mean_qos: f64,
    pub energy_total_kwh: f64,
    pub energy_per_task_kwh: f64,
    pub art_overall_s: f64,
    pub art_per_profile_s: [f64; 3],
    pub slo_fraction: f64,
    pub slo_fraction_per_profile: [f64; 3],
    pub fairness: f64,
    pub migrations: usize,
    pub migration_time_s: f64,
    pub completed: usize,
}

pub fn qos_suite(log: &EpisodeLog, alpha: f64, beta: f64) -> Result<QosSuite, MetricsError> {
    let mut qos_sum = 0.0;
    let mut energy_ws = 0.0;
    let mut migrations = 0usize;
    let mut migration_time = 0.0;
    let mut responses: Vec<f64> = Vec::new();
    let mut per_profile: [(f64, usize, usize); 3] = [(0.0, 0, 0); 3]; // (sum, count, violations)
    let mut violations = 0usize;
    for rec in &log.records {
        let o = &rec.outcome;
        qos_sum += compute_qos(o, alpha, beta)?;
        energy_ws += o.energy_ws;
        migrations += o.migrations;
        migration_time += o.migration_time;
        for c in &o.completions {
            responses.push(c.response_time);
            let slot = &mut per_profile[c.profile.index()];
            slot.0 += c.response_time;
            slot.1 += 1;
            if c.violated_slo {
                slot.2 += 1;
                violations += 1;
            }
        }
    }
    let completed = responses.len();
    let intervals = log.records.len().max(1) as f64;
    let art_overall = if completed > 0 {
        responses.iter().sum::<f64>() / completed as f64
    } else {
        0.0
    };
    let mut art_pp = [0.0; 3];
    let mut slo_pp = [0.0; 3];
    for profile in TaskProfile::ALL {
        let (sum, count, viol) = per_profile[profile.index()];
        if count > 0 {
            art_pp[profile.index()] = sum / count as f64;
            slo_pp[profile.index()] = viol as f64 / count as f64;
        }
    }
    let fairness = if responses.is_empty() {
        1.0
    } else {
        jain_fairness(&responses)?
    };
    let energy_total_kwh = energy_ws / 3.6e6;
    Ok(QosSuite {
        mean_qos: qos_sum / intervals,
        energy_total_kwh,
        energy_per_task_kwh: if completed > 0 {
            energy_total_kwh / completed as f64
        } else {
            energy_total_kwh
        },
        art_overall_s: art_overall,
        art_per_profile_s: art_pp,
        slo_fraction: if completed > 0 {
            violations as f64 / completed as f64
        } else {
            0.0
        },
        slo_fraction_per_profile: slo_pp,
        fairness,
        migrations,
        migration_time_s: migration_time,
        completed,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &which in &idx[i..=j] {
                ranks[which] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}
