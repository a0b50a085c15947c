use super::cluster::Resources;
use serde::{Deserialize, Serialize};

/// Which resources tripped the contention threshold on a host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FaultKinds {
    pub cpu: bool,
    pub ram: bool,
    pub disk: bool,
}

impl FaultKinds {
    pub fn any(&self) -> bool {
        self.cpu || self.ram || self.disk
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.cpu, self.ram, self.disk]
    }

    pub fn from_array(a: [bool; 3]) -> Self {
        FaultKinds {
            cpu: a[0],
            ram: a[1],
            disk: a[2],
        }
    }
}

/// Ground-truth contention labels: a host is flagged when a resource's
/// utilization exceeds `max(rolling_mean + kappa * rolling_std, cap)`, the
/// rolling statistics taken over the previous `window` snapshots (the
/// snapshot being labeled is excluded from its own baseline). The static cap
/// floors the threshold so ordinary fluctuations below it never flag.
///
/// This is a pure function of the utilization history, so flags can be
/// recomputed from a serialized trace.
pub fn label_utilization(
    history: &[Vec<Resources>],
    current: &[Resources],
    window: usize,
    kappa: f64,
    cap: f64,
) -> Vec<FaultKinds> {
    let m = current.len();
    let start = history.len().saturating_sub(window);
    let baseline = &history[start..];
    let mut out = Vec::with_capacity(m);
    for h in 0..m {
        let cur = current[h].as_array();
        let mut flags = [false; 3];
        for r in 0..3 {
            let series: Vec<f64> = baseline.iter().map(|snap| snap[h].as_array()[r]).collect();
            let dynamic = if series.is_empty() {
                0.0
            } else {
                let mean = series.iter().sum::<f64>() / series.len() as f64;
                let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / series.len() as f64;
                mean + kappa * var.sqrt()
            };
            flags[r] = cur[r] > dynamic.max(cap);
        }
        out.push(FaultKinds::from_array(flags));
    }
    out
}

/// Rolling utilization history feeding [`label_utilization`].
#[derive(Debug, Clone, Default)]
pub struct GroundTruthLabeler {
    history: Vec<Vec<Resources>>,
    window: usize,
    kappa: f64,
    cap: f64,
}

impl GroundTruthLabeler {
    pub fn new(window: usize, kappa: f64, cap: f64) -> Self {
        GroundTruthLabeler {
            history: Vec::new(),
            window,
            kappa,
            cap,
        }
    }

    /// Labels `current` against the recorded history, then appends it.
    pub fn label_and_push(&mut self, current: Vec<Resources>) -> Vec<FaultKinds> {
        let labels = label_utilization(&self.history, &current, self.window, self.kappa, self.cap);
        self.history.push(current);
        if self.history.len() > self.window {
            let drop = self.history.len() - self.window;
            self.history.drain(..drop);
        }
        labels
    }

    /// Records a snapshot without labeling it (episode start).
    pub fn push(&mut self, current: Vec<Resources>) {
        self.history.push(current);
        if self.history.len() > self.window {
            let drop = self.history.len() - self.window;
            self.history.drain(..drop);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn util(vals: &[f64]) -> Vec<Resources> {
        vals.iter().map(|&v| Resources::new(v, 0.0, 0.0)).collect()
    }

    #[test]
    fn all_zero_utilization_never_flags() {
        let mut labeler = GroundTruthLabeler::new(5, 3.0, 0.9);
        labeler.push(util(&[0.0, 0.0]));
        for _ in 0..10 {
            let flags = labeler.label_and_push(util(&[0.0, 0.0]));
            assert!(flags.iter().all(|k| !k.any()));
        }
    }

    #[test]
    fn pinned_above_cap_flags_cpu_at_onset() {
        let mut labeler = GroundTruthLabeler::new(5, 3.0, 0.9);
        labeler.push(util(&[0.0, 0.0]));
        let flags = labeler.label_and_push(util(&[0.9 + 1e-6, 0.0]));
        assert!(flags[0].cpu);
        assert!(!flags[0].ram && !flags[0].disk);
        assert!(!flags[1].any());
    }

    #[test]
    fn calm_constant_history_never_flags() {
        let mut labeler = GroundTruthLabeler::new(5, 3.0, 0.9);
        labeler.push(util(&[0.3]));
        for _ in 0..20 {
            let flags = labeler.label_and_push(util(&[0.3]));
            assert!(!flags[0].any());
        }
    }

    #[test]
    fn single_ram_spike_flags_exactly_once() {
        // brute-force oracle: recompute thresholds from scratch per interval
        let m = 3;
        let spike_host = 1;
        let spike_t = 12;
        let mut series: Vec<Vec<Resources>> = Vec::new();
        for t in 0..20 {
            let mut snap = Vec::new();
            for h in 0..m {
                let ram = if h == spike_host && t == spike_t {
                    0.97
                } else {
                    0.30
                };
                snap.push(Resources::new(0.25, ram, 0.2));
            }
            series.push(snap);
        }
        let mut labeler = GroundTruthLabeler::new(5, 3.0, 0.9);
        labeler.push(series[0].clone());
        let mut flagged = Vec::new();
        for (t, snap) in series.iter().enumerate().skip(1) {
            let flags = labeler.label_and_push(snap.clone());
            // oracle recomputation from the raw series
            for (h, k) in flags.iter().enumerate() {
                let window_start = t.saturating_sub(5);
                let base: Vec<f64> = series[window_start..t].iter().map(|s| s[h].ram).collect();
                let mean = base.iter().sum::<f64>() / base.len() as f64;
                let var =
                    base.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / base.len() as f64;
                let threshold = (mean + 3.0 * var.sqrt()).max(0.9);
                assert_eq!(k.ram, series[t][h].ram > threshold, "host {h} t {t}");
                if k.any() {
                    flagged.push((t, h, *k));
                }
            }
        }
        assert_eq!(flagged.len(), 1);
        let (t, h, k) = flagged[0];
        assert_eq!((t, h), (spike_t, spike_host));
        assert!(k.ram && !k.cpu && !k.disk);
    }
}
