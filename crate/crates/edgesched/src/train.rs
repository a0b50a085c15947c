//! Offline self-supervised training: reconstruction of the next window plus
//! a prototype triplet objective with self-generated class labels, driven by
//! AdamW with decoupled weight decay and early stopping on validation
//! reconstruction loss.

use crate::detect::{
    align_windows, classify, fault_label, fault_score, DetectError, PotConfig, PotState,
    PrototypeStats, WindowAlignment,
};
use crate::surrogate::{Mode, Model, ModelConfig, ModelError, ScheduleInput};
use crate::telemetry::{Dataset, DatasetRecord, Scaler, StateWindow, TelemetryError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use tapegrad::{save_named_tensors, AdamW, NdArray, Tape, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("detect: {0}")]
    Detect(#[from] DetectError),
    #[error("telemetry: {0}")]
    Telemetry(#[from] TelemetryError),
    #[error("dataset is empty or has no usable record pairs")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, record {record}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        record: usize,
        value: f64,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Number of fault classes j (stats carry j+1 entries with the
    /// no-anomaly class at index 0).
    pub fault_classes: usize,
    pub max_epochs: usize,
    /// Optional cap on total per-record updates.
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub val_fraction: f64,
    pub sigma_floor: f64,
    pub seed: u64,
    pub pot: PotConfig,
    pub hidden: usize,
    pub heads: usize,
    pub state_heads: usize,
    pub proto_dim: usize,
    pub graph_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            fault_classes: 3,
            max_epochs: 40,
            max_steps: None,
            patience: 5,
            val_fraction: 0.1,
            sigma_floor: 1e-2,
            seed: 0,
            pot: PotConfig::default(),
            hidden: 32,
            heads: 4,
            state_heads: 1,
            proto_dim: 8,
            graph_rounds: 2,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, m: usize, n: usize, k: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(m, n, k);
        cfg.hidden = self.hidden;
        cfg.heads = self.heads;
        cfg.state_heads = self.state_heads;
        cfg.proto_dim = self.proto_dim;
        cfg.graph_rounds = self.graph_rounds;
        cfg
    }
}

/// Reconstruction loss between aligned flat windows (sum of squares over
/// surviving rows).
pub fn reconstruction_loss(w_hat: &[f64], align: &WindowAlignment) -> f64 {
    w_hat
        .iter()
        .zip(&align.target)
        .zip(&align.elem_mask)
        .map(|((a, b), m)| {
            let d = (a - b) * m;
            d * d
        })
        .sum()
}

/// Tape-side reconstruction loss: `sum(((w_hat - target) * mask)^2)`.
pub fn reconstruction_loss_on_tape(
    tape: &mut Tape,
    w_hat: TensorId,
    align: &WindowAlignment,
) -> Result<TensorId, TensorError> {
    let shape = tape.shape(w_hat).to_vec();
    let target = tape.constant(&shape, align.target.clone())?;
    let mask = tape.constant(&shape, align.elem_mask.clone())?;
    let diff = tape.sub(w_hat, target)?;
    let masked = tape.mul(diff, mask)?;
    let sq = tape.square(masked);
    Ok(tape.sum_all(sq))
}

/// Tape-side divergence `sum_d (mu_d - p_d)^2 / (2 sigma_d^2) + ln sigma_d^2 / 2`
/// differentiable in the prototype vector.
pub fn proto_distance_on_tape(
    tape: &mut Tape,
    proto: TensorId,
    mu: &[f64],
    sigma: &[f64],
) -> Result<TensorId, TensorError> {
    let d = mu.len();
    let mu_c = tape.constant(&[d], mu.to_vec())?;
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    let log_term: f64 = sigma.iter().map(|s| (s * s).ln() * 0.5).sum();
    let inv_c = tape.constant(&[d], inv)?;
    let diff = tape.sub(mu_c, proto)?;
    let sq = tape.square(diff);
    let scaled = tape.mul(sq, inv_c)?;
    let sum = tape.sum_all(scaled);
    Ok(tape.add_scalar(sum, log_term))
}

/// Triplet objective: `D(P, c_phi) - sum_{i != phi} D(P, c_i)`.
pub fn triplet_loss_on_tape(
    tape: &mut Tape,
    proto: TensorId,
    phi: usize,
    stats: &PrototypeStats,
) -> Result<TensorId, TensorError> {
    let mut pos = None;
    let mut neg: Option<TensorId> = None;
    for c in 0..stats.classes() {
        let d = proto_distance_on_tape(tape, proto, &stats.mu[c], &stats.sigma[c])?;
        if c == phi {
            pos = Some(d);
        } else {
            neg = Some(match neg {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
    }
    let pos = pos.expect("phi within class range");
    match neg {
        Some(neg) => tape.sub(pos, neg),
        None => Ok(pos),
    }
}

/// Scalar triplet value, mirroring the tape construction.
pub fn triplet_loss(p: &[f64], phi: usize, stats: &PrototypeStats) -> Result<f64, DetectError> {
    let d = crate::detect::class_distances(p, stats)?;
    let mut out = d[phi];
    for (i, v) in d.iter().enumerate() {
        if i != phi {
            out -= v;
        }
    }
    Ok(out)
}

/// Forward pass plus alignment against the true next window; shared by the
/// offline loop, online fine-tuning, and evaluation.
pub struct RecordEval {
    pub w_hat_id: TensorId,
    pub proto_id: TensorId,
    pub proto: Vec<f64>,
    pub align: WindowAlignment,
    pub f_score: f64,
    pub per_host: Vec<f64>,
    pub attn: Vec<f64>,
    pub bn_batch: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn eval_record(
    tape: &mut Tape,
    model: &Model,
    binding: &crate::surrogate::Binding,
    rec: &DatasetRecord,
    next_window: &StateWindow,
    mode: Mode,
) -> Result<RecordEval, TrainError> {
    eval_pair(
        tape,
        model,
        binding,
        &rec.window,
        &rec.schedule,
        &rec.placements,
        next_window,
        mode,
    )
}

/// As [`eval_record`], over loose pieces instead of a dataset record.
#[allow(clippy::too_many_arguments)]
pub fn eval_pair(
    tape: &mut Tape,
    model: &Model,
    binding: &crate::surrogate::Binding,
    window: &StateWindow,
    schedule: &crate::sim::ScheduleMatrix,
    placements: &[Option<usize>],
    next_window: &StateWindow,
    mode: Mode,
) -> Result<RecordEval, TrainError> {
    let out = model.forward(
        tape,
        binding,
        window,
        ScheduleInput::Discrete(schedule),
        placements,
        mode,
    )?;
    let targets = schedule.targets();
    let align = align_windows(window, next_window, placements, &targets)?;
    let row_len = window.n * window.k;
    let fs = fault_score(
        &align.target,
        tape.value(out.w_hat),
        row_len,
        &align.row_mask,
        &align.hosts_of_rows,
        window.m,
    )?;
    Ok(RecordEval {
        w_hat_id: out.w_hat,
        proto_id: out.proto,
        proto: tape.value(out.proto).to_vec(),
        align,
        f_score: fs.total,
        per_host: fs.per_host,
        attn: out.attn,
        bn_batch: out.bn_batch,
    })
}

/// One per-epoch row of the exported loss curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_recon: f64,
    pub train_triplet: f64,
    pub val_recon: f64,
    pub detect_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub struct TrainResult {
    pub model: Model,
    pub stats: PrototypeStats,
    pub pot: PotState,
    pub curves: Vec<EpochStats>,
    pub best_epoch: usize,
    pub first_epoch_recon: f64,
    pub final_recon: f64,
    pub detection: ConfusionCounts,
}

/// Recomputes per-class prototype statistics with a fresh forward pass over
/// the training pairs: classes come from `classify` under the current stats
/// (all-NAP on the bootstrap epoch); empty classes keep their previous
/// entries; standard deviations are floored.
pub fn compute_class_stats(
    model: &Model,
    pairs: &[(&DatasetRecord, &StateWindow)],
    pot: &PotState,
    current: &PrototypeStats,
    all_nap: bool,
) -> Result<PrototypeStats, TrainError> {
    let classes = current.classes();
    let dim = current.dim();
    let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    for (rec, next) in pairs {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false)?;
        let ev = eval_record(&mut tape, model, &binding, rec, next, Mode::Eval)?;
        let flagged = pot.is_initialized() && fault_label(ev.f_score, pot.threshold());
        let phi = if all_nap {
            0
        } else {
            classify(&ev.proto, current, flagged)?
        };
        members[phi].push(ev.proto);
    }
    let mut out = current.clone();
    for c in 0..classes {
        if members[c].is_empty() {
            continue;
        }
        let count = members[c].len() as f64;
        let mut mu = vec![0.0; dim];
        for p in &members[c] {
            for (i, v) in p.iter().enumerate() {
                mu[i] += v;
            }
        }
        for v in mu.iter_mut() {
            *v /= count;
        }
        let mut sigma = vec![0.0; dim];
        for p in &members[c] {
            for (i, v) in p.iter().enumerate() {
                let d = v - mu[i];
                sigma[i] += d * d;
            }
        }
        for v in sigma.iter_mut() {
            *v = (*v / count).sqrt().max(current.sigma_floor);
        }
        out.mu[c] = mu;
        out.sigma[c] = sigma;
    }
    Ok(out)
}

fn consecutive_pairs(ds: &Dataset) -> Vec<(&DatasetRecord, &StateWindow)> {
    ds.records
        .windows(2)
        .map(|w| (&w[0], &w[1].window))
        .collect()
}

/// Offline training over a dataset generated by a random-policy episode.
pub fn train_offline(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    let pairs = consecutive_pairs(dataset);
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model_cfg = cfg.model_config(dataset.m, dataset.n, dataset.k);
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut stats = PrototypeStats::fresh(cfg.fault_classes + 1, cfg.proto_dim, cfg.sigma_floor);
    let mut pot = PotState::new(cfg.pot);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);

    let split = ((pairs.len() as f64) * (1.0 - cfg.val_fraction)).round() as usize;
    let split = split.clamp(1, pairs.len());
    let mut curves = Vec::new();
    let mut best: Option<(f64, usize, Model, PrototypeStats, PotState)> = None;
    let mut epochs_since_best = 0usize;
    let mut steps_done = 0usize;
    let mut first_epoch_recon = f64::NAN;
    let mut rr_next = 1usize;

    'epochs: for epoch in 0..cfg.max_epochs {
        stats = compute_class_stats(&model, &pairs[..split], &pot, &stats, epoch == 0)?;
        let mut train_recon = 0.0;
        let mut train_triplet = 0.0;
        for (i, (rec, next)) in pairs[..split].iter().enumerate() {
            if let Some(limit) = cfg.max_steps {
                if steps_done >= limit {
                    break 'epochs;
                }
            }
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, true)?;
            let ev = eval_record(&mut tape, &model, &binding, rec, next, Mode::Train)?;
            if let Some(batch) = &ev.bn_batch {
                model.absorb_bn(batch);
            }
            let flagged = pot.is_initialized() && fault_label(ev.f_score, pot.threshold());
            pot.observe_init(ev.f_score);
            let phi = if !flagged {
                0
            } else if epoch == 0 {
                // bootstrap: spread early faulty records across the classes
                let c = rr_next;
                rr_next = rr_next % cfg.fault_classes + 1;
                c
            } else {
                classify(&ev.proto, &stats, true)?
            };
            let recon = reconstruction_loss_on_tape(&mut tape, ev.w_hat_id, &ev.align)?;
            let triplet = triplet_loss_on_tape(&mut tape, ev.proto_id, phi, &stats)?;
            let total = tape.add(recon, triplet)?;
            let total_v = tape.value(total)[0];
            if !total_v.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    record: i,
                    value: total_v,
                });
            }
            train_recon += tape.value(recon)[0];
            train_triplet += tape.value(triplet)[0];
            tape.backward(total)?;
            let grads = binding.collect_grads(&tape);
            model.apply(|params| opt.step(params, &grads));
            steps_done += 1;
        }
        let train_pairs = split as f64;
        train_recon /= train_pairs;
        train_triplet /= train_pairs;
        if epoch == 0 {
            first_epoch_recon = train_recon;
        }

        // validation reconstruction + whole-set detection accuracy
        let mut val_recon = 0.0;
        let mut agree = 0usize;
        for (idx, (rec, next)) in pairs.iter().enumerate() {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false)?;
            let ev = eval_record(&mut tape, &model, &binding, rec, next, Mode::Eval)?;
            if idx >= split {
                val_recon += reconstruction_loss(tape.value(ev.w_hat_id), &ev.align);
            }
            let pred = pot.is_initialized() && fault_label(ev.f_score, pot.threshold());
            let truth = rec.gt_flags.iter().any(|f| *f);
            if pred == truth {
                agree += 1;
            }
        }
        let val_count = (pairs.len() - split).max(1) as f64;
        val_recon /= val_count;
        let detect_accuracy = agree as f64 / pairs.len() as f64;
        curves.push(EpochStats {
            epoch,
            train_recon,
            train_triplet,
            val_recon,
            detect_accuracy,
        });

        let improved = best.as_ref().map(|(b, ..)| val_recon < *b).unwrap_or(true);
        if improved {
            best = Some((val_recon, epoch, snapshot(&model), stats.clone(), pot.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_model, best_stats, best_pot) =
        best.ok_or(TrainError::EmptyDataset)?;
    let model = best_model;
    let stats = best_stats;
    let pot = best_pot;

    // final detection counts over every pair with the restored model
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    let mut final_recon = 0.0;
    for (rec, next) in &pairs {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false)?;
        let ev = eval_record(&mut tape, &model, &binding, rec, next, Mode::Eval)?;
        final_recon += reconstruction_loss(tape.value(ev.w_hat_id), &ev.align);
        let pred = pot.is_initialized() && fault_label(ev.f_score, pot.threshold());
        let truth = rec.gt_flags.iter().any(|f| *f);
        match (pred, truth) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    final_recon /= pairs.len() as f64;

    Ok(TrainResult {
        model,
        stats,
        pot,
        curves,
        best_epoch,
        first_epoch_recon,
        final_recon,
        detection: counts,
    })
}

fn snapshot(model: &Model) -> Model {
    Model {
        cfg: model.cfg.clone(),
        params: model.params.clone(),
        bn_mean: model.bn_mean.clone(),
        bn_var: model.bn_var.clone(),
    }
}

/// Everything the online scheduler needs from an offline run.
pub struct Checkpoint {
    pub model: Model,
    pub stats: PrototypeStats,
    pub pot: PotState,
    pub scaler: Scaler,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    let tensors: Vec<(&str, &NdArray)> = ckpt.model.params.iter().collect();
    save_named_tensors(&dir.join("params"), &tensors)?;
    let c = &ckpt.model.cfg;
    std::fs::write(
        dir.join("model_meta"),
        format!(
            "m={}\nn={}\nk={}\nhidden={}\nheads={}\nstate_heads={}\nproto_dim={}\ngraph_rounds={}\nnorm_eps={}\nbn_momentum={}\n",
            c.m, c.n, c.k, c.hidden, c.heads, c.state_heads, c.proto_dim, c.graph_rounds,
            c.norm_eps, c.bn_momentum
        ),
    )?;
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    std::fs::write(
        dir.join("norm_stats"),
        format!("{}\n{}\n", join(&ckpt.model.bn_mean), join(&ckpt.model.bn_var)),
    )?;
    let mut proto = format!(
        "classes={} dim={} floor={}\n",
        ckpt.stats.classes(),
        ckpt.stats.dim(),
        ckpt.stats.sigma_floor
    );
    for c in 0..ckpt.stats.classes() {
        let _ = writeln!(proto, "{}", join(&ckpt.stats.mu[c]));
    }
    for c in 0..ckpt.stats.classes() {
        let _ = writeln!(proto, "{}", join(&ckpt.stats.sigma[c]));
    }
    std::fs::write(dir.join("proto_stats"), proto)?;
    std::fs::write(dir.join("pot"), join(&ckpt.pot.serialize_fields()))?;
    let mut scaler = String::new();
    for f in 0..ckpt.scaler.min.len() {
        let _ = writeln!(scaler, "{},{}", ckpt.scaler.min[f], ckpt.scaler.max[f]);
    }
    std::fs::write(dir.join("scaler"), scaler)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let meta = std::fs::read_to_string(dir.join("model_meta"))?;
    let mut kv = std::collections::HashMap::new();
    for line in meta.lines() {
        if let Some((a, b)) = line.split_once('=') {
            kv.insert(a.to_string(), b.to_string());
        }
    }
    let get = |k: &str| -> Result<f64, TrainError> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Corrupt(format!("model_meta missing {k}")))
    };
    let cfg = ModelConfig {
        m: get("m")? as usize,
        n: get("n")? as usize,
        k: get("k")? as usize,
        hidden: get("hidden")? as usize,
        heads: get("heads")? as usize,
        state_heads: get("state_heads")? as usize,
        proto_dim: get("proto_dim")? as usize,
        graph_rounds: get("graph_rounds")? as usize,
        norm_eps: get("norm_eps")?,
        bn_momentum: get("bn_momentum")?,
    };
    let mut model = Model::new(cfg, 0)?;
    for (name, tensor) in tapegrad::load_named_tensors(&dir.join("params"))? {
        let slot = model
            .params
            .get_mut(&name)
            .ok_or_else(|| TrainError::Corrupt(format!("unknown parameter {name}")))?;
        if slot.shape != tensor.shape {
            return Err(TrainError::Corrupt(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                tensor.shape, slot.shape
            )));
        }
        *slot = tensor;
    }
    let parse_line = |line: &str| -> Result<Vec<f64>, TrainError> {
        line.split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| TrainError::Corrupt("bad float".into()))
            })
            .collect()
    };
    let norm = std::fs::read_to_string(dir.join("norm_stats"))?;
    let mut it = norm.lines();
    model.bn_mean = parse_line(it.next().ok_or_else(|| TrainError::Corrupt("norm_stats".into()))?)?;
    model.bn_var = parse_line(it.next().ok_or_else(|| TrainError::Corrupt("norm_stats".into()))?)?;

    let proto = std::fs::read_to_string(dir.join("proto_stats"))?;
    let mut lines = proto.lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainError::Corrupt("proto_stats empty".into()))?;
    let mut classes = 0usize;
    let mut floor = 1e-2;
    for part in header.split_whitespace() {
        if let Some((k, v)) = part.split_once('=') {
            match k {
                "classes" => {
                    classes = v
                        .parse()
                        .map_err(|_| TrainError::Corrupt("bad classes".into()))?
                }
                "floor" => {
                    floor = v.parse().map_err(|_| TrainError::Corrupt("bad floor".into()))?
                }
                _ => {}
            }
        }
    }
    let mut mu = Vec::with_capacity(classes);
    let mut sigma = Vec::with_capacity(classes);
    for _ in 0..classes {
        mu.push(parse_line(lines.next().ok_or_else(|| {
            TrainError::Corrupt("proto_stats truncated".into())
        })?)?);
    }
    for _ in 0..classes {
        sigma.push(parse_line(lines.next().ok_or_else(|| {
            TrainError::Corrupt("proto_stats truncated".into())
        })?)?);
    }
    let stats = PrototypeStats {
        mu,
        sigma,
        sigma_floor: floor,
    };
    let pot_text = std::fs::read_to_string(dir.join("pot"))?;
    let pot = PotState::deserialize_fields(&parse_line(pot_text.trim())?)?;
    let scaler_text = std::fs::read_to_string(dir.join("scaler"))?;
    let mut min = Vec::new();
    let mut max = Vec::new();
    for line in scaler_text.lines().filter(|l| !l.trim().is_empty()) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| TrainError::Corrupt("bad scaler".into()))?;
        min.push(a.parse().map_err(|_| TrainError::Corrupt("bad scaler".into()))?);
        max.push(b.parse().map_err(|_| TrainError::Corrupt("bad scaler".into()))?);
    }
    Ok(Checkpoint {
        model,
        stats,
        pot,
        scaler: Scaler { min, max },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ScheduleMatrix;

    fn flat_record(t: usize, m: usize, n: usize, k: usize, ids: &[u64], level: f64) -> DatasetRecord {
        let p = ids.len();
        DatasetRecord {
            t,
            window: StateWindow {
                m,
                n,
                k,
                task_ids: ids.to_vec(),
                data: vec![level; (m + p) * n * k],
            },
            schedule: ScheduleMatrix::from_targets(&vec![0; p], m),
            placements: vec![Some(0); p],
            gt_flags: vec![false; m],
            gt_kinds: vec![crate::sim::FaultKinds::default(); m],
        }
    }

    fn tiny_dataset(records: usize) -> Dataset {
        let recs: Vec<DatasetRecord> = (0..records)
            .map(|t| flat_record(t, 2, 3, 2, &[1, 2], 0.4))
            .collect();
        Dataset {
            m: 2,
            n: 3,
            k: 2,
            scaler: Scaler {
                min: vec![0.0; 3],
                max: vec![1.0; 3],
            },
            records: recs,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 5e-3,
            max_epochs: 6,
            patience: 6,
            hidden: 8,
            heads: 2,
            proto_dim: 4,
            graph_rounds: 1,
            pot: PotConfig {
                n_init: 4,
                init_quantile: 0.98,
                risk: 1e-2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let align = WindowAlignment {
            target: vec![0.5, 0.5],
            row_mask: vec![true],
            elem_mask: vec![1.0, 1.0],
            hosts_of_rows: vec![0],
        };
        assert_eq!(reconstruction_loss(&[0.5, 0.5], &align), 0.0);
        assert!((reconstruction_loss(&[0.6, 0.5], &align) - 0.01).abs() < 1e-12);
        // symmetric in the arguments
        let align2 = WindowAlignment {
            target: vec![0.6, 0.5],
            ..align
        };
        assert!(
            (reconstruction_loss(&[0.5, 0.5], &align2) - 0.01).abs() < 1e-12,
            "swap leaves value unchanged"
        );
    }

    #[test]
    fn triplet_examples() {
        // j = 1, phi = 0, P = mu_0, unit sigmas: L_T = -0.5 * ||mu0 - mu1||^2
        let stats = PrototypeStats {
            mu: vec![vec![0.2, 0.2], vec![0.8, 0.8]],
            sigma: vec![vec![1.0; 2]; 2],
            sigma_floor: 1e-2,
        };
        let p = vec![0.2, 0.2];
        let lt = triplet_loss(&p, 0, &stats).unwrap();
        let expect = -0.5 * (2.0 * 0.6 * 0.6);
        assert!((lt - expect).abs() < 1e-12);
        // equidistant from both classes -> 0
        let mid = vec![0.5, 0.5];
        assert!(triplet_loss(&mid, 0, &stats).unwrap().abs() < 1e-12);
        // decreasing the positive distance strictly decreases the loss
        let closer = vec![0.3, 0.3];
        assert!(triplet_loss(&closer, 0, &stats).unwrap() < triplet_loss(&mid, 0, &stats).unwrap());
    }

    #[test]
    fn triplet_gradient_sign_on_1d_instance() {
        // hand-derived: L_T(p) = (mu0-p)^2/2 - (mu1-p)^2/2 with unit sigmas;
        // dL/dp = (p - mu0) - (p - mu1) = mu1 - mu0
        let stats = PrototypeStats {
            mu: vec![vec![0.2], vec![0.9]],
            sigma: vec![vec![1.0]; 2],
            sigma_floor: 1e-2,
        };
        let mut tape = Tape::new();
        let p = tape.leaf(&[1], vec![0.6], true).unwrap();
        let lt = triplet_loss_on_tape(&mut tape, p, 0, &stats).unwrap();
        tape.backward(lt).unwrap();
        let g = tape.grad(p).unwrap()[0];
        assert!((g - (0.9 - 0.2)).abs() < 1e-12);
        // gradient pushes P toward mu_0 and away from mu_1 (descent lowers p
        // toward 0.2 here)
        assert!(g > 0.0);
    }

    #[test]
    fn class_stats_match_two_pass_oracle() {
        let ds = tiny_dataset(6);
        let cfg = tiny_config();
        let model = Model::new(cfg.model_config(2, 3, 2), 3).unwrap();
        let stats = PrototypeStats::fresh(4, 4, 1e-2);
        let pot = PotState::new(cfg.pot);
        let pairs = consecutive_pairs(&ds);
        let out = compute_class_stats(&model, &pairs, &pot, &stats, true).unwrap();
        // oracle: independent mean/std over the same prototype vectors
        let mut protos = Vec::new();
        for (rec, next) in &pairs {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let ev = eval_record(&mut tape, &model, &binding, rec, next, Mode::Eval).unwrap();
            protos.push(ev.proto);
        }
        let n = protos.len() as f64;
        for d in 0..4 {
            let mean: f64 = protos.iter().map(|p| p[d]).sum::<f64>() / n;
            let var: f64 = protos.iter().map(|p| (p[d] - mean) * (p[d] - mean)).sum::<f64>() / n;
            assert!((out.mu[0][d] - mean).abs() < 1e-12);
            assert!((out.sigma[0][d] - var.sqrt().max(1e-2)).abs() < 1e-12);
        }
        // identical records give zero std -> floored
        assert!(out.sigma[0].iter().all(|&s| s >= 1e-2));
        // untouched classes keep previous stats
        assert_eq!(out.mu[1], stats.mu[1]);
    }

    #[test]
    fn identical_records_drive_reconstruction_down() {
        let ds = tiny_dataset(10);
        let cfg = tiny_config();
        let result = train_offline(&ds, &cfg).unwrap();
        assert!(result.final_recon <= result.first_epoch_recon);
        // constant no-fault data: no positives fire
        assert_eq!(result.detection.tp + result.detection.fp, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(8);
        let cfg = tiny_config();
        let a = train_offline(&ds, &cfg).unwrap();
        let b = train_offline(&ds, &cfg).unwrap();
        assert_eq!(a.model.params.checksum(), b.model.params.checksum());
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ds = tiny_dataset(8);
        let cfg = tiny_config();
        let result = train_offline(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            model: result.model,
            stats: result.stats,
            pot: result.pot,
            scaler: ds.scaler.clone(),
        };
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.model.params.checksum(), ckpt.model.params.checksum());
        assert_eq!(loaded.stats, ckpt.stats);
        assert_eq!(loaded.scaler, ckpt.scaler);
        assert_eq!(
            loaded.pot.serialize_fields(),
            ckpt.pot.serialize_fields()
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = tiny_dataset(1);
        assert!(matches!(
            train_offline(&ds, &tiny_config()),
            Err(TrainError::EmptyDataset)
        ));
    }
}
