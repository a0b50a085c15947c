//! The composite surrogate network: a decision encoder over the placement
//! matrix, a state encoder over the sliding window (masked time attention
//! plus a gated graph convolution over the migration graph), a window
//! decoder, and a prototype head. Maps (window, schedule) to a predicted
//! next window in (0,1) and a prototype vector, differentiable with respect
//! to a relaxed schedule.

use crate::sim::ScheduleMatrix;
use crate::telemetry::StateWindow;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{GruParams, NdArray, ParamSet, Tape, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Shared hidden width d.
    pub hidden: usize,
    /// Heads of the decision attention (must divide `hidden`).
    pub heads: usize,
    /// Heads of the masked time attention (must divide `n`).
    pub state_heads: usize,
    /// Prototype vector dimension.
    pub proto_dim: usize,
    /// Message-passing rounds of the graph encoder.
    pub graph_rounds: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        ModelConfig {
            m,
            n,
            k,
            hidden: 32,
            heads: 4,
            state_heads: 1,
            proto_dim: 8,
            graph_rounds: 2,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(ModelError::Config("m, n, k must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads {} must divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if self.n % self.state_heads != 0 {
            return Err(ModelError::Config(format!(
                "state_heads {} must divide n {}",
                self.state_heads, self.n
            )));
        }
        Ok(())
    }
}

/// Schedule input to the forward pass: a one-hot matrix, or a row-stochastic
/// tensor already on the tape (gradient flows into it).
pub enum ScheduleInput<'a> {
    Discrete(&'a ScheduleMatrix),
    Relaxed(TensorId),
}

pub struct ForwardOutput {
    /// Predicted next window, `(m+p) x (n*k)`, entries in (0,1). Row layout
    /// matches [`StateWindow`]'s per-entity block (feature-major, then time).
    pub w_hat: TensorId,
    /// Prototype vector, shape `[proto_dim]`, entries in (0,1).
    pub proto: TensorId,
    /// Decision attention over entities, `p x (m+p)` row-stochastic values.
    pub attn: Vec<f64>,
    /// Batch statistics of the decision batch norm (train mode only).
    pub bn_batch: Option<(Vec<f64>, Vec<f64>)>,
}

/// Parameter leaves bound onto a tape for one forward/backward pass.
pub struct Binding {
    ids: Vec<(String, TensorId)>,
}

impl Binding {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .1
    }

    /// Gradients of every bound parameter after backward, in insertion order.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        self.ids
            .iter()
            .map(|(name, id)| {
                let g = tape
                    .grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(*id).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    /// Running statistics of the decision batch norm (eval mode input).
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
}

const GRU_GATES: [&str; 3] = ["update", "reset", "cand"];

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = cfg.hidden;
        let (m, n, k) = (cfg.m, cfg.n, cfg.k);
        let kn = k * n;
        let mut weight = |params: &mut ParamSet, name: &str, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            params.insert(name, NdArray::new(vec![rows, cols], data));
        };
        let bias = |params: &mut ParamSet, name: &str, len: usize| {
            params.insert(name, NdArray::zeros(&[len]));
        };
        let norm = |params: &mut ParamSet, prefix: &str, len: usize| {
            params.insert(&format!("{prefix}.gamma"), NdArray::filled(&[len], 1.0));
            params.insert(&format!("{prefix}.beta"), NdArray::zeros(&[len]));
        };

        weight(&mut params, "dec_ff.w", m, d);
        bias(&mut params, "dec_ff.b", d);
        norm(&mut params, "dec_bn", d);
        for part in ["q", "k", "v", "o"] {
            weight(&mut params, &format!("dec_att.w{part}"), d, d);
            bias(&mut params, &format!("dec_att.b{part}"), d);
            weight(&mut params, &format!("state_att.w{part}"), n, n);
            bias(&mut params, &format!("state_att.b{part}"), n);
        }
        norm(&mut params, "state_ln", n);
        weight(&mut params, "graph.w", n, d);
        bias(&mut params, "graph.b", d);
        weight(&mut params, "graph.conv", d, d);
        for gate in GRU_GATES {
            weight(&mut params, &format!("graph_gru.w_{gate}"), d, d);
            weight(&mut params, &format!("graph_gru.u_{gate}"), d, d);
            bias(&mut params, &format!("graph_gru.b_{gate}"), d);
        }
        weight(&mut params, "fusion_ff.w", kn + d, d);
        bias(&mut params, "fusion_ff.b", d);
        weight(&mut params, "score_ff.w", kn + d, 1);
        bias(&mut params, "score_ff.b", 1);
        norm(&mut params, "dec_ln", d);
        weight(&mut params, "decoder_ff.w", d, kn);
        bias(&mut params, "decoder_ff.b", kn);
        weight(&mut params, "proto_ff.w", d, cfg.proto_dim);
        bias(&mut params, "proto_ff.b", cfg.proto_dim);

        Ok(Model {
            cfg,
            params,
            bn_mean: vec![0.0; d],
            bn_var: vec![1.0; d],
        })
    }

    /// Number of trainable scalars (running norm buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding, ModelError> {
        let mut ids = Vec::with_capacity(self.params.len());
        for (name, value) in self.params.iter() {
            let id = tape.leaf(&value.shape, value.data.clone(), trainable)?;
            ids.push((name.to_string(), id));
        }
        Ok(Binding { ids })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn absorb_bn(&mut self, batch: &(Vec<f64>, Vec<f64>)) {
        let mom = self.cfg.bn_momentum;
        for i in 0..self.bn_mean.len() {
            self.bn_mean[i] = (1.0 - mom) * self.bn_mean[i] + mom * batch.0[i];
            self.bn_var[i] = (1.0 - mom) * self.bn_var[i] + mom * batch.1[i];
        }
    }

    /// Applies collected gradients through an optimizer-owned closure; kept
    /// here so callers never touch `ParamSet` layout directly.
    pub fn apply<F: FnOnce(&mut ParamSet)>(&mut self, f: F) {
        f(&mut self.params);
    }

    /// Multi-head attention block. `q`,`kx` are `(rows_q x dim)` and
    /// `(rows_k x dim)`; `v` is `(rows_k x dim)`. Optional mask is over the
    /// `(rows_q x rows_k)` score matrix.
    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        tape: &mut Tape,
        b: &Binding,
        prefix: &str,
        q: TensorId,
        kx: TensorId,
        v: TensorId,
        heads: usize,
        dim: usize,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, ModelError> {
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qp = tape.linear(q, b.id(&format!("{prefix}.wq")), b.id(&format!("{prefix}.bq")))?;
        let kp = tape.linear(kx, b.id(&format!("{prefix}.wk")), b.id(&format!("{prefix}.bk")))?;
        let vp = tape.linear(v, b.id(&format!("{prefix}.wv")), b.id(&format!("{prefix}.bv")))?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(qp, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(kp, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(vp, h * head_dim, head_dim)?;
            let scores = tape.matmul_trans_b(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let masked = match mask {
                Some(mask) => tape.masked_fill(scaled, mask, -1e30)?,
                None => scaled,
            };
            let weights = tape.softmax_rows(masked)?;
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let mut cat = head_outs[0];
        for &h in &head_outs[1..] {
            cat = tape.concat_cols(cat, h)?;
        }
        Ok(tape.linear(
            cat,
            b.id(&format!("{prefix}.wo")),
            b.id(&format!("{prefix}.bo")),
        )?)
    }

    /// Masked time attention + residual layer norm per entity, stacked into
    /// an `(m+p) x (k*n)` matrix.
    fn encode_window(
        &self,
        tape: &mut Tape,
        b: &Binding,
        window: &StateWindow,
    ) -> Result<TensorId, ModelError> {
        let (n, k) = (self.cfg.n, self.cfg.k);
        // causal mask over k x k scores: step i attends to steps <= i
        let mask: Vec<bool> = (0..k * k).map(|i| i % k > i / k).collect();
        let mut flats = Vec::with_capacity(window.entities());
        for e in 0..window.entities() {
            let rows = tape.constant(&[k, n], window.entity_time_rows(e))?;
            let att = self.mha(
                tape,
                b,
                "state_att",
                rows,
                rows,
                rows,
                self.cfg.state_heads,
                n,
                Some(&mask),
            )?;
            let res = tape.add(rows, att)?;
            let normed = tape.layer_norm(
                res,
                b.id("state_ln.gamma"),
                b.id("state_ln.beta"),
                self.cfg.norm_eps,
            )?;
            flats.push(tape.reshape(normed, &[k * n])?);
        }
        Ok(tape.stack_rows(&flats)?)
    }

    /// Gated graph convolution over the migration graph induced by the
    /// decision: edge i -> j when a task placed on host i targets host j.
    fn encode_graph(
        &self,
        tape: &mut Tape,
        b: &Binding,
        window: &StateWindow,
        targets: &[usize],
        placements: &[Option<usize>],
    ) -> Result<TensorId, ModelError> {
        let (m, n, d) = (self.cfg.m, self.cfg.n, self.cfg.hidden);
        // node features: host rows of the newest time step
        let mut feats = Vec::with_capacity(m * n);
        for h in 0..m {
            for f in 0..n {
                feats.push(window.at(h, f, self.cfg.k - 1));
            }
        }
        let f = tape.constant(&[m, n], feats)?;
        let lin = tape.linear(f, b.id("graph.w"), b.id("graph.b"))?;
        let mut e = tape.tanh(lin);
        // in-neighbor adjacency: adj[i][j] = 1 iff edge j -> i
        let mut adj = vec![0.0; m * m];
        for (row, placement) in placements.iter().enumerate() {
            if let Some(src) = placement {
                let dst = targets[row];
                if dst != *src {
                    adj[dst * m + *src] = 1.0;
                }
            }
        }
        let adj = tape.constant(&[m, m], adj)?;
        let gru = GruParams {
            w_update: b.id("graph_gru.w_update"),
            u_update: b.id("graph_gru.u_update"),
            b_update: b.id("graph_gru.b_update"),
            w_reset: b.id("graph_gru.w_reset"),
            u_reset: b.id("graph_gru.u_reset"),
            b_reset: b.id("graph_gru.b_reset"),
            w_cand: b.id("graph_gru.w_cand"),
            u_cand: b.id("graph_gru.u_cand"),
            b_cand: b.id("graph_gru.b_cand"),
        };
        for _ in 0..self.cfg.graph_rounds {
            let msg = tape.matmul(e, b.id("graph.conv"))?;
            let agg = tape.matmul(adj, msg)?;
            e = tape.gru_cell(e, agg, &gru)?;
        }
        let _ = d;
        Ok(e)
    }

    /// Eq-1 style decision encoding: `ReLU(BatchNorm(FF(S)))` per task row.
    fn encode_decision(
        &self,
        tape: &mut Tape,
        b: &Binding,
        s_id: TensorId,
        mode: Mode,
    ) -> Result<(TensorId, Option<(Vec<f64>, Vec<f64>)>), ModelError> {
        let pre = tape.linear(s_id, b.id("dec_ff.w"), b.id("dec_ff.b"))?;
        let (bn, bn_batch) = match mode {
            Mode::Train => {
                let (id, mean, var) = tape.batch_norm_train(
                    pre,
                    b.id("dec_bn.gamma"),
                    b.id("dec_bn.beta"),
                    self.cfg.norm_eps,
                )?;
                (id, Some((mean, var)))
            }
            Mode::Eval => (
                tape.batch_norm_eval(
                    pre,
                    b.id("dec_bn.gamma"),
                    b.id("dec_bn.beta"),
                    &self.bn_mean,
                    &self.bn_var,
                    self.cfg.norm_eps,
                )?,
                None,
            ),
        };
        Ok((tape.relu(bn), bn_batch))
    }

    /// Decision refinement: residual attention of the task encodings over
    /// the final window encoding, normalized, rectified, and mean-pooled
    /// over task rows into a fixed-size vector.
    fn refine_decision(
        &self,
        tape: &mut Tape,
        b: &Binding,
        es: TensorId,
        ew: TensorId,
    ) -> Result<(TensorId, TensorId), ModelError> {
        let att = self.mha(
            tape,
            b,
            "dec_att",
            es,
            es,
            ew,
            self.cfg.heads,
            self.cfg.hidden,
            None,
        )?;
        let res = tape.add(es, att)?;
        let es1 = tape.layer_norm(
            res,
            b.id("dec_ln.gamma"),
            b.id("dec_ln.beta"),
            self.cfg.norm_eps,
        )?;
        let es2_rows = tape.relu(es1);
        let pooled = tape.mean_rows(es2_rows)?;
        Ok((es2_rows, pooled))
    }

    /// Full forward pass. `placements` gives each task row's current host
    /// (`None` for new tasks); the migration graph and the per-task host
    /// association both use it, falling back to the decision's argmax target
    /// for unplaced tasks.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        window: &StateWindow,
        schedule: ScheduleInput<'_>,
        placements: &[Option<usize>],
        mode: Mode,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.cfg;
        let p = window.p();
        let m = cfg.m;
        if window.m != m || window.n != cfg.n || window.k != cfg.k {
            return Err(ModelError::Input(format!(
                "window (m={}, n={}, k={}) vs model (m={}, n={}, k={})",
                window.m, window.n, window.k, m, cfg.n, cfg.k
            )));
        }
        if p == 0 {
            return Err(ModelError::Input("forward requires at least one task".into()));
        }
        if placements.len() != p {
            return Err(ModelError::Input(format!(
                "{} placements for {} task rows",
                placements.len(),
                p
            )));
        }
        let s_id = match schedule {
            ScheduleInput::Discrete(s) => {
                if s.tasks != p || s.hosts != m {
                    return Err(ModelError::Input(format!(
                        "schedule {}x{} vs window p={} m={}",
                        s.tasks, s.hosts, p, m
                    )));
                }
                tape.constant(&[p, m], s.rows.clone())?
            }
            ScheduleInput::Relaxed(id) => {
                let shape = tape.shape(id);
                if shape != [p, m] {
                    return Err(ModelError::Input(format!(
                        "relaxed schedule shape {shape:?} vs p={p} m={m}"
                    )));
                }
                id
            }
        };
        // argmax targets for graph edges and host association
        let targets: Vec<usize> = {
            let rows = tape.value(s_id);
            (0..p)
                .map(|i| {
                    let row = &rows[i * m..(i + 1) * m];
                    let mut best = 0;
                    for j in 1..m {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        };

        // state side
        let ew2 = self.encode_window(tape, b, window)?;
        let eh = self.encode_graph(tape, b, window, &targets, placements)?;

        // decision encoder
        let (es, bn_batch) = self.encode_decision(tape, b, s_id, mode)?;

        // per-entity host association: own row for hosts, placed host for
        // tasks (argmax target when unplaced)
        let mut assoc = Vec::with_capacity(m + p);
        assoc.extend(0..m);
        for (i, placement) in placements.iter().enumerate() {
            assoc.push(placement.unwrap_or(targets[i]));
        }
        let eh_assoc = tape.gather_rows(eh, &assoc)?;

        // fused window encoding and attention scores
        let fused_in = tape.concat_cols(ew2, eh_assoc)?;
        let fused = tape.linear(fused_in, b.id("fusion_ff.w"), b.id("fusion_ff.b"))?;
        let ew3 = tape.relu(fused);

        let mut score_rows = Vec::with_capacity(p);
        for i in 0..p {
            let es_row = tape.gather_rows(es, &[i])?;
            let es_flat = tape.reshape(es_row, &[cfg.hidden])?;
            let rep = tape.repeat_rows(es_flat, m + p)?;
            let cat = tape.concat_cols(ew2, rep)?;
            let sc = tape.linear(cat, b.id("score_ff.w"), b.id("score_ff.b"))?;
            score_rows.push(tape.reshape(sc, &[m + p])?);
        }
        let scores = tape.stack_rows(&score_rows)?;
        let attn = tape.softmax_rows(scores)?;
        let ew = tape.matmul(attn, ew3)?;

        // decision refinement over the final window encoding
        let (_es2_rows, pooled) = self.refine_decision(tape, b, es, ew)?;

        // decoder and prototype heads
        let pooled_rep = tape.repeat_rows(pooled, m + p)?;
        let z = tape.add(ew3, pooled_rep)?;
        let dec = tape.linear(z, b.id("decoder_ff.w"), b.id("decoder_ff.b"))?;
        let w_hat = tape.sigmoid(dec);

        let pooled_row = tape.reshape(pooled, &[1, cfg.hidden])?;
        let proto_lin = tape.linear(pooled_row, b.id("proto_ff.w"), b.id("proto_ff.b"))?;
        let proto_mat = tape.sigmoid(proto_lin);
        let proto = tape.reshape(proto_mat, &[cfg.proto_dim])?;

        Ok(ForwardOutput {
            w_hat,
            proto,
            attn: tape.value(attn).to_vec(),
            bn_batch,
        })
    }
}

/// Relaxes an unconstrained logit matrix into a row-stochastic schedule on
/// the tape (temperature-scaled row softmax).
pub fn relax_logits(
    tape: &mut Tape,
    logits: TensorId,
    temperature: f64,
) -> Result<TensorId, ModelError> {
    let scaled = tape.scale(logits, 1.0 / temperature);
    Ok(tape.softmax_rows(scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            m: 2,
            n: 3,
            k: 2,
            hidden: 8,
            heads: 2,
            state_heads: 1,
            proto_dim: 4,
            graph_rounds: 1,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    fn tiny_window(m: usize, n: usize, k: usize, task_ids: &[u64], seed: u64) -> StateWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = task_ids.len();
        StateWindow {
            m,
            n,
            k,
            task_ids: task_ids.to_vec(),
            data: (0..(m + p) * n * k).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn forward_shapes_on_tiny_instance() {
        let model = Model::new(tiny_cfg(), 7).unwrap();
        let window = tiny_window(2, 3, 2, &[10, 11], 1);
        let schedule = ScheduleMatrix::from_targets(&[0, 1], 2);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false).unwrap();
        let out = model
            .forward(
                &mut tape,
                &binding,
                &window,
                ScheduleInput::Discrete(&schedule),
                &[Some(0), Some(1)],
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(tape.shape(out.w_hat), &[4, 6]);
        assert_eq!(tape.shape(out.proto), &[4]);
        assert_eq!(out.attn.len(), 2 * 4);
        for v in tape.value(out.w_hat) {
            assert!(*v > 0.0 && *v < 1.0, "sigmoid output in open interval");
        }
        for v in tape.value(out.proto) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        // attention rows sum to 1
        for row in out.attn.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_forward() {
        let model = Model::new(tiny_cfg(), 9).unwrap();
        let window = tiny_window(2, 3, 2, &[1, 2], 5);
        let schedule = ScheduleMatrix::from_targets(&[1, 1], 2);
        let run = || {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let out = model
                .forward(
                    &mut tape,
                    &binding,
                    &window,
                    ScheduleInput::Discrete(&schedule),
                    &[Some(0), None],
                    Mode::Eval,
                )
                .unwrap();
            (
                tape.value(out.w_hat).to_vec(),
                tape.value(out.proto).to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn param_count_independent_of_p_and_affine_in_m() {
        let count = |m: usize| {
            let mut cfg = tiny_cfg();
            cfg.m = m;
            Model::new(cfg, 0).unwrap().param_count()
        };
        // p never appears in any parameter shape: same model serves any p
        let model = Model::new(tiny_cfg(), 0).unwrap();
        for p in [1usize, 10, 100] {
            let window = tiny_window(2, 3, 2, &(0..p as u64).collect::<Vec<_>>(), p as u64);
            let schedule = ScheduleMatrix::from_targets(&vec![0; p], 2);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            model
                .forward(
                    &mut tape,
                    &binding,
                    &window,
                    ScheduleInput::Discrete(&schedule),
                    &vec![Some(0); p],
                    Mode::Eval,
                )
                .unwrap();
            assert_eq!(model.param_count(), count(2));
        }
        // affine in m: constant increment per host
        let d1 = count(3) - count(2);
        let d2 = count(4) - count(3);
        let d3 = count(5) - count(4);
        assert_eq!(d1, d2);
        assert_eq!(d2, d3);
    }

    #[test]
    fn causal_mask_blocks_future_steps() {
        // changing the last time step must not change E^W_2 rows of earlier
        // steps; observed through the stacked encoding of a single entity
        let cfg = tiny_cfg();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let mut window = tiny_window(2, 3, 2, &[], 8);
        let encode = |model: &Model, window: &StateWindow| {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let ew2 = model.encode_window(&mut tape, &binding, window).unwrap();
            tape.value(ew2).to_vec()
        };
        let base = encode(&model, &window);
        // perturb the newest step (s = k-1) of entity 0
        let k = cfg.k;
        window.data[0 * k + (k - 1)] += 0.3;
        let bumped = encode(&model, &window);
        // per-entity flat layout is time-major rows of length n: row 0 is the
        // oldest step and must be untouched
        for f in 0..cfg.n {
            assert!(
                (base[f] - bumped[f]).abs() < 1e-12,
                "earlier step changed under causal mask"
            );
        }
        // the newest step does change
        let off = (k - 1) * cfg.n;
        assert!((base[off] - bumped[off]).abs() > 1e-9);
    }

    #[test]
    fn task_row_permutation_leaves_pooled_heads_unchanged() {
        let model = Model::new(tiny_cfg(), 21).unwrap();
        let window = tiny_window(2, 3, 2, &[1, 2, 3], 4);
        let schedule = ScheduleMatrix::from_targets(&[0, 1, 0], 2);
        let placements = [Some(0), Some(1), Some(1)];
        let run = |perm: &[usize]| {
            let mut w = window.clone();
            let p = perm.len();
            let nk = w.n * w.k;
            let mut data = w.data[..w.m * nk].to_vec();
            for &src in perm {
                data.extend_from_slice(
                    &window.data[(window.m + src) * nk..(window.m + src + 1) * nk],
                );
            }
            w.data = data;
            w.task_ids = perm.iter().map(|&i| window.task_ids[i]).collect();
            let targets: Vec<usize> = perm.iter().map(|&i| schedule.targets()[i]).collect();
            let s = ScheduleMatrix::from_targets(&targets, 2);
            let pl: Vec<Option<usize>> = perm.iter().map(|&i| placements[i]).collect();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let out = model
                .forward(
                    &mut tape,
                    &binding,
                    &w,
                    ScheduleInput::Discrete(&s),
                    &pl,
                    Mode::Eval,
                )
                .unwrap();
            let _ = p;
            (
                tape.value(out.w_hat).to_vec(),
                tape.value(out.proto).to_vec(),
            )
        };
        let (w_id, proto_id) = run(&[0, 1, 2]);
        let (w_pm, proto_pm) = run(&[2, 0, 1]);
        for (a, b) in proto_id.iter().zip(&proto_pm) {
            assert!((a - b).abs() < 1e-9, "prototype changed under permutation");
        }
        // host rows of the decoded window are also permutation invariant
        for i in 0..2 * 6 {
            assert!((w_id[i] - w_pm[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_task_rows_keep_pooled_output_in_eval_mode() {
        // decision-encoder contract: duplicating every task row of S (and
        // correspondingly of E^W) leaves the pooled vector unchanged when
        // norms run in eval mode
        let model = Model::new(tiny_cfg(), 33).unwrap();
        let d = model.cfg.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let p = 3;
        let s_rows: Vec<f64> = ScheduleMatrix::from_targets(&[1, 0, 1], 2).rows;
        let ew_rows: Vec<f64> = (0..p * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |dup: bool| {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let (rows, ew_data, count) = if dup {
                let mut r = s_rows.clone();
                r.extend_from_slice(&s_rows);
                let mut e = ew_rows.clone();
                e.extend_from_slice(&ew_rows);
                (r, e, 2 * p)
            } else {
                (s_rows.clone(), ew_rows.clone(), p)
            };
            let s_id = tape.constant(&[count, 2], rows).unwrap();
            let ew = tape.constant(&[count, d], ew_data).unwrap();
            let (es, _) = model
                .encode_decision(&mut tape, &binding, s_id, Mode::Eval)
                .unwrap();
            let (_, pooled) = model.refine_decision(&mut tape, &binding, es, ew).unwrap();
            tape.value(pooled).to_vec()
        };
        let single = run(false);
        let doubled = run(true);
        for (a, b) in single.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn migration_graph_edges() {
        // exercised through encode_graph: keeping tasks in place must match
        // an edgeless graph, a swap must differ from it
        let model = Model::new(tiny_cfg(), 13).unwrap();
        let window = tiny_window(2, 3, 2, &[1, 2], 6);
        let encode = |targets: &[usize], placements: &[Option<usize>]| {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let eh = model
                .encode_graph(&mut tape, &binding, &window, targets, placements)
                .unwrap();
            tape.value(eh).to_vec()
        };
        let stay = encode(&[0, 1], &[Some(0), Some(1)]);
        let new_tasks_only = encode(&[0, 1], &[None, None]);
        assert_eq!(stay, new_tasks_only, "no placements => no edges");
        let swap = encode(&[1, 0], &[Some(0), Some(1)]);
        assert_ne!(stay, swap);
    }

    #[test]
    fn relaxed_schedule_receives_gradient() {
        let model = Model::new(tiny_cfg(), 17).unwrap();
        let window = tiny_window(2, 3, 2, &[1, 2], 3);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false).unwrap();
        let logits = tape.leaf(&[2, 2], vec![0.3, -0.2, 0.1, 0.4], true).unwrap();
        let relaxed = relax_logits(&mut tape, logits, 1.0).unwrap();
        let out = model
            .forward(
                &mut tape,
                &binding,
                &window,
                ScheduleInput::Relaxed(relaxed),
                &[Some(0), Some(1)],
                Mode::Eval,
            )
            .unwrap();
        let loss_w = tape.sum_all(out.w_hat);
        let loss_p = tape.sum_all(out.proto);
        let loss = tape.add(loss_w, loss_p).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).expect("gradient should reach the logits");
        assert!(g.iter().any(|v| v.abs() > 1e-12));
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
