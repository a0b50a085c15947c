use thiserror::Error;

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a 2-d tensor, got {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Matmul(TensorId, TensorId),
    /// `a * b^T` without materializing the transpose.
    MatmulTransB(TensorId, TensorId),
    AddRowBias(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Square(TensorId),
    SoftmaxRows(TensorId),
    MaskedFill(TensorId, Vec<bool>),
    ConcatCols(TensorId, TensorId),
    SliceCols(TensorId, usize, usize),
    StackRows(Vec<TensorId>),
    GatherRows(TensorId, Vec<usize>),
    RepeatRows(TensorId, usize),
    Reshape(TensorId),
    SumAll(TensorId),
    MeanRows(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records every primitive application in topological order; `backward`
/// replays the record once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient at `id` after `backward`; `None` if nothing flowed there.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(
        &mut self,
        shape: &[usize],
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::BadData {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId, TensorError> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        let shape = &self.nodes[id.0].shape;
        if shape.len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: shape.clone(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, rg, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, s) = self.matrix_dims("matmul", a)?;
        let (s2, c) = self.matrix_dims("matmul", b)?;
        if s != s2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![r, s],
                rhs: vec![s2, c],
            });
        }
        let mut value = vec![0.0; r * c];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..r {
                for k in 0..s {
                    let aik = av[i * s + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * c..(k + 1) * c];
                    let out = &mut value[i * c..(i + 1) * c];
                    for j in 0..c {
                        out[j] += aik * brow[j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![r, c], value, rg, Op::Matmul(a, b)))
    }

    /// `a (r×s) * b^T` where `b` is `(c×s)`; result is `(r×c)`.
    pub fn matmul_trans_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, s) = self.matrix_dims("matmul_trans_b", a)?;
        let (c, s2) = self.matrix_dims("matmul_trans_b", b)?;
        if s != s2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_trans_b",
                lhs: vec![r, s],
                rhs: vec![c, s2],
            });
        }
        let mut value = vec![0.0; r * c];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..r {
                for j in 0..c {
                    let mut acc = 0.0;
                    for k in 0..s {
                        acc += av[i * s + k] * bv[j * s + k];
                    }
                    value[i * c + j] = acc;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![r, c], value, rg, Op::MatmulTransB(a, b)))
    }

    /// Adds a 1-d bias of length `c` to every row of an `(r×c)` matrix.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("add_row_bias", a)?;
        if numel(&self.nodes[bias.0].shape) != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: vec![r, c],
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        {
            let bv = &self.nodes[bias.0].value;
            for i in 0..r {
                for j in 0..c {
                    value[i * c + j] += bv[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(vec![r, c], value, rg, Op::AddRowBias(a, bias)))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Tanh(a))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * x).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Square(a))
    }

    /// Row-wise softmax of a 2-d tensor (max-subtracted for stability).
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("softmax_rows", a)?;
        let mut value = vec![0.0; r * c];
        {
            let av = &self.nodes[a.0].value;
            for i in 0..r {
                let row = &av[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    value[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    value[i * c + j] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![r, c], value, rg, Op::SoftmaxRows(a)))
    }

    /// Replaces entries where `mask` is true with `fill`; gradient is blocked
    /// at masked positions.
    pub fn masked_fill(
        &mut self,
        a: TensorId,
        mask: &[bool],
        fill: f64,
    ) -> Result<TensorId, TensorError> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(TensorError::Invalid(format!(
                "masked_fill: mask length {} vs tensor length {}",
                mask.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(mask)
            .map(|(x, &m)| if m { fill } else { *x })
            .collect();
        let rg = self.requires(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            value,
            rg,
            Op::MaskedFill(a, mask.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, ca) = self.matrix_dims("concat_cols", a)?;
        let (r2, cb) = self.matrix_dims("concat_cols", b)?;
        if r != r2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![r, ca],
                rhs: vec![r2, cb],
            });
        }
        let mut value = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            value.extend_from_slice(&self.nodes[a.0].value[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&self.nodes[b.0].value[i * cb..(i + 1) * cb]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![r, ca + cb], value, rg, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if start + len > c {
            return Err(TensorError::Invalid(format!(
                "slice_cols: columns {}..{} out of bounds for width {}",
                start,
                start + len,
                c
            )));
        }
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&self.nodes[a.0].value[i * c + start..i * c + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![r, len], value, rg, Op::SliceCols(a, start, len)))
    }

    /// Stacks equal-length 1-d tensors (or single-row matrices) into an
    /// `(n×c)` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Invalid("stack_rows: empty input".into()));
        }
        let c = numel(&self.nodes[rows[0].0].shape);
        let mut value = Vec::with_capacity(rows.len() * c);
        let mut rg = false;
        for &id in rows {
            if numel(&self.nodes[id.0].shape) != c {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: self.nodes[id.0].shape.clone(),
                });
            }
            value.extend_from_slice(&self.nodes[id.0].value);
            rg |= self.requires(id);
        }
        Ok(self.push(vec![rows.len(), c], value, rg, Op::StackRows(rows.to_vec())))
    }

    /// Selects rows of `a` by index (duplicates allowed); backward
    /// scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("gather_rows", a)?;
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid(format!(
                    "gather_rows: row {} out of bounds for {} rows",
                    i, r
                )));
            }
            value.extend_from_slice(&self.nodes[a.0].value[i * c..(i + 1) * c]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            vec![idx.len(), c],
            value,
            rg,
            Op::GatherRows(a, idx.to_vec()),
        ))
    }

    /// Repeats a 1-d tensor (or single row) `times` times as matrix rows.
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> Result<TensorId, TensorError> {
        let c = numel(&self.nodes[a.0].shape);
        if times == 0 {
            return Err(TensorError::Invalid("repeat_rows: times = 0".into()));
        }
        let mut value = Vec::with_capacity(times * c);
        for _ in 0..times {
            value.extend_from_slice(&self.nodes[a.0].value);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![times, c], value, rg, Op::RepeatRows(a, times)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.requires(a);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![s], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of an `(r×c)` matrix, shape `[c]`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("mean_rows", a)?;
        let mut value = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                value[j] += self.nodes[a.0].value[i * c + j];
            }
        }
        for v in value.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.requires(a);
        Ok(self.push(vec![c], value, rg, Op::MeanRows(a)))
    }

    /// Per-row layer normalization with learned scale/shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        if numel(&self.nodes[gamma.0].shape) != c || numel(&self.nodes[beta.0].shape) != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut value = vec![0.0; r * c];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[i] = istd;
                for j in 0..c {
                    let h = (row[j] - mean) * istd;
                    xhat[i * c + j] = h;
                    value[i * c + j] = gv[j] * h + bv[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            vec![r, c],
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization over the row axis using batch statistics.
    /// Returns `(output, batch_mean, batch_var)`; the caller owns any
    /// running-statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>), TensorError> {
        let (r, c) = self.matrix_dims("batch_norm", x)?;
        if numel(&self.nodes[gamma.0].shape) != c || numel(&self.nodes[beta.0].shape) != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![r, c],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xv = &self.nodes[x.0].value;
            for i in 0..r {
                for j in 0..c {
                    mean[j] += xv[i * c + j];
                }
            }
            for m in mean.iter_mut() {
                *m /= r as f64;
            }
            for i in 0..r {
                for j in 0..c {
                    let d = xv[i * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= r as f64;
            }
        }
        let id = self.batch_norm_with_stats(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((id, mean, var))
    }

    /// Batch normalization with externally supplied (frozen) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        self.batch_norm_with_stats(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with_stats(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.matrix_dims("batch_norm", x)?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::Invalid(format!(
                "batch_norm: stats length {} vs {} columns",
                mean.len(),
                c
            )));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; c];
        let mut value = vec![0.0; r * c];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            for j in 0..c {
                inv_std[j] = 1.0 / (var[j] + eps).sqrt();
            }
            for i in 0..r {
                for j in 0..c {
                    let h = (xv[i * c + j] - mean[j]) * inv_std[j];
                    xhat[i * c + j] = h;
                    value[i * c + j] = gv[j] * h + bv[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let op = if train {
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        };
        Ok(self.push(vec![r, c], value, rg, op))
    }

    /// Affine layer `x * w + b` for `x (r×s)`, `w (s×c)`, `b [c]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// One gated-recurrent-unit step over row-major batches:
    /// `h (r×d)`, `x (r×d_in)` -> new hidden `(r×d)`.
    pub fn gru_cell(
        &mut self,
        h: TensorId,
        x: TensorId,
        p: &GruParams,
    ) -> Result<TensorId, TensorError> {
        let zx = self.linear(x, p.w_update, p.b_update)?;
        let zh = self.matmul(h, p.u_update)?;
        let z_pre = self.add(zx, zh)?;
        let z = self.sigmoid(z_pre);

        let rx = self.linear(x, p.w_reset, p.b_reset)?;
        let rh = self.matmul(h, p.u_reset)?;
        let r_pre = self.add(rx, rh)?;
        let r = self.sigmoid(r_pre);

        let rh_gated = self.mul(r, h)?;
        let cx = self.linear(x, p.w_cand, p.b_cand)?;
        let ch = self.matmul(rh_gated, p.u_cand)?;
        let c_pre = self.add(cx, ch)?;
        let cand = self.tanh(c_pre);

        // h' = (1 - z) * h + z * cand
        let zh_new = self.mul(z, cand)?;
        let zc = self.mul(z, h)?;
        let keep = self.sub(h, zc)?;
        self.add(keep, zh_new)
    }

    /// Reverse pass from a scalar output; fills gradients of every node that
    /// requires them. Each recorded node is visited exactly once.
    pub fn backward(&mut self, out: TensorId) -> Result<(), TensorError> {
        if numel(&self.nodes[out.0].shape) != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[out.0].shape.clone(),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(gout);
                continue;
            }
            // Parents always precede the node, so split the arena there.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let acc = |before: &mut [Node], id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
                let parent = &mut before[id.0];
                if !parent.requires_grad {
                    return;
                }
                let g = parent
                    .grad
                    .get_or_insert_with(|| vec![0.0; parent.value.len()]);
                f(g);
            };
            match &node.op {
                Op::Leaf => unreachable!("leaf handled above"),
                Op::Add(a, b) => {
                    acc(before, *a, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                    acc(before, *b, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(before, *a, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                    acc(before, *b, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi -= go;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = before[b.0].value.clone();
                    let av = before[a.0].value.clone();
                    acc(before, a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * bv[k];
                        }
                    });
                    acc(before, b, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * av[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(before, *a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * c;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    acc(before, *a, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let r = node.shape[0];
                    let c = node.shape[1];
                    let s = before[a.0].shape[1];
                    let av = before[a.0].value.clone();
                    let bv = before[b.0].value.clone();
                    // dA = dY * B^T
                    acc(before, a, &mut |g| {
                        for i in 0..r {
                            for k in 0..s {
                                let mut accv = 0.0;
                                for j in 0..c {
                                    accv += gout[i * c + j] * bv[k * c + j];
                                }
                                g[i * s + k] += accv;
                            }
                        }
                    });
                    // dB = A^T * dY
                    acc(before, b, &mut |g| {
                        for k in 0..s {
                            for j in 0..c {
                                let mut accv = 0.0;
                                for i in 0..r {
                                    accv += av[i * s + k] * gout[i * c + j];
                                }
                                g[k * c + j] += accv;
                            }
                        }
                    });
                }
                Op::MatmulTransB(a, b) => {
                    let (a, b) = (*a, *b);
                    let r = node.shape[0];
                    let c = node.shape[1];
                    let s = before[a.0].shape[1];
                    let av = before[a.0].value.clone();
                    let bv = before[b.0].value.clone();
                    // Y = A * B^T: dA = dY * B ; dB = dY^T * A
                    acc(before, a, &mut |g| {
                        for i in 0..r {
                            for k in 0..s {
                                let mut accv = 0.0;
                                for j in 0..c {
                                    accv += gout[i * c + j] * bv[j * s + k];
                                }
                                g[i * s + k] += accv;
                            }
                        }
                    });
                    acc(before, b, &mut |g| {
                        for j in 0..c {
                            for k in 0..s {
                                let mut accv = 0.0;
                                for i in 0..r {
                                    accv += gout[i * c + j] * av[i * s + k];
                                }
                                g[j * s + k] += accv;
                            }
                        }
                    });
                }
                Op::AddRowBias(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let r = node.shape[0];
                    let c = node.shape[1];
                    acc(before, a, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                    acc(before, bias, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j];
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let a = *a;
                    let av = before[a.0].value.clone();
                    // Subgradient at exactly 0 is taken as 0.
                    acc(before, a, &mut |g| {
                        for k in 0..g.len() {
                            if av[k] > 0.0 {
                                g[k] += gout[k];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let yv = node.value.clone();
                    acc(before, a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * yv[k] * (1.0 - yv[k]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let yv = node.value.clone();
                    acc(before, a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * (1.0 - yv[k] * yv[k]);
                        }
                    });
                }
                Op::Square(a) => {
                    let a = *a;
                    let av = before[a.0].value.clone();
                    acc(before, a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * 2.0 * av[k];
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let r = node.shape[0];
                    let c = node.shape[1];
                    let yv = node.value.clone();
                    acc(before, a, &mut |g| {
                        for i in 0..r {
                            let row_y = &yv[i * c..(i + 1) * c];
                            let row_g = &gout[i * c..(i + 1) * c];
                            let dot: f64 = row_y.iter().zip(row_g).map(|(y, d)| y * d).sum();
                            for j in 0..c {
                                g[i * c + j] += row_y[j] * (row_g[j] - dot);
                            }
                        }
                    });
                }
                Op::MaskedFill(a, mask) => {
                    let a = *a;
                    let mask = mask.clone();
                    acc(before, a, &mut |g| {
                        for k in 0..g.len() {
                            if !mask[k] {
                                g[k] += gout[k];
                            }
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let r = node.shape[0];
                    let ca = before[a.0].shape[1];
                    let cb = before[b.0].shape[1];
                    let c = ca + cb;
                    acc(before, a, &mut |g| {
                        for i in 0..r {
                            for j in 0..ca {
                                g[i * ca + j] += gout[i * c + j];
                            }
                        }
                    });
                    acc(before, b, &mut |g| {
                        for i in 0..r {
                            for j in 0..cb {
                                g[i * cb + j] += gout[i * c + ca + j];
                            }
                        }
                    });
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let r = node.shape[0];
                    let c = before[a.0].shape[1];
                    acc(before, a, &mut |g| {
                        for i in 0..r {
                            for j in 0..len {
                                g[i * c + start + j] += gout[i * len + j];
                            }
                        }
                    });
                }
                Op::StackRows(rows) => {
                    let rows = rows.clone();
                    let c = node.shape[1];
                    for (i, id) in rows.iter().enumerate() {
                        acc(before, *id, &mut |g| {
                            for j in 0..c {
                                g[j] += gout[i * c + j];
                            }
                        });
                    }
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let c = node.shape[1];
                    acc(before, a, &mut |g| {
                        for (i, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                g[src * c + j] += gout[i * c + j];
                            }
                        }
                    });
                }
                Op::RepeatRows(a, times) => {
                    let (a, times) = (*a, *times);
                    let c = node.shape[1];
                    acc(before, a, &mut |g| {
                        for i in 0..times {
                            for j in 0..c {
                                g[j] += gout[i * c + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(before, *a, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                }
                Op::SumAll(a) => {
                    let d = gout[0];
                    acc(before, *a, &mut |g| {
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    });
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let r = before[a.0].shape[0];
                    let c = node.shape[0];
                    acc(before, a, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += gout[j] / r as f64;
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let r = node.shape[0];
                    let c = node.shape[1];
                    let gv = before[gamma.0].value.clone();
                    acc(before, gamma, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                    acc(before, beta, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j];
                            }
                        }
                    });
                    acc(before, x, &mut |g| {
                        for i in 0..r {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                let dxh = gout[i * c + j] * gv[j];
                                mean_d += dxh;
                                mean_dx += dxh * xhat[i * c + j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                let dxh = gout[i * c + j] * gv[j];
                                g[i * c + j] +=
                                    inv_std[i] * (dxh - mean_d - xhat[i * c + j] * mean_dx);
                            }
                        }
                    });
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let r = node.shape[0];
                    let c = node.shape[1];
                    let gv = before[gamma.0].value.clone();
                    acc(before, gamma, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                    acc(before, beta, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j];
                            }
                        }
                    });
                    acc(before, x, &mut |g| {
                        for j in 0..c {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for i in 0..r {
                                let dxh = gout[i * c + j] * gv[j];
                                mean_d += dxh;
                                mean_dx += dxh * xhat[i * c + j];
                            }
                            mean_d /= r as f64;
                            mean_dx /= r as f64;
                            for i in 0..r {
                                let dxh = gout[i * c + j] * gv[j];
                                g[i * c + j] +=
                                    inv_std[j] * (dxh - mean_d - xhat[i * c + j] * mean_dx);
                            }
                        }
                    });
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let r = node.shape[0];
                    let c = node.shape[1];
                    let gv = before[gamma.0].value.clone();
                    acc(before, gamma, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                    acc(before, beta, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += gout[i * c + j];
                            }
                        }
                    });
                    acc(before, x, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += gout[i * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Parameter handles for one GRU cell (update/reset/candidate gates).
#[derive(Clone, Copy)]
pub struct GruParams {
    pub w_update: TensorId,
    pub u_update: TensorId,
    pub b_update: TensorId,
    pub w_reset: TensorId,
    pub u_reset: TensorId,
    pub b_reset: TensorId,
    pub w_cand: TensorId,
    pub u_cand: TensorId,
    pub b_cand: TensorId,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_points() {
        let mut t = Tape::new();
        let x = t.leaf(&[3], vec![-1.0, 0.0, 1.0], false).unwrap();
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 1.0]);
        let z = t.leaf(&[1], vec![0.0], false).unwrap();
        let s = t.sigmoid(z);
        assert!((t.value(s)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 4], vec![2.5; 4], false).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for v in t.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![3.0], true).unwrap();
        let y = t.square(x);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert!((t.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![-1.0, 2.0], true).unwrap();
        let y = t.relu(x);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn matmul_shape_mismatch_reports_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        let b = t.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        match t.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn linearity_of_gradients() {
        // grad of sum(a + b) equals grad of sum(a) plus grad of sum(b)
        let mut t = Tape::new();
        let x = t.leaf(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let y = t.scale(x, 2.0);
        let z = t.add(x, y).unwrap();
        let s = t.sum_all(z);
        t.backward(s).unwrap();
        for g in t.grad(x).unwrap() {
            assert!((g - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_deterministic_for_fixed_tape() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(&[2, 2], vec![0.3, -0.4, 0.9, 0.1], true).unwrap();
            let w = t.leaf(&[2, 2], vec![0.5, 0.2, -0.7, 1.1], true).unwrap();
            let y = t.matmul(x, w).unwrap();
            let sq = t.square(y);
            let s = t.sum_all(sq);
            t.backward(s).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        assert_eq!(build(), build());
    }
}
