//! Linear Wengert tape: ops append in execution order (which is therefore
//! topological), backward replays the list once in reverse.
//!
//! Every op validates its output for NaN/Inf before it is admitted to the
//! tape; a non-finite intermediate is an error at the op that produced it,
//! not a mystery ten ops later.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops;
use super::{Result, Tensor, TensorError};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Identity of a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Source,
    Add(usize, usize),
    AddScalar(usize, usize),
    Sub(usize, usize),
    SubScalar(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Exp(usize),
    Ln(usize),
    Mean(usize),
    Sum(usize),
    Reshape(usize),
    Transpose(usize),
    Matmul(usize, usize),
    SoftmaxRows(usize),
    LayerNorm {
        input: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        inv_stds: Vec<f64>,
        normalized: Arc<Vec<f64>>,
    },
    L2Distance(usize, usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Split {
        input: usize,
        axis: usize,
        offset: usize,
    },
    EmbedRows {
        table: usize,
        indices: Vec<usize>,
    },
    BroadcastRows(usize),
    Patchify {
        input: usize,
        patch: usize,
    },
    Unpatchify {
        input: usize,
        patch: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    needs_grad: bool,
    param_name: Option<String>,
}

/// Gradients keyed by parameter name after a backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Recording tape for one forward/backward cycle.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    param_names: BTreeMap<String, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Sources ──────────────────────────────────────────────────────

    /// Track a value without gradient.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        if let Some(node) = t.node() {
            if node.tape == self.id {
                return t.clone();
            }
        }
        self.push_source(t, false, None)
    }

    /// Track a named trainable parameter. Names must be unique per tape.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Tensor> {
        if self.param_names.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let out = self.push_source(t, true, Some(name.to_string()));
        self.param_names.insert(name.to_string(), out.node().unwrap().idx);
        Ok(out)
    }

    fn push_source(&mut self, t: &Tensor, needs_grad: bool, name: Option<String>) -> Tensor {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Source,
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            needs_grad,
            param_name: name,
        });
        t.with_node(NodeRef { tape: self.id, idx })
    }

    /// Resolve a tensor to a node index, interning untracked values as
    /// constants. Tensors tracked on another tape are rejected.
    fn intern(&mut self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(node) if node.tape == self.id => Ok(node.idx),
            Some(node) => Err(TensorError::ForeignNode {
                expected: self.id,
                got: Some(node.tape),
            }),
            None => Ok(self.constant(t).node().unwrap().idx),
        }
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, name: &'static str) -> Result<Tensor> {
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name, index });
        }
        let needs_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        let idx = self.nodes.len();
        let value = Arc::new(value);
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
            needs_grad,
            param_name: None,
        });
        Ok(Tensor::from_arc(shape, value).with_node(NodeRef { tape: self.id, idx }))
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Source => vec![],
            Op::Add(a, b)
            | Op::AddScalar(a, b)
            | Op::Sub(a, b)
            | Op::SubScalar(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::Matmul(a, b)
            | Op::L2Distance(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::BroadcastRows(a)
            | Op::Split { input: a, .. }
            | Op::Patchify { input: a, .. }
            | Op::Unpatchify { input: a, .. }
            | Op::EmbedRows { table: a, .. } => vec![*a],
            Op::LayerNorm {
                input, gain, bias, ..
            } => {
                let mut v = vec![*input];
                if let Some(g) = gain {
                    v.push(*g);
                }
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    fn val(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].value
    }

    fn shape_of(&self, idx: usize) -> &[usize] {
        &self.nodes[idx].shape
    }

    // ── Elementwise suite ────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew("add", a, b, |x, y| x + y, Op::Add, Op::AddScalar)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew("sub", a, b, |x, y| x - y, Op::Sub, Op::SubScalar)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew("mul", a, b, |x, y| x * y, Op::Mul, Op::MulScalar)
    }

    /// Shared body for add/sub/mul. Broadcasting is limited to a 1-element
    /// tensor on the right-hand side; anything else must match shapes.
    fn binary_ew(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        full: impl Fn(usize, usize) -> Op,
        scalar: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let bi = self.intern(b)?;
        if a.shape() == b.shape() {
            let value: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            self.push_op(full(ai, bi), a.shape().to_vec(), value, name)
        } else if b.numel() == 1 {
            let s = b.data()[0];
            let value: Vec<f64> = a.data().iter().map(|&x| f(x, s)).collect();
            self.push_op(scalar(ai, bi), a.shape().to_vec(), value, name)
        } else {
            Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let value: Vec<f64> = a.data().iter().map(|&x| x * c).collect();
        self.push_op(Op::Scale(ai, c), a.shape().to_vec(), value, "scale")
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.scale(a, -1.0)
    }

    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let value: Vec<f64> = a.data().iter().map(|&x| x * ops::sigmoid(x)).collect();
        self.push_op(Op::Silu(ai), a.shape().to_vec(), value, "silu")
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let value: Vec<f64> = a.data().iter().map(|&x| x.exp()).collect();
        self.push_op(Op::Exp(ai), a.shape().to_vec(), value, "exp")
    }

    pub fn ln(&mut self, a: &Tensor) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let value: Vec<f64> = a.data().iter().map(|&x| x.ln()).collect();
        self.push_op(Op::Ln(ai), a.shape().to_vec(), value, "ln")
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let m = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.push_op(Op::Mean(ai), vec![1], vec![m], "mean")
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let ai = self.intern(a)?;
        let s = a.data().iter().sum::<f64>();
        self.push_op(Op::Sum(ai), vec![1], vec![s], "sum")
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} elements", a.numel()),
            });
        }
        let ai = self.intern(a)?;
        let value = a.data().to_vec();
        self.push_op(Op::Reshape(ai), shape.to_vec(), value, "reshape")
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: a.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ai = self.intern(a)?;
        let mut value = vec![0.0; r * c];
        ops::transpose(a.data(), r, c, &mut value);
        self.push_op(Op::Transpose(ai), vec![c, r], value, "transpose")
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let ai = self.intern(a)?;
        let bi = self.intern(b)?;
        let mut value = vec![0.0; m * n];
        ops::matmul_nn(a.data(), b.data(), m, k, n, &mut value);
        self.push_op(Op::Matmul(ai, bi), vec![m, n], value, "matmul")
    }

    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                shape: a.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ai = self.intern(a)?;
        let mut value = vec![0.0; r * c];
        ops::softmax_rows(a.data(), r, c, &mut value);
        self.push_op(Op::SoftmaxRows(ai), a.shape().to_vec(), value, "softmax_rows")
    }

    pub const LAYER_NORM_EPS: f64 = 1e-6;

    /// Standardize each row to zero mean and unit variance, then apply an
    /// optional affine (`gain`/`bias` of shape `[1, cols]`).
    pub fn layer_norm(
        &mut self,
        a: &Tensor,
        gain: Option<&Tensor>,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let cols = a.cols();
        let rows = a.numel() / cols;
        if cols < 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: a.shape().to_vec(),
                reason: "last axis must be >= 2".into(),
            });
        }
        for affine in [gain, bias].into_iter().flatten() {
            if affine.numel() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: a.shape().to_vec(),
                    rhs: affine.shape().to_vec(),
                });
            }
        }
        let ai = self.intern(a)?;
        let gi = gain.map(|g| self.intern(g)).transpose()?;
        let bi = bias.map(|b| self.intern(b)).transpose()?;

        let mut normalized = vec![0.0; a.numel()];
        let inv_stds = ops::layer_norm_rows(a.data(), rows, cols, Self::LAYER_NORM_EPS, &mut normalized);
        let normalized = Arc::new(normalized);
        let mut value = normalized.as_ref().clone();
        if let Some(g) = gain {
            for r in 0..rows {
                for c in 0..cols {
                    value[r * cols + c] *= g.data()[c];
                }
            }
        }
        if let Some(b) = bias {
            for r in 0..rows {
                for c in 0..cols {
                    value[r * cols + c] += b.data()[c];
                }
            }
        }
        self.push_op(
            Op::LayerNorm {
                input: ai,
                gain: gi,
                bias: bi,
                inv_stds,
                normalized,
            },
            a.shape().to_vec(),
            value,
            "layer_norm",
        )
    }

    /// Euclidean distance between two same-shape tensors, as a scalar.
    /// Subgradient 0 at coincident inputs.
    pub fn l2_distance(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "l2_distance",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let ai = self.intern(a)?;
        let bi = self.intern(b)?;
        let d = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        self.push_op(Op::L2Distance(ai, bi), vec![1], vec![d], "l2_distance")
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: parts[0].shape().to_vec(),
            });
        }
        for p in parts {
            if p.shape().len() != rank
                || (0..rank).any(|d| d != axis && p.shape()[d] != parts[0].shape()[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        let value = if axis == 0 {
            let mut v = Vec::with_capacity(shape.iter().product());
            for p in parts {
                v.extend_from_slice(p.data());
            }
            v
        } else {
            // axis 1 on rank-2 tensors
            let rows = shape[0];
            let total_cols = shape[1];
            let mut v = vec![0.0; rows * total_cols];
            let mut col_off = 0;
            for p in parts {
                let pc = p.shape()[1];
                for r in 0..rows {
                    v[r * total_cols + col_off..r * total_cols + col_off + pc]
                        .copy_from_slice(&p.data()[r * pc..(r + 1) * pc]);
                }
                col_off += pc;
            }
            v
        };
        if axis > 1 || (axis == 1 && rank != 2) {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: parts[0].shape().to_vec(),
            });
        }
        let mut input_ids = Vec::with_capacity(parts.len());
        for p in parts {
            input_ids.push(self.intern(p)?);
        }
        self.push_op(
            Op::Concat {
                inputs: input_ids,
                axis,
            },
            shape,
            value,
            "concat",
        )
    }

    /// Split along `axis` into pieces of the given sizes. Exact inverse of
    /// `concat` with the same axis.
    pub fn split(&mut self, a: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let rank = a.shape().len();
        if axis >= rank || axis > 1 || (axis == 1 && rank != 2) {
            return Err(TensorError::AxisOutOfRange {
                op: "split",
                axis,
                shape: a.shape().to_vec(),
            });
        }
        if sizes.iter().sum::<usize>() != a.shape()[axis] || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape: a.shape().to_vec(),
                reason: format!("sizes {sizes:?} do not partition axis {axis}"),
            });
        }
        let ai = self.intern(a)?;
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &size in sizes {
            let mut shape = a.shape().to_vec();
            shape[axis] = size;
            let value = if axis == 0 {
                let cols: usize = a.shape()[1..].iter().product::<usize>().max(1);
                a.data()[offset * cols..(offset + size) * cols].to_vec()
            } else {
                let rows = a.shape()[0];
                let total_cols = a.shape()[1];
                let mut v = vec![0.0; rows * size];
                for r in 0..rows {
                    v[r * size..(r + 1) * size].copy_from_slice(
                        &a.data()[r * total_cols + offset..r * total_cols + offset + size],
                    );
                }
                v
            };
            out.push(self.push_op(
                Op::Split {
                    input: ai,
                    axis,
                    offset,
                },
                shape,
                value,
                "split",
            )?);
            offset += size;
        }
        Ok(out)
    }

    /// Gather rows of an embedding table. Backward scatter-adds.
    pub fn embed_rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        if table.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embed_rows",
                shape: table.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (rows, cols) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "embed_rows",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let ti = self.intern(table)?;
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            value.extend_from_slice(&table.data()[i * cols..(i + 1) * cols]);
        }
        self.push_op(
            Op::EmbedRows {
                table: ti,
                indices: indices.to_vec(),
            },
            vec![indices.len(), cols],
            value,
            "embed_rows",
        )
    }

    /// Repeat a `[1, d]` row `n` times. Backward sums over rows.
    pub fn broadcast_rows(&mut self, a: &Tensor, n: usize) -> Result<Tensor> {
        if a.shape().len() != 2 || a.shape()[0] != 1 || n == 0 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_rows",
                shape: a.shape().to_vec(),
                reason: "expected [1, d] input and n >= 1".into(),
            });
        }
        let d = a.shape()[1];
        let ai = self.intern(a)?;
        let mut value = Vec::with_capacity(n * d);
        for _ in 0..n {
            value.extend_from_slice(a.data());
        }
        self.push_op(Op::BroadcastRows(ai), vec![n, d], value, "broadcast_rows")
    }

    /// `[C, H, W]` image to `[(H/P)(W/P), P*P*C]` patch tokens.
    pub fn patchify(&mut self, img: &Tensor, patch: usize) -> Result<Tensor> {
        let s = img.shape();
        if s.len() != 3 || s[1] % patch != 0 || s[2] % patch != 0 {
            return Err(TensorError::InvalidShape {
                op: "patchify",
                shape: s.to_vec(),
                reason: format!("expected [C, H, W] with H, W divisible by {patch}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ai = self.intern(img)?;
        let mut value = vec![0.0; img.numel()];
        ops::patchify(img.data(), c, h, w, patch, &mut value);
        let tokens = (h / patch) * (w / patch);
        self.push_op(
            Op::Patchify { input: ai, patch },
            vec![tokens, patch * patch * c],
            value,
            "patchify",
        )
    }

    /// Inverse of `patchify`.
    pub fn unpatchify(
        &mut self,
        tokens: &Tensor,
        patch: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Tensor> {
        let expected_tokens = (height / patch) * (width / patch);
        let expected_dim = patch * patch * channels;
        if tokens.shape() != [expected_tokens, expected_dim]
            || height % patch != 0
            || width % patch != 0
        {
            return Err(TensorError::InvalidShape {
                op: "unpatchify",
                shape: tokens.shape().to_vec(),
                reason: format!("expected [{expected_tokens}, {expected_dim}]"),
            });
        }
        let ai = self.intern(tokens)?;
        let mut value = vec![0.0; tokens.numel()];
        ops::unpatchify(tokens.data(), channels, height, width, patch, &mut value);
        self.push_op(
            Op::Unpatchify {
                input: ai,
                patch,
                channels,
                height,
                width,
            },
            vec![channels, height, width],
            value,
            "unpatchify",
        )
    }

    // ── Composite helpers ────────────────────────────────────────────

    /// `x @ w + b` with `b: [1, d_out]` broadcast over rows.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        let rows = y.shape()[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(&y, &bb)
    }

    /// Mean over rows of a `[n, d]` tensor, as `[1, d]`.
    pub fn mean_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let weights = Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?;
        self.matmul(&weights, x)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// parameter on the tape (zero where no path reaches the loss).
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradMap> {
        let loss_idx = match loss.node() {
            Some(node) if node.tape == self.id => node.idx,
            Some(_) | None => return Err(TensorError::LossNotOnTape),
        };
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].param_name.is_some() {
                grads[idx] = Some(g);
                continue;
            }
            self.apply_vjp(idx, &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (name, &idx) in &self.param_names {
            let shape = self.nodes[idx].shape.clone();
            let data = grads[idx]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[idx].value.len()]);
            map.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(GradMap { grads: map })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], idx: usize, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let slot = &mut grads[idx];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[idx].value.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn apply_vjp(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Source => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| axpy(1.0, g, d));
                self.accum(grads, *b, |d| axpy(1.0, g, d));
            }
            Op::AddScalar(a, b) => {
                self.accum(grads, *a, |d| axpy(1.0, g, d));
                self.accum(grads, *b, |d| d[0] += g.iter().sum::<f64>());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| axpy(1.0, g, d));
                self.accum(grads, *b, |d| axpy(-1.0, g, d));
            }
            Op::SubScalar(a, b) => {
                self.accum(grads, *a, |d| axpy(1.0, g, d));
                self.accum(grads, *b, |d| d[0] -= g.iter().sum::<f64>());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulScalar(a, b) => {
                let (av, s) = (self.val(*a), self.val(*b)[0]);
                self.accum(grads, *a, |d| axpy(s, g, d));
                self.accum(grads, *b, |d| {
                    d[0] += g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).sum::<f64>();
                });
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, |d| axpy(*c, g, d));
            }
            Op::Silu(a) => {
                let av = self.val(*a);
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        let s = ops::sigmoid(av[i]);
                        d[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.val(idx);
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i];
                    }
                });
            }
            Op::Ln(a) => {
                let av = self.val(*a);
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / av[i];
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                self.accum(grads, *a, |d| {
                    let gi = g[0] / n;
                    for v in d.iter_mut() {
                        *v += gi;
                    }
                });
            }
            Op::Sum(a) => {
                self.accum(grads, *a, |d| {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |d| axpy(1.0, g, d));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                self.accum(grads, *a, |d| {
                    // g has shape [c, r]; transpose back
                    for i in 0..c {
                        for j in 0..r {
                            d[j * c + i] += g[i * r + j];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                let n = self.shape_of(*b)[1];
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accum(grads, *a, |d| ops::matmul_nt(g, bv, m, n, k, d));
                self.accum(grads, *b, |d| ops::matmul_tn(av, g, m, k, n, d));
            }
            Op::SoftmaxRows(a) => {
                let out = self.val(idx);
                let cols = self.shape_of(idx)[1];
                let rows = self.shape_of(idx)[0];
                self.accum(grads, *a, |d| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gy.iter()).map(|(&yi, &gi)| yi * gi).sum();
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            dr[i] += y[i] * (gy[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                inv_stds,
                normalized,
            } => {
                let cols = self.shape_of(idx).last().copied().unwrap();
                let rows = self.nodes[idx].value.len() / cols;
                // d(pre-affine) = g * gain
                let mut gh: Vec<f64>;
                let g_pre: &[f64] = if let Some(gi) = gain {
                    let gv = self.val(*gi);
                    gh = g.to_vec();
                    for r in 0..rows {
                        for c in 0..cols {
                            gh[r * cols + c] *= gv[c];
                        }
                    }
                    &gh
                } else {
                    g
                };
                self.accum(grads, *input, |d| {
                    for r in 0..rows {
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        let gr = &g_pre[r * cols..(r + 1) * cols];
                        let mean_g: f64 = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gx: f64 =
                            gr.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dr[c] += inv_stds[r] * (gr[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                });
                if let Some(gi) = gain {
                    self.accum(grads, *gi, |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[c] += g[r * cols + c] * normalized[r * cols + c];
                            }
                        }
                    });
                }
                if let Some(bi) = bias {
                    self.accum(grads, *bi, |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[c] += g[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::L2Distance(a, b) => {
                let dist = self.val(idx)[0];
                if dist == 0.0 {
                    return; // subgradient 0 at coincident inputs
                }
                let (av, bv) = (self.val(*a), self.val(*b));
                let coef = g[0] / dist;
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += coef * (av[i] - bv[i]);
                    }
                });
                self.accum(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= coef * (av[i] - bv[i]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.nodes[inp].value.len();
                        self.accum(grads, inp, |d| axpy(1.0, &g[offset..offset + len], d));
                        offset += len;
                    }
                } else {
                    let total_cols = self.shape_of(idx)[1];
                    let rows = self.shape_of(idx)[0];
                    let mut col_off = 0;
                    for &inp in inputs {
                        let pc = self.shape_of(inp)[1];
                        self.accum(grads, inp, |d| {
                            for r in 0..rows {
                                for c in 0..pc {
                                    d[r * pc + c] += g[r * total_cols + col_off + c];
                                }
                            }
                        });
                        col_off += pc;
                    }
                }
            }
            Op::Split {
                input,
                axis,
                offset,
            } => {
                let piece_shape = self.shape_of(idx).to_vec();
                if *axis == 0 {
                    let cols: usize = piece_shape[1..].iter().product::<usize>().max(1);
                    let start = offset * cols;
                    self.accum(grads, *input, |d| axpy(1.0, g, &mut d[start..start + g.len()]));
                } else {
                    let rows = piece_shape[0];
                    let size = piece_shape[1];
                    let total_cols = self.shape_of(*input)[1];
                    self.accum(grads, *input, |d| {
                        for r in 0..rows {
                            for c in 0..size {
                                d[r * total_cols + offset + c] += g[r * size + c];
                            }
                        }
                    });
                }
            }
            Op::EmbedRows { table, indices } => {
                let cols = self.shape_of(*table)[1];
                self.accum(grads, *table, |d| {
                    for (row, &i) in indices.iter().enumerate() {
                        axpy(1.0, &g[row * cols..(row + 1) * cols], &mut d[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let d_cols = self.shape_of(*a)[1];
                let n = self.shape_of(idx)[0];
                self.accum(grads, *a, |d| {
                    for r in 0..n {
                        axpy(1.0, &g[r * d_cols..(r + 1) * d_cols], d);
                    }
                });
            }
            Op::Patchify { input, patch } => {
                let s = self.shape_of(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                self.accum(grads, *input, |d| {
                    let mut tmp = vec![0.0; d.len()];
                    ops::unpatchify(g, c, h, w, *patch, &mut tmp);
                    axpy(1.0, &tmp, d);
                });
            }
            Op::Unpatchify {
                input,
                patch,
                channels,
                height,
                width,
            } => {
                self.accum(grads, *input, |d| {
                    let mut tmp = vec![0.0; d.len()];
                    ops::patchify(g, *channels, *height, *width, *patch, &mut tmp);
                    axpy(1.0, &tmp, d);
                });
            }
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}
