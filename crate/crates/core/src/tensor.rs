//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! Gradients are computed on a dynamic tape ([`GradGraph`]): every operation
//! appends a node recording its inputs, and [`GradGraph::backward`] replays
//! the tape in reverse, accumulating gradients into every node that
//! (transitively) depends on a leaf with `requires_grad`.
//!
//! Two numerical rules hold throughout:
//!
//! - values are stored as f32, but every operation computes in f64 over its
//!   (widened) f32 inputs with a fixed left-to-right order and rounds once on
//!   output, so results are deterministic across runs and across graph
//!   layouts;
//! - every operation checks its output for non-finite values and fails with
//!   [`TensorError::NonFinite`] instead of letting NaNs propagate silently.
//!   The causal mask therefore uses a large finite constant (`-1e9`) rather
//!   than `-inf`; after max-subtraction the masked entries underflow to an
//!   exact softmax weight of zero.
//!
//! Alongside the canonical f32 value, every node carries an f64 *shadow*
//! computed by the same kernel over the inputs' shadows (i.e. the whole chain
//! evaluated in f64). The shadow never feeds back into f32 results; it exists
//! so [`grad_check`] can form finite-difference quotients that are not
//! drowned by f32 storage rounding.

use thiserror::Error;

/// Epsilon used by layer normalisation throughout the crate.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Additive constant for masked attention scores. Large enough that masked
/// entries get an exact zero softmax weight, small enough to stay finite.
pub const MASK_VALUE: f32 = -1e9;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for dimension of size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("backward has already run on this graph")]
    BackwardAlreadyRan,
    #[error("no gradient recorded for the probed leaf (is requires_grad set?)")]
    MissingGrad,
}

/// A dense row-major tensor of f32 values.
///
/// `grad` is populated on graph nodes by [`GradGraph::backward`]; on
/// free-standing tensors it is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor, validating that `data` matches `shape` and that all
    /// values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Result<Self, TensorError> {
        Tensor::new(vec![1], vec![v])
    }

    /// Builder-style toggle for gradient tracking.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                expected: "2-D tensor".into(),
                got: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node in a [`GradGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Operation record for the tape. Each variant stores the input ids (and any
/// non-differentiable attributes) needed to replay the backward rule.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulScalar(TensorId, f32),
    AddBias(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    SoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    },
    Gelu(TensorId),
    Gather {
        table: TensorId,
        ids: Vec<usize>,
    },
    Reshape(TensorId),
    Transpose(TensorId),
    SliceCols {
        x: TensorId,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<TensorId>),
    CausalMask(TensorId),
    SquaredL2(TensorId),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
    },
    CosineRows(TensorId, TensorId),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    /// f64 evaluation of the same op chain (metrology only, see module doc).
    shadow: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Dynamic tape: forward operations append nodes, `backward` replays them in
/// reverse. Node ids are indices, so inputs always precede outputs and a
/// single reverse sweep visits nodes in valid topological order.
#[derive(Debug, Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph::default()
    }

    /// Inserts a tensor as a leaf. Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        let shadow = widen(&t.data);
        self.push(t, shadow, Op::Leaf, needs)
    }

    /// Inserts a tensor as a constant leaf (no gradient), regardless of its
    /// `requires_grad` flag.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let t = t.requires_grad(false);
        let shadow = widen(&t.data);
        self.push(t, shadow, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`, if the node
    /// participates in the differentiated subgraph.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn shadow(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].shadow
    }

    fn push(&mut self, tensor: Tensor, shadow: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            shadow,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Shared tail of every op: narrow the canonical f64 result to f32,
    /// validate finiteness, record the node with its shadow.
    fn push_op(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        canon: Vec<f64>,
        shadow: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let data: Vec<f32> = canon.iter().map(|&v| v as f32).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert_eq!(data.len(), shadow.len());
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(t, shadow, op, needs_grad))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Widened f32 data of `id`, the canonical input representation for the
    /// f64 kernels.
    fn widened(&self, id: TensorId) -> Vec<f64> {
        widen(&self.nodes[id.0].tensor.data)
    }

    // ----- elementwise ------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let shape = ta.shape.clone();
        let canon = k_zip(&self.widened(a), &self.widened(b), &f);
        let shadow = k_zip(self.shadow(a), self.shadow(b), &f);
        let needs = self.needs(a) || self.needs(b);
        self.push_op(name, shape, canon, shadow, op, needs)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f32) -> Result<TensorId, TensorError> {
        let shape = self.value(a).shape.clone();
        let f = |x: f64| x * c as f64;
        let canon = k_map(&self.widened(a), f);
        let shadow = k_map(self.shadow(a), f);
        let needs = self.needs(a);
        self.push_op("mul_scalar", shape, canon, shadow, Op::MulScalar(a, c), needs)
    }

    /// Adds a bias row `b` (shape `[d]`) to every row of `a` (shape `[n, d]`).
    pub fn add_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (n, d) = self.value(a).expect_2d("add_bias")?;
        let tb = self.value(b);
        if tb.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let canon = k_add_bias(&self.widened(a), &self.widened(b), n, d);
        let shadow = k_add_bias(self.shadow(a), self.shadow(b), n, d);
        let needs = self.needs(a) || self.needs(b);
        self.push_op("add_bias", vec![n, d], canon, shadow, Op::AddBias(a, b), needs)
    }

    // ----- linear algebra ---------------------------------------------

    /// Matrix product of `a` (`[m, k]`) and `b` (`[k, n]`).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.value(a).expect_2d("matmul")?;
        let (kb, n) = self.value(b).expect_2d("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let canon = k_matmul(&self.widened(a), &self.widened(b), m, ka, n);
        let shadow = k_matmul(self.shadow(a), self.shadow(b), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push_op("matmul", vec![m, n], canon, shadow, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(a).expect_2d("transpose")?;
        let canon = k_transpose(&self.widened(a), m, n);
        let shadow = k_transpose(self.shadow(a), m, n);
        let needs = self.needs(a);
        self.push_op("transpose", vec![n, m], canon, shadow, Op::Transpose(a), needs)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("shape with {} elements", ta.numel()),
                got: shape,
            });
        }
        let canon = self.widened(a);
        let shadow = self.shadow(a).to_vec();
        let needs = self.needs(a);
        self.push_op("reshape", shape, canon, shadow, Op::Reshape(a), needs)
    }

    /// Columns `[start, start+width)` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        width: usize,
    ) -> Result<TensorId, TensorError> {
        let (n, d) = self.value(a).expect_2d("slice_cols")?;
        if start + width > d {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                size: d,
            });
        }
        let canon = k_slice_cols(&self.widened(a), n, d, start, width);
        let shadow = k_slice_cols(self.shadow(a), n, d, start, width);
        let needs = self.needs(a);
        self.push_op(
            "slice_cols",
            vec![n, width],
            canon,
            shadow,
            Op::SliceCols { x: a, start, width },
            needs,
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                expected: "at least one input".into(),
                got: vec![],
            });
        }
        let (n, _) = self.value(parts[0]).expect_2d("concat_cols")?;
        let mut total = 0usize;
        for &p in parts {
            let (np, dp) = self.value(p).expect_2d("concat_cols")?;
            if np != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            total += dp;
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape[1]).collect();
        let widened: Vec<Vec<f64>> = parts.iter().map(|&p| self.widened(p)).collect();
        let canon = k_concat_cols(&widened, &widths, n, total);
        let shadows: Vec<Vec<f64>> = parts.iter().map(|&p| self.shadow(p).to_vec()).collect();
        let shadow = k_concat_cols(&shadows, &widths, n, total);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push_op(
            "concat_cols",
            vec![n, total],
            canon,
            shadow,
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    // ----- nonlinear --------------------------------------------------

    /// Row-wise softmax with max subtraction. Output rows are non-negative
    /// and sum to 1 up to rounding.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (n, d) = self.value(a).expect_2d("softmax_rows")?;
        let canon = k_softmax_rows(&self.widened(a), n, d);
        let shadow = k_softmax_rows(self.shadow(a), n, d);
        let needs = self.needs(a);
        self.push_op("softmax_rows", vec![n, d], canon, shadow, Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer normalisation with learned scale and shift:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, statistics taken
    /// over each row.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId, TensorError> {
        let (n, d) = self.value(x).expect_2d("layer_norm")?;
        for &p in &[gamma, beta] {
            if self.value(p).shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![n, d],
                    rhs: self.value(p).shape.clone(),
                });
            }
        }
        let canon = k_layer_norm(
            &self.widened(x),
            &self.widened(gamma),
            &self.widened(beta),
            n,
            d,
            eps as f64,
        );
        let shadow = k_layer_norm(
            self.shadow(x),
            self.shadow(gamma),
            self.shadow(beta),
            n,
            d,
            eps as f64,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_op(
            "layer_norm",
            vec![n, d],
            canon,
            shadow,
            Op::LayerNorm { x, gamma, beta, eps },
            needs,
        )
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.value(a).shape.clone();
        let canon = k_map(&self.widened(a), gelu_f64);
        let shadow = k_map(self.shadow(a), gelu_f64);
        let needs = self.needs(a);
        self.push_op("gelu", shape, canon, shadow, Op::Gelu(a), needs)
    }

    /// Gathers rows of `table` (`[rows, d]`) by index: output row `i` is
    /// `table[ids[i]]`. The backward rule scatter-adds into the table.
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let (rows, d) = self.value(table).expect_2d("gather")?;
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    size: rows,
                });
            }
        }
        let canon = k_gather(&self.widened(table), ids, d);
        let shadow = k_gather(self.shadow(table), ids, d);
        let needs = self.needs(table);
        self.push_op(
            "gather",
            vec![ids.len(), d],
            canon,
            shadow,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Adds [`MASK_VALUE`] to every strictly upper-triangular entry of a
    /// square score matrix, so position `i` attends only to `j <= i`.
    pub fn causal_mask(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (n, m) = self.value(a).expect_2d("causal_mask")?;
        if n != m {
            return Err(TensorError::BadShape {
                op: "causal_mask",
                expected: "square matrix".into(),
                got: vec![n, m],
            });
        }
        let canon = k_causal_mask(&self.widened(a), n);
        let shadow = k_causal_mask(self.shadow(a), n);
        let needs = self.needs(a);
        self.push_op("causal_mask", vec![n, n], canon, shadow, Op::CausalMask(a), needs)
    }

    // ----- reductions --------------------------------------------------

    /// Scalar `sum(x^2)` over all elements.
    pub fn squared_l2(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let canon = k_squared_l2(&self.widened(a));
        let shadow = k_squared_l2(self.shadow(a));
        let needs = self.needs(a);
        self.push_op("squared_l2", vec![1], canon, shadow, Op::SquaredL2(a), needs)
    }

    /// Mean cross-entropy between `logits` rows (`[n, d]`) and integer
    /// targets, computed with a log-sum-exp that subtracts the row max.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (n, d) = self.value(logits).expect_2d("cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: format!("{n} targets"),
                got: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= d {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: d,
                });
            }
        }
        let canon = k_cross_entropy(&self.widened(logits), targets, n, d);
        let shadow = k_cross_entropy(self.shadow(logits), targets, n, d);
        let needs = self.needs(logits);
        self.push_op(
            "cross_entropy",
            vec![1],
            canon,
            shadow,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Row-wise cosine similarity between two `[n, d]` tensors, output
    /// `[n, 1]`. A row pair where either side has zero norm yields 0.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (n, d) = self.value(a).expect_2d("cosine_rows")?;
        if self.value(b).shape != [n, d] {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_rows",
                lhs: vec![n, d],
                rhs: self.value(b).shape.clone(),
            });
        }
        let canon = k_cosine_rows(&self.widened(a), &self.widened(b), n, d);
        let shadow = k_cosine_rows(self.shadow(a), self.shadow(b), n, d);
        let needs = self.needs(a) || self.needs(b);
        self.push_op(
            "cosine_rows",
            vec![n, 1],
            canon,
            shadow,
            Op::CosineRows(a, b),
            needs,
        )
    }

    // ----- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss` node. Populates `grad` on
    /// every node that needs one; gradients from multiple uses of the same
    /// node accumulate additively in tape order.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_ran {
            return Err(TensorError::BackwardAlreadyRan);
        }
        let lt = &self.nodes[loss.0].tensor;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: lt.shape.clone(),
            });
        }
        self.backward_ran = true;
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any tracked leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = node.tensor.grad.take() else {
                continue; // not reachable from the loss
            };
            let op = node.op.clone();
            let out = &node.tensor;
            backprop(before, out, &op, &gout);
            node.tensor.grad = Some(gout);
        }
        Ok(())
    }
}

/// Adds `contrib[i] * scale` into the grad buffer of `node`, allocating it on
/// first touch.
fn accum(node: &mut Node, contrib: impl Iterator<Item = f32>) {
    let numel = node.tensor.numel();
    let g = node
        .tensor
        .grad
        .get_or_insert_with(|| vec![0.0f32; numel]);
    for (gi, c) in g.iter_mut().zip(contrib) {
        *gi += c;
    }
}

fn wants(before: &[Node], id: TensorId) -> bool {
    before[id.0].needs_grad
}

/// Applies the backward rule of one op, reading the output tensor and its
/// incoming gradient, and accumulating into input nodes (which always sit
/// earlier on the tape).
fn backprop(before: &mut [Node], out: &Tensor, op: &Op, gout: &[f32]) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(before, a) {
                accum(&mut before[a.0], gout.iter().copied());
            }
            if wants(before, b) {
                accum(&mut before[b.0], gout.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if wants(before, a) {
                accum(&mut before[a.0], gout.iter().copied());
            }
            if wants(before, b) {
                accum(&mut before[b.0], gout.iter().map(|&g| -g));
            }
        }
        Op::Mul(a, b) => {
            if wants(before, a) {
                let bd = before[b.0].tensor.data.clone();
                accum(
                    &mut before[a.0],
                    gout.iter().zip(&bd).map(|(&g, &y)| g * y),
                );
            }
            if wants(before, b) {
                let ad = before[a.0].tensor.data.clone();
                accum(
                    &mut before[b.0],
                    gout.iter().zip(&ad).map(|(&g, &x)| g * x),
                );
            }
        }
        Op::MulScalar(a, c) => {
            if wants(before, a) {
                accum(&mut before[a.0], gout.iter().map(|&g| g * c));
            }
        }
        Op::AddBias(a, b) => {
            let d = before[b.0].tensor.numel();
            if wants(before, a) {
                accum(&mut before[a.0], gout.iter().copied());
            }
            if wants(before, b) {
                let n = gout.len() / d;
                let mut db = vec![0.0f64; d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += gout[r * d + c] as f64;
                    }
                }
                accum(&mut before[b.0], db.iter().map(|&v| v as f32));
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (before[a.0].tensor.rows(), before[a.0].tensor.cols());
            let n = before[b.0].tensor.cols();
            if wants(before, a) {
                // dA = G . B^T
                let bd = before[b.0].tensor.data.clone();
                let da = matmul_nt(gout, &bd, m, n, k);
                accum(&mut before[a.0], da.into_iter());
            }
            if wants(before, b) {
                // dB = A^T . G
                let ad = before[a.0].tensor.data.clone();
                let db = matmul_tn(&ad, gout, m, k, n);
                accum(&mut before[b.0], db.into_iter());
            }
        }
        Op::SoftmaxRows(a) => {
            if wants(before, a) {
                let (n, d) = (out.rows(), out.cols());
                let mut da = vec![0.0f32; n * d];
                for r in 0..n {
                    let s = &out.data[r * d..(r + 1) * d];
                    let g = &gout[r * d..(r + 1) * d];
                    let mut dot = 0.0f64;
                    for c in 0..d {
                        dot += s[c] as f64 * g[c] as f64;
                    }
                    for c in 0..d {
                        da[r * d + c] = (s[c] as f64 * (g[c] as f64 - dot)) as f32;
                    }
                }
                accum(&mut before[a.0], da.into_iter());
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (n, d) = (before[x.0].tensor.rows(), before[x.0].tensor.cols());
            let xs = before[x.0].tensor.data.clone();
            let gs = before[gamma.0].tensor.data.clone();
            let mut dx = vec![0.0f32; n * d];
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            for r in 0..n {
                let row = &xs[r * d..(r + 1) * d];
                let g = &gout[r * d..(r + 1) * d];
                let (mean, var) = row_mean_var(row);
                let inv = 1.0 / (var + eps as f64).sqrt();
                // xhat and the two row-level contractions the backward rule needs
                let mut sum_gg = 0.0f64; // sum_c g_c * gamma_c
                let mut sum_ggx = 0.0f64; // sum_c g_c * gamma_c * xhat_c
                let mut xhat = vec![0.0f64; d];
                for c in 0..d {
                    xhat[c] = (row[c] as f64 - mean) * inv;
                    let gg = g[c] as f64 * gs[c] as f64;
                    sum_gg += gg;
                    sum_ggx += gg * xhat[c];
                }
                for c in 0..d {
                    dgamma[c] += g[c] as f64 * xhat[c];
                    dbeta[c] += g[c] as f64;
                    let gg = g[c] as f64 * gs[c] as f64;
                    dx[r * d + c] =
                        (inv * (gg - sum_gg / d as f64 - xhat[c] * sum_ggx / d as f64)) as f32;
                }
            }
            if wants(before, x) {
                accum(&mut before[x.0], dx.into_iter());
            }
            if wants(before, gamma) {
                accum(&mut before[gamma.0], dgamma.iter().map(|&v| v as f32));
            }
            if wants(before, beta) {
                accum(&mut before[beta.0], dbeta.iter().map(|&v| v as f32));
            }
        }
        Op::Gelu(a) => {
            if wants(before, a) {
                let xs = before[a.0].tensor.data.clone();
                accum(
                    &mut before[a.0],
                    gout.iter()
                        .zip(&xs)
                        .map(|(&g, &x)| (g as f64 * gelu_deriv_f64(x)) as f32),
                );
            }
        }
        Op::Gather { table, ref ids } => {
            if wants(before, table) {
                let d = before[table.0].tensor.cols();
                let rows = before[table.0].tensor.rows();
                let mut dt = vec![0.0f32; rows * d];
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += gout[i * d + c];
                    }
                }
                accum(&mut before[table.0], dt.into_iter());
            }
        }
        Op::Reshape(a) => {
            if wants(before, a) {
                accum(&mut before[a.0], gout.iter().copied());
            }
        }
        Op::Transpose(a) => {
            if wants(before, a) {
                let (m, n) = (before[a.0].tensor.rows(), before[a.0].tensor.cols());
                let mut da = vec![0.0f32; m * n];
                // out is [n, m]; gout follows out's layout
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = gout[j * m + i];
                    }
                }
                accum(&mut before[a.0], da.into_iter());
            }
        }
        Op::SliceCols { x, start, width } => {
            if wants(before, x) {
                let (n, d) = (before[x.0].tensor.rows(), before[x.0].tensor.cols());
                let mut dx = vec![0.0f32; n * d];
                for r in 0..n {
                    for c in 0..width {
                        dx[r * d + start + c] = gout[r * width + c];
                    }
                }
                accum(&mut before[x.0], dx.into_iter());
            }
        }
        Op::ConcatCols(ref parts) => {
            let n = out.rows();
            let total = out.cols();
            let mut offset = 0usize;
            for &p in parts {
                let d = before[p.0].tensor.cols();
                if wants(before, p) {
                    let mut dp = Vec::with_capacity(n * d);
                    for r in 0..n {
                        dp.extend_from_slice(&gout[r * total + offset..r * total + offset + d]);
                    }
                    accum(&mut before[p.0], dp.into_iter());
                }
                offset += d;
            }
        }
        Op::CausalMask(a) => {
            if wants(before, a) {
                // The mask is additive, so the gradient passes through
                // unchanged everywhere (masked entries included).
                accum(&mut before[a.0], gout.iter().copied());
            }
        }
        Op::SquaredL2(a) => {
            if wants(before, a) {
                let g = gout[0] as f64;
                let xs = before[a.0].tensor.data.clone();
                accum(
                    &mut before[a.0],
                    xs.iter().map(|&x| (2.0 * x as f64 * g) as f32),
                );
            }
        }
        Op::CrossEntropy { logits, ref targets } => {
            if wants(before, logits) {
                let (n, d) = (before[logits.0].tensor.rows(), before[logits.0].tensor.cols());
                let xs = before[logits.0].tensor.data.clone();
                let g = gout[0] as f64 / n as f64;
                let mut dl = vec![0.0f32; n * d];
                let mut probs = vec![0.0f32; d];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &xs[r * d..(r + 1) * d];
                    softmax_row_f64(row, &mut probs);
                    for c in 0..d {
                        let ind = if c == t { 1.0 } else { 0.0 };
                        dl[r * d + c] = ((probs[c] as f64 - ind) * g) as f32;
                    }
                }
                accum(&mut before[logits.0], dl.into_iter());
            }
        }
        Op::CosineRows(a, b) => {
            let (n, d) = (before[a.0].tensor.rows(), before[a.0].tensor.cols());
            let xa = before[a.0].tensor.data.clone();
            let xb = before[b.0].tensor.data.clone();
            let mut da = vec![0.0f32; n * d];
            let mut db = vec![0.0f32; n * d];
            for r in 0..n {
                let ra = &xa[r * d..(r + 1) * d];
                let rb = &xb[r * d..(r + 1) * d];
                let (dot, na2, nb2) = dot_norms_f64(ra, rb);
                if na2 == 0.0 || nb2 == 0.0 {
                    continue; // cosine defined as 0 there; keep zero gradient
                }
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let cosv = dot / (na * nb);
                let g = gout[r] as f64;
                for c in 0..d {
                    da[r * d + c] =
                        (g * (rb[c] as f64 / (na * nb) - cosv * ra[c] as f64 / na2)) as f32;
                    db[r * d + c] =
                        (g * (ra[c] as f64 / (na * nb) - cosv * rb[c] as f64 / nb2)) as f32;
                }
            }
            if wants(before, a) {
                accum(&mut before[a.0], da.into_iter());
            }
            if wants(before, b) {
                accum(&mut before[b.0], db.into_iter());
            }
        }
    }
}

// ----- f64 forward kernels --------------------------------------------------
//
// Each forward op calls its kernel twice: once over the widened f32 inputs
// (the canonical result, rounded to f32 on storage) and once over the f64
// shadows. A fixed left-to-right accumulation order keeps both deterministic.

fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

fn k_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn k_map(a: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.iter().map(|&x| f(x)).collect()
}

fn k_add_bias(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        for c in 0..d {
            out.push(a[r * d + c] + b[c]);
        }
    }
    out
}

/// `C = A . B` with A `[m, k]`, B `[k, n]`.
fn k_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn k_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn k_slice_cols(a: &[f64], n: usize, d: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        out.extend_from_slice(&a[r * d + start..r * d + start + width]);
    }
    out
}

fn k_concat_cols(parts: &[Vec<f64>], widths: &[usize], n: usize, total: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * total);
    for r in 0..n {
        for (part, &d) in parts.iter().zip(widths) {
            out.extend_from_slice(&part[r * d..(r + 1) * d]);
        }
    }
    out
}

fn k_softmax_rows(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * d];
    for r in 0..n {
        let row = &a[r * d..(r + 1) * d];
        let max = row.iter().copied().fold(row[0], f64::max);
        let mut sum = 0.0f64;
        let orow = &mut out[r * d..(r + 1) * d];
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

fn k_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mut sum = 0.0f64;
        for &v in row {
            sum += v;
        }
        let mean = sum / d as f64;
        let mut var = 0.0f64;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        let inv = 1.0 / (var / d as f64 + eps).sqrt();
        for c in 0..d {
            out[r * d + c] = gamma[c] * (row[c] - mean) * inv + beta[c];
        }
    }
    out
}

fn k_gather(table: &[f64], ids: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out.extend_from_slice(&table[id * d..(id + 1) * d]);
    }
    out
}

fn k_causal_mask(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = a.to_vec();
    for i in 0..n {
        for j in (i + 1)..n {
            out[i * n + j] = a[i * n + j] + MASK_VALUE as f64;
        }
    }
    out
}

fn k_squared_l2(a: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    for &x in a {
        acc += x * x;
    }
    vec![acc]
}

fn k_cross_entropy(logits: &[f64], targets: &[usize], n: usize, d: usize) -> Vec<f64> {
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * d..(r + 1) * d];
        let max = row.iter().copied().fold(row[0], f64::max);
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v - max).exp();
        }
        total += sum.ln() + max - row[t];
    }
    vec![total / n as f64]
}

fn k_cosine_rows(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n];
    for r in 0..n {
        let mut dot = 0.0f64;
        let mut na2 = 0.0f64;
        let mut nb2 = 0.0f64;
        for c in 0..d {
            let (x, y) = (a[r * d + c], b[r * d + c]);
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
        }
        out[r] = if na2 == 0.0 || nb2 == 0.0 {
            0.0
        } else {
            dot / (na2.sqrt() * nb2.sqrt())
        };
    }
    out
}

// ----- f32 backward helpers --------------------------------------------------

/// `C = A . B^T` with A `[m, n]`, B `[k, n]`, output `[m, k]`.
fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += arow[j] as f64 * brow[j] as f64;
            }
            out[i * k + p] = acc as f32;
        }
    }
    out
}

/// `C = A^T . B` with A `[m, k]`, B `[m, n]`, output `[k, n]`.
fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    let mut acc = vec![0.0f64; n];
    for p in 0..k {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let aip = a[i * k + p] as f64;
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                acc[j] += aip * brow[j] as f64;
            }
        }
        for j in 0..n {
            out[p * n + j] = acc[j] as f32;
        }
    }
    out
}

fn row_max(row: &[f32]) -> f32 {
    let mut m = row[0];
    for &v in &row[1..] {
        if v > m {
            m = v;
        }
    }
    m
}

fn softmax_row_f64(row: &[f32], out: &mut [f32]) {
    let max = row_max(row);
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (c, &v) in row.iter().enumerate() {
        let e = ((v - max) as f64).exp();
        exps[c] = e;
        sum += e;
    }
    for c in 0..row.len() {
        out[c] = (exps[c] / sum) as f32;
    }
}

fn row_mean_var(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mut sum = 0.0f64;
    for &v in row {
        sum += v as f64;
    }
    let mean = sum / d;
    let mut var = 0.0f64;
    for &v in row {
        let c = v as f64 - mean;
        var += c * c;
    }
    (mean, var / d)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_f64(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_deriv_f64(x: f32) -> f64 {
    let x = x as f64;
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn dot_norms_f64(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na2 = 0.0f64;
    let mut nb2 = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na2 += x as f64 * x as f64;
        nb2 += y as f64 * y as f64;
    }
    (dot, na2, nb2)
}

/// Cosine similarity of two equal-length slices in f64; 0 if either side has
/// zero norm.
pub fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let (dot, na2, nb2) = dot_norms_f64(a, b);
    if na2 == 0.0 || nb2 == 0.0 {
        return 0.0;
    }
    dot / (na2.sqrt() * nb2.sqrt())
}

/// Index of the largest value; ties resolve to the lowest index. The slice
/// must be non-empty.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    debug_assert!(!row.is_empty());
    best
}

// ----- finite-difference gradient checking ---------------------------------

/// Compares the analytic gradient of a scalar-valued graph function against
/// central finite differences at `point`, returning the maximum relative
/// error `|analytic - central| / max(|analytic|, |central|, 1e-8)` over all
/// coordinates.
///
/// `f` receives a fresh graph and the id of the probed leaf and must return
/// a scalar output node. The probed loss values are read from the graph's
/// f64 shadow, and the quotient divides by the exactly-representable step
/// actually taken, so the estimate is limited by truncation error rather
/// than by f32 storage rounding.
pub fn grad_check<F>(f: F, point: &Tensor, h: f32) -> Result<f64, TensorError>
where
    F: Fn(&mut GradGraph, TensorId) -> Result<TensorId, TensorError>,
{
    // Analytic gradient at the point.
    let mut g = GradGraph::new();
    let leaf = g.leaf(point.clone().requires_grad(true));
    let out = f(&mut g, leaf)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            got: g.value(out).shape.clone(),
        });
    }
    g.backward(out)?;
    let analytic: Vec<f32> = g.grad(leaf).ok_or(TensorError::MissingGrad)?.to_vec();

    let eval = |data: Vec<f32>| -> Result<f64, TensorError> {
        let mut g = GradGraph::new();
        let leaf = g.leaf(Tensor::new(point.shape.clone(), data)?);
        let out = f(&mut g, leaf)?;
        Ok(g.shadow(out)[0])
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.data.len() {
        let xp = point.data[i] + h;
        let xm = point.data[i] - h;
        let mut plus = point.data.clone();
        let mut minus = point.data.clone();
        plus[i] = xp;
        minus[i] = xm;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let central = (fp - fm) / (xp as f64 - xm as f64);
        let a = analytic[i] as f64;
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
