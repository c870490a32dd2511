//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one step's computation as a flat list of nodes;
//! parents always precede children, so the reverse pass is a single
//! backward sweep. Graphs are built fresh every step and dropped after
//! the optimizer update — there is no graph reuse.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{debug_check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    Sum { x: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, r: usize, c: usize },
    Embedding { table: NodeId, ids: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<NodeId>, cols: usize },
    ConcatCols { parts: Vec<NodeId>, rows: usize },
    ConcatFlat { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize, cols: usize },
    SliceCols { x: NodeId, start: usize, len: usize, rows: usize, total: usize },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, rows: usize, cols: usize, eps: S },
    Softmax { x: NodeId, rows: usize, cols: usize },
    LogSoftmax { x: NodeId, rows: usize, cols: usize },
    CrossEntropySum { logits: NodeId, targets: Vec<usize>, rows: usize, cols: usize },
    MeanPoolRows { x: NodeId, start: usize, len: usize, cols: usize },
    L2NormalizeRows { x: NodeId, rows: usize, cols: usize },
    Diag { x: NodeId, n: usize },
    MaxLastDim { x: NodeId, rows: usize, cols: usize, arg: Vec<usize> },
    Conv2dValid { x: NodeId, filters: NodeId, w: usize, nf: usize, fh: usize, fw: usize },
    Dropout { x: NodeId, mask: Vec<bool>, keep: S },
    Reshape { x: NodeId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Graph<S> {
    pub fn new(seed: u64) -> Self {
        Self { nodes: Vec::new(), train: false, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Enable train-mode primitives (dropout). Off by default; gradient
    /// checks and evaluation run with this flag off.
    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, param });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn vals(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.values()
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, false, None)
    }

    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a registered parameter into the graph. The value is copied;
    /// gradients flow back into the store on `backward`. Binding the
    /// same parameter twice accumulates both paths, but callers should
    /// bind once and reuse the handle.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        let trainable = store.is_trainable(id);
        let value = store.value(id).clone();
        self.push(value, Op::Leaf, trainable, Some(id))
    }

    // ── Elementwise and reductions ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let values: Vec<S> =
            self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| x + y).collect();
        debug_check_finite("add", &values);
        let t = Tensor::new(self.shape(a).to_vec(), values).expect("add shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, ng, None))
    }

    /// `x` is `[r, c]`, `bias` is `[c]`; the bias row is added to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("add_bias", x)?;
        if self.shape(bias) != [c] {
            return Err(shape_err(
                "add_bias",
                format!("x {:?} vs bias {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let bv = self.vals(bias);
        let mut values = self.vals(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += bv[j];
            }
        }
        debug_check_finite("add_bias", &values);
        let t = Tensor::from_rows(r, c, values).expect("add_bias shape");
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, ng, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let values: Vec<S> =
            self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| x * y).collect();
        debug_check_finite("mul", &values);
        let t = Tensor::new(self.shape(a).to_vec(), values).expect("mul shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, ng, None))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let values: Vec<S> = self.vals(x).iter().map(|&v| v * c).collect();
        debug_check_finite("scale", &values);
        let t = Tensor::new(self.shape(x).to_vec(), values).expect("scale shape");
        let ng = self.needs(x);
        self.push(t, Op::Scale { x, c }, ng, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let nb = self.scale(b, S::of(-1.0));
        self.add(a, nb)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: S = self.vals(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, ng, None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.vals(x).len();
        let s = self.sum(x);
        self.scale(s, S::of(1.0 / n as f64))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let mut values = vec![S::zero(); m * n];
        matmul_acc(self.vals(a), self.vals(b), m, k, n, &mut values);
        debug_check_finite("matmul", &values);
        let t = Tensor::from_rows(m, n, values).expect("matmul shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, ng, None))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("transpose", x)?;
        let xv = self.vals(x);
        let mut values = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = xv[i * c + j];
            }
        }
        let t = Tensor::from_rows(c, r, values).expect("transpose shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::Transpose { x, r, c }, ng, None))
    }

    /// Row gather: `table` is `[v, d]`, output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, Error> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty index list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("index {bad} out of range for table [{v}, {d}]")));
        }
        let tv = self.vals(table);
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            values.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_rows(ids.len(), d, values).expect("embedding shape");
        let ng = self.needs(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec(), cols: d }, ng, None))
    }

    // ── Concatenation and slicing ───────────────────────────────────

    /// Stack 2-d parts along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, Error> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no parts".into()));
        }
        let (_, cols) = self.dims2("concat_rows", parts[0])?;
        let mut rows = 0usize;
        let mut values = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column mismatch: {c} vs {cols}")));
            }
            rows += r;
            values.extend_from_slice(self.vals(p));
        }
        let t = Tensor::from_rows(rows, cols, values).expect("concat_rows shape");
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec(), cols }, ng, None))
    }

    /// Stack 2-d parts along the column axis (all parts share the row count).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, Error> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts".into()));
        }
        let (rows, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row mismatch: {r} vs {rows}")));
            }
            widths.push(c);
            total += c;
        }
        let mut values = vec![S::zero(); rows * total];
        let mut off = 0usize;
        for (pi, &p) in parts.iter().enumerate() {
            let c = widths[pi];
            let pv = self.vals(p);
            for i in 0..rows {
                values[i * total + off..i * total + off + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::from_rows(rows, total, values).expect("concat_cols shape");
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec(), rows }, ng, None))
    }

    /// Concatenate raw buffers into a flat vector (any input shapes).
    pub fn concat_flat(&mut self, parts: &[NodeId]) -> Result<NodeId, Error> {
        if parts.is_empty() {
            return Err(shape_err("concat_flat", "no parts".into()));
        }
        let mut values = Vec::new();
        for &p in parts {
            values.extend_from_slice(self.vals(p));
        }
        let t = Tensor::new(vec![values.len()], values).expect("concat_flat shape");
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatFlat { parts: parts.to_vec() }, ng, None))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of [{r}, {c}]", start + len)));
        }
        let values = self.vals(x)[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_rows(len, c, values).expect("slice_rows shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start, len, cols: c }, ng, None))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of [{r}, {c}]", start + len)));
        }
        let xv = self.vals(x);
        let mut values = Vec::with_capacity(r * len);
        for i in 0..r {
            values.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = Tensor::from_rows(r, len, values).expect("slice_cols shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceCols { x, start, len, rows: r, total: c }, ng, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, Error> {
        let n: usize = shape.iter().product();
        if n != self.vals(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} values) into {shape:?} ({n})", self.shape(x), self.vals(x).len()),
            ));
        }
        let t = Tensor::new(shape, self.vals(x).to_vec()).expect("reshape shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, ng, None))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values: Vec<S> =
            self.vals(x).iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let t = Tensor::new(self.shape(x).to_vec(), values).expect("relu shape");
        let ng = self.needs(x);
        self.push(t, Op::Relu { x }, ng, None)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let values: Vec<S> = self.vals(x).iter().map(|&v| gelu_fwd(v)).collect();
        debug_check_finite("gelu", &values);
        let t = Tensor::new(self.shape(x).to_vec(), values).expect("gelu shape");
        let ng = self.needs(x);
        self.push(t, Op::Gelu { x }, ng, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = S::one();
        let values: Vec<S> = self.vals(x).iter().map(|&v| one / (one + (-v).exp())).collect();
        debug_check_finite("sigmoid", &values);
        let t = Tensor::new(self.shape(x).to_vec(), values).expect("sigmoid shape");
        let ng = self.needs(x);
        self.push(t, Op::Sigmoid { x }, ng, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let values: Vec<S> = self.vals(x).iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), values).expect("tanh shape");
        let ng = self.needs(x);
        self.push(t, Op::Tanh { x }, ng, None)
    }

    // ── Normalization and attention pieces ──────────────────────────

    /// Per-row layer normalization over the last axis with learned gain
    /// and bias (both `[c]`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("x [{r}, {c}] vs gain {:?} / bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = S::of(eps);
        let (xv, gv, bv) = (self.vals(x), self.vals(gain), self.vals(bias));
        let mut values = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, rstd) = row_moments(row, eps);
            for j in 0..c {
                values[i * c + j] = gv[j] * ((row[j] - mean) * rstd) + bv[j];
            }
        }
        debug_check_finite("layer_norm", &values);
        let t = Tensor::from_rows(r, c, values).expect("layer_norm shape");
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, rows: r, cols: c, eps }, ng, None))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("softmax", x)?;
        let xv = self.vals(x);
        let mut values = vec![S::zero(); r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut values[i * c..(i + 1) * c]);
        }
        debug_check_finite("softmax", &values);
        let t = Tensor::from_rows(r, c, values).expect("softmax shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, rows: r, cols: c }, ng, None))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("log_softmax", x)?;
        let xv = self.vals(x);
        let mut values = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                values[i * c + j] = row[j] - lse;
            }
        }
        debug_check_finite("log_softmax", &values);
        let t = Tensor::from_rows(r, c, values).expect("log_softmax shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax { x, rows: r, cols: c }, ng, None))
    }

    /// Sum over rows of the negative log-likelihood of the target index
    /// per row. Returns a scalar.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(shape_err(
                "cross_entropy",
                format!("logits [{r}, {c}] vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let xv = self.vals(logits);
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &xv[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        debug_check_finite("cross_entropy", std::slice::from_ref(&total));
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum { logits, targets: targets.to_vec(), rows: r, cols: c },
            ng,
            None,
        ))
    }

    /// Mean over the row span `[start, start+len)`; output is `[1, c]`.
    pub fn mean_pool_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("mean_pool", x)?;
        if len == 0 {
            return Err(shape_err("mean_pool", "empty span".into()));
        }
        if start + len > r {
            return Err(shape_err("mean_pool", format!("span {start}..{} of [{r}, {c}]", start + len)));
        }
        let xv = self.vals(x);
        let inv = S::of(1.0 / len as f64);
        let mut values = vec![S::zero(); c];
        for i in start..start + len {
            for j in 0..c {
                values[j] += xv[i * c + j];
            }
        }
        for v in values.iter_mut() {
            *v *= inv;
        }
        let t = Tensor::from_rows(1, c, values).expect("mean_pool shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::MeanPoolRows { x, start, len, cols: c }, ng, None))
    }

    /// Normalize each row to unit L2 norm. A zero row is an error
    /// because downstream cosines would be undefined.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("l2_normalize", x)?;
        let xv = self.vals(x);
        let mut values = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm == S::zero() {
                return Err(Error::ZeroNormRow { op: "l2_normalize", row: i });
            }
            for j in 0..c {
                values[i * c + j] = row[j] / norm;
            }
        }
        debug_check_finite("l2_normalize", &values);
        let t = Tensor::from_rows(r, c, values).expect("l2_normalize shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::L2NormalizeRows { x, rows: r, cols: c }, ng, None))
    }

    /// Main diagonal of a square matrix as `[n]`.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("diag", x)?;
        if r != c {
            return Err(shape_err("diag", format!("[{r}, {c}] is not square")));
        }
        let xv = self.vals(x);
        let values: Vec<S> = (0..r).map(|i| xv[i * c + i]).collect();
        let t = Tensor::new(vec![r], values).expect("diag shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::Diag { x, n: r }, ng, None))
    }

    /// Per-row maximum over the last axis; output `[r]`. Ties keep the
    /// lowest column index.
    pub fn max_last_dim(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.dims2("max_last_dim", x)?;
        let xv = self.vals(x);
        let mut values = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mut best, mut bj) = (row[0], 0usize);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            values.push(best);
            arg.push(bj);
        }
        let t = Tensor::new(vec![r], values).expect("max shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::MaxLastDim { x, rows: r, cols: c, arg }, ng, None))
    }

    /// Valid 2-d convolution: input `[h, w]`, filters `[nf, fh, fw]`,
    /// output `[nf, h-fh+1, w-fw+1]`.
    pub fn conv2d_valid(&mut self, x: NodeId, filters: NodeId) -> Result<NodeId, Error> {
        let sx = self.shape(x).to_vec();
        let sf = self.shape(filters).to_vec();
        if sx.len() != 2 || sf.len() != 3 {
            return Err(shape_err("conv2d", format!("input {sx:?}, filters {sf:?}")));
        }
        let (h, w) = (sx[0], sx[1]);
        let (nf, fh, fw) = (sf[0], sf[1], sf[2]);
        if fh > h || fw > w {
            return Err(shape_err("conv2d", format!("filter [{fh}, {fw}] larger than input [{h}, {w}]")));
        }
        let (oh, ow) = (h - fh + 1, w - fw + 1);
        let (xv, fv) = (self.vals(x), self.vals(filters));
        let mut values = vec![S::zero(); nf * oh * ow];
        for f in 0..nf {
            let ker = &fv[f * fh * fw..(f + 1) * fh * fw];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = S::zero();
                    for u in 0..fh {
                        for v in 0..fw {
                            acc += xv[(oi + u) * w + (oj + v)] * ker[u * fw + v];
                        }
                    }
                    values[f * oh * ow + oi * ow + oj] = acc;
                }
            }
        }
        debug_check_finite("conv2d", &values);
        let t = Tensor::new(vec![nf, oh, ow], values).expect("conv2d shape");
        let ng = self.needs(x) || self.needs(filters);
        Ok(self.push(t, Op::Conv2dValid { x, filters, w, nf, fh, fw }, ng, None))
    }

    /// Inverted dropout. Active only when the graph is in train mode;
    /// otherwise the input passes through untouched.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, Error> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 - rate);
        let mask: Vec<bool> = (0..self.vals(x).len()).map(|_| self.rng.gen::<f64>() >= rate).collect();
        let values: Vec<S> = self
            .vals(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v / keep } else { S::zero() })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), values).expect("dropout shape");
        let ng = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask, keep }, ng, None))
    }

    fn dims2(&self, op: &'static str, x: NodeId) -> Result<(usize, usize), Error> {
        let s = self.shape(x);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(op, format!("expected a 2-d tensor, got {s:?}"))),
        }
    }

    // ── Reverse pass ────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Accumulates `∂loss/∂p` into
    /// the store's gradient buffers for every trainable parameter;
    /// trainable parameters off the recorded path receive (exactly)
    /// zero gradients. Calling twice without a reset accumulates.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore<S>) -> Result<(), Error> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        // A loss that touches no recorded op is a degenerate graph.
        if matches!(self.nodes[loss.0].op, Op::Leaf) && self.nodes.len() == 1 {
            return Err(Error::EmptyGraph);
        }

        store.ensure_grads();

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.dispatch_backward(i, &g, &mut grads);
            debug_check_finite("backward", &g);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads[i].as_ref()) {
                if store.is_trainable(pid) {
                    store.accumulate_grad(pid, g);
                }
            }
        }
        Ok(())
    }

    fn dispatch_backward(&self, i: usize, g: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let mut add_to = |id: NodeId, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(vec![S::zero(); self.nodes[id.0].value.len()]);
            }
            f(slot.as_mut().unwrap());
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                add_to(*a, &mut |ga| axpy(ga, g, S::one()));
                add_to(*b, &mut |gb| axpy(gb, g, S::one()));
            }
            Op::AddBias { x, bias } => {
                add_to(*x, &mut |gx| axpy(gx, g, S::one()));
                let c = self.nodes[bias.0].value.len();
                add_to(*bias, &mut |gb| {
                    for (pos, &gv) in g.iter().enumerate() {
                        gb[pos % c] += gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                add_to(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                add_to(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                add_to(*x, &mut |gx| axpy(gx, g, c));
            }
            Op::Sum { x } => {
                let gv = g[0];
                add_to(*x, &mut |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.vals(*a), self.vals(*b));
                add_to(*a, &mut |ga| matmul_nt_acc(g, bv, m, n, k, ga));
                add_to(*b, &mut |gb| matmul_tn_acc(av, g, m, k, n, gb));
            }
            Op::Transpose { x, r, c } => {
                let (r, c) = (*r, *c);
                add_to(*x, &mut |gx| {
                    for i2 in 0..r {
                        for j in 0..c {
                            gx[i2 * c + j] += g[j * r + i2];
                        }
                    }
                });
            }
            Op::Embedding { table, ids, cols } => {
                let cols = *cols;
                add_to(*table, &mut |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += g[row * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts, cols } => {
                let cols = *cols;
                let mut row_off = 0usize;
                for &p in parts {
                    let rows = self.nodes[p.0].value.len() / cols;
                    let seg = &g[row_off * cols..(row_off + rows) * cols];
                    add_to(p, &mut |gp| axpy(gp, seg, S::one()));
                    row_off += rows;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let rows = *rows;
                let total: usize = g.len() / rows;
                let mut off = 0usize;
                for &p in parts {
                    let c = self.nodes[p.0].value.len() / rows;
                    add_to(p, &mut |gp| {
                        for r2 in 0..rows {
                            for j in 0..c {
                                gp[r2 * c + j] += g[r2 * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatFlat { parts } => {
                let mut off = 0usize;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let seg = &g[off..off + n];
                    add_to(p, &mut |gp| axpy(gp, seg, S::one()));
                    off += n;
                }
            }
            Op::SliceRows { x, start, len, cols } => {
                let (start, len, cols) = (*start, *len, *cols);
                add_to(*x, &mut |gx| {
                    axpy(&mut gx[start * cols..(start + len) * cols], g, S::one());
                });
            }
            Op::SliceCols { x, start, len, rows, total } => {
                let (start, len, rows, total) = (*start, *len, *rows, *total);
                add_to(*x, &mut |gx| {
                    for r2 in 0..rows {
                        for j in 0..len {
                            gx[r2 * total + start + j] += g[r2 * len + j];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.vals(*x);
                add_to(*x, &mut |gx| {
                    for j in 0..g.len() {
                        if xv[j] > S::zero() {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.vals(*x);
                add_to(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv = self.vals(NodeId(i));
                add_to(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * yv[j] * (S::one() - yv[j]);
                    }
                });
            }
            Op::Tanh { x } => {
                let yv = self.vals(NodeId(i));
                add_to(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (S::one() - yv[j] * yv[j]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rows, cols, eps } => {
                let (rows, cols, eps) = (*rows, *cols, *eps);
                let xv = self.vals(*x);
                let gv = self.vals(*gain);
                add_to(*bias, &mut |gb| {
                    for r2 in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[r2 * cols + j];
                        }
                    }
                });
                add_to(*gain, &mut |gg| {
                    for r2 in 0..rows {
                        let row = &xv[r2 * cols..(r2 + 1) * cols];
                        let (mean, rstd) = row_moments(row, eps);
                        for j in 0..cols {
                            gg[j] += g[r2 * cols + j] * (row[j] - mean) * rstd;
                        }
                    }
                });
                add_to(*x, &mut |gx| {
                    let inv_n = S::of(1.0 / cols as f64);
                    for r2 in 0..rows {
                        let row = &xv[r2 * cols..(r2 + 1) * cols];
                        let (mean, rstd) = row_moments(row, eps);
                        let gr = &g[r2 * cols..(r2 + 1) * cols];
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            gx[r2 * cols + j] +=
                                rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Softmax { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let yv = self.vals(NodeId(i));
                add_to(*x, &mut |gx| {
                    for r2 in 0..rows {
                        let y = &yv[r2 * cols..(r2 + 1) * cols];
                        let gr = &g[r2 * cols..(r2 + 1) * cols];
                        let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[r2 * cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let yv = self.vals(NodeId(i));
                add_to(*x, &mut |gx| {
                    for r2 in 0..rows {
                        let y = &yv[r2 * cols..(r2 + 1) * cols];
                        let gr = &g[r2 * cols..(r2 + 1) * cols];
                        let gsum: S = gr.iter().copied().sum();
                        for j in 0..cols {
                            gx[r2 * cols + j] += gr[j] - y[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::CrossEntropySum { logits, targets, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = self.vals(*logits);
                let gv = g[0];
                add_to(*logits, &mut |gx| {
                    let mut probs = vec![S::zero(); cols];
                    for r2 in 0..rows {
                        let row = &xv[r2 * cols..(r2 + 1) * cols];
                        softmax_row(row, &mut probs);
                        for j in 0..cols {
                            gx[r2 * cols + j] += gv * probs[j];
                        }
                        gx[r2 * cols + targets[r2]] -= gv;
                    }
                });
            }
            Op::MeanPoolRows { x, start, len, cols } => {
                let (start, len, cols) = (*start, *len, *cols);
                let inv = S::of(1.0 / len as f64);
                add_to(*x, &mut |gx| {
                    for r2 in start..start + len {
                        for j in 0..cols {
                            gx[r2 * cols + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = self.vals(*x);
                let yv = self.vals(NodeId(i));
                add_to(*x, &mut |gx| {
                    for r2 in 0..rows {
                        let row = &xv[r2 * cols..(r2 + 1) * cols];
                        let y = &yv[r2 * cols..(r2 + 1) * cols];
                        let gr = &g[r2 * cols..(r2 + 1) * cols];
                        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                        let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[r2 * cols + j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Diag { x, n } => {
                let n = *n;
                add_to(*x, &mut |gx| {
                    for j in 0..n {
                        gx[j * n + j] += g[j];
                    }
                });
            }
            Op::MaxLastDim { x, rows, cols, arg } => {
                let (rows, cols) = (*rows, *cols);
                add_to(*x, &mut |gx| {
                    for r2 in 0..rows {
                        gx[r2 * cols + arg[r2]] += g[r2];
                    }
                });
            }
            Op::Conv2dValid { x, filters, w, nf, fh, fw } => {
                let (w, nf, fh, fw) = (*w, *nf, *fh, *fw);
                let oh = self.nodes[i].value.shape()[1];
                let ow = self.nodes[i].value.shape()[2];
                let (xv, fv) = (self.vals(*x), self.vals(*filters));
                add_to(*x, &mut |gx| {
                    for f in 0..nf {
                        let ker = &fv[f * fh * fw..(f + 1) * fh * fw];
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let gv = g[f * oh * ow + oi * ow + oj];
                                for u in 0..fh {
                                    for v in 0..fw {
                                        gx[(oi + u) * w + (oj + v)] += gv * ker[u * fw + v];
                                    }
                                }
                            }
                        }
                    }
                });
                add_to(*filters, &mut |gf| {
                    for f in 0..nf {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let gv = g[f * oh * ow + oi * ow + oj];
                                for u in 0..fh {
                                    for v in 0..fw {
                                        gf[f * fh * fw + u * fw + v] += gv * xv[(oi + u) * w + (oj + v)];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask, keep } => {
                let keep = *keep;
                add_to(*x, &mut |gx| {
                    for j in 0..g.len() {
                        if mask[j] {
                            gx[j] += g[j] / keep;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                add_to(*x, &mut |gx| axpy(gx, g, S::one()));
            }
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

/// out += a[m,k] · b[k,n]
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a[m,n] · b[k,n]ᵀ  (i.e. out[i,j] = Σ_p a[i,p]·b[j,p]), out is [m,k]
fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = S::zero();
            for p in 0..n {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

/// out += a[m,k]ᵀ · b[m,n]  (out is [k,n])
fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::of(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, (var + eps).sqrt().recip())
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut denom = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation of x·Φ(x)
    let a = S::of(0.7978845608028654); // sqrt(2/π)
    let b = S::of(0.044715);
    let half = S::of(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let a = S::of(0.7978845608028654);
    let b = S::of(0.044715);
    let half = S::of(0.5);
    let three = S::of(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * a * (S::one() + three * b * x * x)
}
