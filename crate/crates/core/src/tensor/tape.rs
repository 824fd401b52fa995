//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every intermediate value lives in a flat node list; `backward` walks the
//! list in reverse and accumulates vector-Jacobian products. All tensors on
//! the tape are 2-D (rows x cols); batches of token blocks are packed as
//! `(batch * tokens) x features` so the block-aware ops can stay simple
//! strided loops over one contiguous buffer.
//!
//! Scalar reductions additionally track an f64 copy of their value, and the
//! usual scalar arithmetic propagates it, so composed losses are accurate
//! enough for central finite differences.

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    ElemMin(Var, Var),
    Clamp(Var, f32, f32),
    SoftmaxRows { x: Var, temp: f32 },
    LogSoftmaxRows { x: Var },
    LayerNormRows { x: Var, eps: f32 },
    NormalizeRows { x: Var, eps: f32 },
    AddRow(Var, Var),
    MulRow(Var, Var),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanDiag(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    TileRows { x: Var, times: usize },
    RepeatRowPerBlock { x: Var, block: usize },
    WeightedBlockSum { w: Var, x: Var, n: usize },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        nq: usize,
        nk: usize,
        heads: usize,
        // Softmax weights saved by the forward pass, blocks x heads x nq x nk.
        weights: Vec<f32>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    scalar_f64: Option<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients keyed by the [`Var`] they belong to, produced by `backward`.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Adds the gradient for `v` into `t.grad`, if one was computed.
    pub fn apply_to(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

/// Wengert tape holding the forward values of one computation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_mode: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that records backward context (training mode).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_mode: true,
        }
    }

    /// Tape that only computes values; `backward` is unavailable.
    pub fn new_inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_mode: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    /// Whether backward would reach this node, useful for freeze tests.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Extracts a 1x1 node as f64, in full precision when tracked.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "scalar() on a {}x{} node",
                node.rows, node.cols
            )));
        }
        let s = node.scalar_f64.unwrap_or(node.value[0] as f64);
        if !s.is_finite() {
            return Err(Error::NonFinite("scalar loss".into()));
        }
        Ok(s)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            scalar_f64: None,
            needs_grad: needs_grad && self.grad_mode,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with no gradient (frozen weights, inputs, targets).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "constant {}x{} from {} elements",
                rows,
                cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, false, Op::Leaf))
    }

    pub fn constant_from(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Trainable leaf; `backward` will produce a gradient for it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), true, Op::Leaf)
    }

    fn binary_shape_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                na.rows, na.cols, nb.rows, nb.cols
            )));
        }
        Ok(())
    }

    fn combine_scalars<F: Fn(f64, f64) -> f64>(&mut self, out: Var, a: Var, b: Var, f: F) {
        if self.nodes[out.0].value.len() == 1 {
            if let (Some(x), Some(y)) = (self.nodes[a.0].scalar_f64, self.nodes[b.0].scalar_f64) {
                let s = f(x, y);
                self.nodes[out.0].scalar_f64 = Some(s);
                self.nodes[out.0].value[0] = s as f32;
            }
        }
    }

    fn map_scalar<F: Fn(f64) -> f64>(&mut self, out: Var, a: Var, f: F) {
        if self.nodes[out.0].value.len() == 1 {
            if let Some(x) = self.nodes[a.0].scalar_f64 {
                let s = f(x);
                self.nodes[out.0].scalar_f64 = Some(s);
                self.nodes[out.0].value[0] = s as f32;
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "add")?;
        let v: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, c, v, ng, Op::Add(a, b));
        self.combine_scalars(out, a, b, |x, y| x + y);
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "sub")?;
        let v: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, c, v, ng, Op::Sub(a, b));
        self.combine_scalars(out, a, b, |x, y| x - y);
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "mul")?;
        let v: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, c, v, ng, Op::Mul(a, b));
        self.combine_scalars(out, a, b, |x, y| x * y);
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, cc) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, cc, v, ng, Op::Scale(a, c));
        self.map_scalar(out, a, |x| x * c as f64);
        out
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, cc) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, cc, v, ng, Op::AddScalar(a, c));
        self.map_scalar(out, a, |x| x + c as f64);
        out
    }

    /// A (m x k) times B (k x n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (kb, n) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if k != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul {m}x{k} by {kb}x{n}"
            )));
        }
        let mut v = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut v);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(m, n, v, ng, Op::MatMul(a, b)))
    }

    /// A (m x k) times B^T where B is n x k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (n, kb) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if k != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt {m}x{k} by ({n}x{kb})^T"
            )));
        }
        let mut v = vec![0.0; m * n];
        matmul_nt_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut v);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(m, n, v, ng, Op::MatMulNt(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        self.push(r, c, v, ng, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        self.push(r, c, v, ng, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, c, v, ng, Op::Exp(a));
        self.map_scalar(out, a, |x| x.exp());
        out
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x * x).collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out = self.push(r, c, v, ng, Op::Square(a));
        self.map_scalar(out, a, |x| x * x);
        out
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn elem_min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "elem_min")?;
        let v: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x.min(*y))
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        Ok(self.push(r, c, v, ng, Op::ElemMin(a, b)))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let v: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let ng = self.nodes[a.0].needs_grad;
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        self.push(r, c, v, ng, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax of `x / temp` with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var, temp: f32) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for j in 0..c {
                let e = (((row[j] - m) / temp) as f64).exp();
                v[i * c + j] = e as f32;
                denom += e;
            }
            for j in 0..c {
                v[i * c + j] = (v[i * c + j] as f64 / denom) as f32;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(r, c, v, ng, Op::SoftmaxRows { x, temp }))
    }

    /// Row-wise log-softmax (temperature 1).
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &val in row {
                denom += ((val - m) as f64).exp();
            }
            let lse = m as f64 + denom.ln();
            for j in 0..c {
                v[i * c + j] = (row[j] as f64 - lse) as f32;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(r, c, v, ng, Op::LogSoftmaxRows { x })
    }

    /// Row-wise layer norm without affine parameters, population variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f32) -> Var {
        let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let mu = row.iter().map(|&x| x as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x as f64 - mu).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..c {
                v[i * c + j] = ((row[j] as f64 - mu) * inv) as f32;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(r, c, v, ng, Op::LayerNormRows { x, eps })
    }

    /// Rescales each row to unit L2 norm; rows shorter than `eps` are
    /// divided by `eps` instead.
    pub fn normalize_rows(&mut self, x: Var, eps: f32) -> Var {
        let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let denom = norm.max(eps as f64);
            for j in 0..c {
                v[i * c + j] = (row[j] as f64 / denom) as f32;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(r, c, v, ng, Op::NormalizeRows { x, eps })
    }

    /// Adds a 1 x C row vector to every row of a B x C matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (rb, cb) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if rb != 1 || cb != c {
            return Err(Error::ShapeMismatch(format!(
                "add_row {r}x{c} plus {rb}x{cb}"
            )));
        }
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] = self.nodes[a.0].value[i * c + j] + self.nodes[b.0].value[j];
            }
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(r, c, v, ng, Op::AddRow(a, b)))
    }

    /// Multiplies every row of a B x C matrix by a 1 x C row vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (rb, cb) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if rb != 1 || cb != c {
            return Err(Error::ShapeMismatch(format!(
                "mul_row {r}x{c} times {rb}x{cb}"
            )));
        }
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] = self.nodes[a.0].value[i * c + j] * self.nodes[b.0].value[j];
            }
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(r, c, v, ng, Op::MulRow(a, b)))
    }

    /// Sums each row: B x C becomes B x 1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let mut v = vec![0.0f32; r];
        for i in 0..r {
            let mut s = 0.0f64;
            for j in 0..c {
                s += self.nodes[a.0].value[i * c + j] as f64;
            }
            v[i] = s as f32;
        }
        let ng = self.nodes[a.0].needs_grad;
        self.push(r, 1, v, ng, Op::RowSum(a))
    }

    /// Sum of all elements as a tracked f64 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        let ng = self.nodes[a.0].needs_grad;
        let out = self.push(1, 1, vec![s as f32], ng, Op::SumAll(a));
        self.nodes[out.0].scalar_f64 = Some(s);
        out
    }

    /// Mean of all elements as a tracked f64 scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let ng = self.nodes[a.0].needs_grad;
        let out = self.push(1, 1, vec![s as f32], ng, Op::MeanAll(a));
        self.nodes[out.0].scalar_f64 = Some(s);
        out
    }

    /// Mean of the main diagonal of a square matrix, tracked in f64.
    pub fn mean_diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if r != c {
            return Err(Error::ShapeMismatch(format!("mean_diag on {r}x{c}")));
        }
        let s: f64 = (0..r)
            .map(|i| self.nodes[a.0].value[i * c + i] as f64)
            .sum::<f64>()
            / r.max(1) as f64;
        let ng = self.nodes[a.0].needs_grad;
        let out = self.push(1, 1, vec![s as f32], ng, Op::MeanDiag(a));
        self.nodes[out.0].scalar_f64 = Some(s);
        Ok(out)
    }

    pub fn transpose_var(&mut self, a: Var) -> Var {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let v = super::transpose(&self.nodes[a.0].value, r, c);
        let ng = self.nodes[a.0].needs_grad;
        self.push(c, r, v, ng, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, ca) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (rb, cb) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if r != rb {
            return Err(Error::ShapeMismatch(format!(
                "concat_cols {r}x{ca} with {rb}x{cb}"
            )));
        }
        let mut v = vec![0.0f32; r * (ca + cb)];
        for i in 0..r {
            v[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].value[i * ca..(i + 1) * ca]);
            v[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].value[i * cb..(i + 1) * cb]);
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(r, ca + cb, v, ng, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (rb, cb) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if c != cb {
            return Err(Error::ShapeMismatch(format!(
                "concat_rows {ra}x{c} with {rb}x{cb}"
            )));
        }
        let mut v = Vec::with_capacity((ra + rb) * c);
        v.extend_from_slice(&self.nodes[a.0].value);
        v.extend_from_slice(&self.nodes[b.0].value);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(ra + rb, c, v, ng, Op::ConcatRows(a, b)))
    }

    /// Repeats an M x C matrix `times` times along rows (block layout).
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        let mut v = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            v.extend_from_slice(&self.nodes[x.0].value);
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(r * times, c, v, ng, Op::TileRows { x, times })
    }

    /// Expands B x C to (B * block) x C by repeating each row `block` times.
    pub fn repeat_row_per_block(&mut self, x: Var, block: usize) -> Var {
        let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        let mut v = Vec::with_capacity(r * block * c);
        for i in 0..r {
            for _ in 0..block {
                v.extend_from_slice(&self.nodes[x.0].value[i * c..(i + 1) * c]);
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(r * block, c, v, ng, Op::RepeatRowPerBlock { x, block })
    }

    /// Convex/linear combination per block: with weights w (B x n) and
    /// tokens x ((B*n) x C), returns y (B x C), y[b] = sum_i w[b,i] x[b*n+i].
    pub fn weighted_block_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let (b, n) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
        let (rx, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        if rx != b * n {
            return Err(Error::ShapeMismatch(format!(
                "weighted_block_sum weights {b}x{n} vs tokens {rx}x{c}"
            )));
        }
        let mut v = vec![0.0f32; b * c];
        for bi in 0..b {
            let out_row = &mut v[bi * c..(bi + 1) * c];
            for i in 0..n {
                let wv = self.nodes[w.0].value[bi * n + i];
                let row = &self.nodes[x.0].value[(bi * n + i) * c..(bi * n + i + 1) * c];
                for j in 0..c {
                    out_row[j] += wv * row[j];
                }
            }
        }
        let ng = self.nodes[w.0].needs_grad || self.nodes[x.0].needs_grad;
        Ok(self.push(b, c, v, ng, Op::WeightedBlockSum { w, x, n }))
    }

    /// Reinterprets the buffer with a new 2-D shape of equal size.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.value.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "reshape {}x{} to {rows}x{cols}",
                node.rows, node.cols
            )));
        }
        let v = node.value.clone();
        let ng = node.needs_grad;
        Ok(self.push(rows, cols, v, ng, Op::Reshape(x)))
    }

    /// Multi-head scaled dot-product attention over independent blocks.
    ///
    /// `q` is (blocks*nq) x (heads*dh), `k` and `v` are (blocks*nk) x
    /// (heads*dh). Within block b, queries attend only to that block's keys.
    /// Returns (blocks*nq) x (heads*dh) with heads concatenated.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qr, d) = (self.nodes[q.0].rows, self.nodes[q.0].cols);
        let (kr, dk) = (self.nodes[k.0].rows, self.nodes[k.0].cols);
        let (vr, dv) = (self.nodes[v.0].rows, self.nodes[v.0].cols);
        if d != dk || d != dv || kr != vr {
            return Err(Error::ShapeMismatch(format!(
                "attention q {qr}x{d}, k {kr}x{dk}, v {vr}x{dv}"
            )));
        }
        if blocks == 0 || qr % blocks != 0 || kr % blocks != 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention blocks={blocks} heads={heads} on q {qr}x{d}, k {kr}x{dk}"
            )));
        }
        let nq = qr / blocks;
        let nk = kr / blocks;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut out = vec![0.0f32; qr * d];
        let keep_weights = self.grad_mode
            && (self.nodes[q.0].needs_grad
                || self.nodes[k.0].needs_grad
                || self.nodes[v.0].needs_grad);
        let mut weights = if keep_weights {
            vec![0.0f32; blocks * heads * nq * nk]
        } else {
            Vec::new()
        };

        let mut qh = vec![0.0f32; nq * dh];
        let mut kh = vec![0.0f32; nk * dh];
        let mut vh = vec![0.0f32; nk * dh];
        let mut scores = vec![0.0f32; nq * nk];
        let mut oh = vec![0.0f32; nq * dh];
        for b in 0..blocks {
            for h in 0..heads {
                gather_head(&self.nodes[q.0].value, b * nq, nq, d, h * dh, dh, &mut qh);
                gather_head(&self.nodes[k.0].value, b * nk, nk, d, h * dh, dh, &mut kh);
                gather_head(&self.nodes[v.0].value, b * nk, nk, d, h * dh, dh, &mut vh);

                scores.iter_mut().for_each(|s| *s = 0.0);
                matmul_nt_acc(&qh, &kh, nq, dh, nk, &mut scores);
                for row in scores.chunks_mut(nk) {
                    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut denom = 0.0f64;
                    for s in row.iter_mut() {
                        let e = (((*s - m) * scale) as f64).exp();
                        *s = e as f32;
                        denom += e;
                    }
                    for s in row.iter_mut() {
                        *s = (*s as f64 / denom) as f32;
                    }
                }
                if keep_weights {
                    let o = (b * heads + h) * nq * nk;
                    weights[o..o + nq * nk].copy_from_slice(&scores);
                }

                oh.iter_mut().for_each(|x| *x = 0.0);
                matmul_acc(&scores, &vh, nq, nk, dh, &mut oh);
                scatter_head(&oh, b * nq, nq, d, h * dh, dh, &mut out);
            }
        }

        let ng = self.nodes[q.0].needs_grad
            || self.nodes[k.0].needs_grad
            || self.nodes[v.0].needs_grad;
        Ok(self.push(
            qr,
            d,
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                nq,
                nk,
                heads,
                weights,
            },
        ))
    }

    /// Runs reverse accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.grad_mode {
            return Err(Error::InvalidArgument(
                "backward on an inference tape".into(),
            ));
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward from a {}x{} node",
                ln.rows, ln.cols
            )));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            // Leaf gradients are results; put them back.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<f32>>],
        nodes: &[Node],
        v: Var,
    ) -> &'a mut Vec<f32> {
        if grads[v.0].is_none() {
            grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
        }
        grads[v.0].as_mut().unwrap()
    }

    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if wants(*b) {
                    let db = Self::ensure(grads, nodes, *b);
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if wants(*b) {
                    let db = Self::ensure(grads, nodes, *b);
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = Self::ensure(grads, nodes, *b);
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = Self::ensure(grads, nodes, *a);
                    matmul_nt_acc(g, bv, m, n, k, da);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = Self::ensure(grads, nodes, *b);
                    matmul_tn_acc(av, g, m, k, n, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].rows;
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = Self::ensure(grads, nodes, *a);
                    matmul_acc(g, bv, m, n, k, da);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = Self::ensure(grads, nodes, *b);
                    matmul_tn_acc(g, av, m, n, k, db);
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = &nodes[id].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let y = &nodes[id].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let y = &nodes[id].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    let x = &nodes[a.0].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * 2.0 * x[i];
                    }
                }
            }
            Op::ElemMin(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            da[i] += g[i];
                        }
                    }
                }
                if wants(*b) {
                    let db = Self::ensure(grads, nodes, *b);
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            db[i] += g[i];
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wants(*a) {
                    let x = &nodes[a.0].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, temp } => {
                if wants(*x) {
                    let y = &nodes[id].value;
                    let c = nodes[id].cols;
                    let dx = Self::ensure(grads, nodes, *x);
                    for i in 0..nodes[id].rows {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv as f64 * gv as f64)
                            .sum();
                        for j in 0..c {
                            dx[i * c + j] +=
                                (yr[j] as f64 * (gr[j] as f64 - dot) / *temp as f64) as f32;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { x } => {
                if wants(*x) {
                    let y = &nodes[id].value;
                    let c = nodes[id].cols;
                    let dx = Self::ensure(grads, nodes, *x);
                    for i in 0..nodes[id].rows {
                        let gr = &g[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                        for j in 0..c {
                            let p = (y[i * c + j] as f64).exp();
                            dx[i * c + j] += (gr[j] as f64 - p * gsum) as f32;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, eps } => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let y = &nodes[id].value;
                    let c = nodes[id].cols;
                    let dx = Self::ensure(grads, nodes, *x);
                    for i in 0..nodes[id].rows {
                        let xr = &xv[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mu = xr.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                        let var =
                            xr.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + *eps as f64).sqrt();
                        let gmean = gr.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                        let gymean = gr
                            .iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| gv as f64 * yv as f64)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            dx[i * c + j] += ((gr[j] as f64 - gmean - yr[j] as f64 * gymean)
                                * inv) as f32;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, eps } => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let y = &nodes[id].value;
                    let c = nodes[id].cols;
                    let dx = Self::ensure(grads, nodes, *x);
                    for i in 0..nodes[id].rows {
                        let xr = &xv[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let norm = xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                        if norm > *eps as f64 {
                            let dot: f64 = gr
                                .iter()
                                .zip(yr)
                                .map(|(&gv, &yv)| gv as f64 * yv as f64)
                                .sum();
                            for j in 0..c {
                                dx[i * c + j] +=
                                    ((gr[j] as f64 - dot * yr[j] as f64) / norm) as f32;
                            }
                        } else {
                            for j in 0..c {
                                dx[i * c + j] += gr[j] / *eps;
                            }
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                let c = nodes[id].cols;
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if wants(*b) {
                    let db = Self::ensure(grads, nodes, *b);
                    for i in 0..nodes[id].rows {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::MulRow(a, b) => {
                let c = nodes[id].cols;
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..nodes[id].rows {
                        for j in 0..c {
                            da[i * c + j] += g[i * c + j] * bv[j];
                        }
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = Self::ensure(grads, nodes, *b);
                    for i in 0..nodes[id].rows {
                        for j in 0..c {
                            db[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if wants(*a) {
                    let c = nodes[a.0].cols;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..nodes[a.0].rows {
                        for j in 0..c {
                            da[i * c + j] += g[i];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if wants(*a) {
                    let scale = g[0] / nodes[a.0].value.len().max(1) as f32;
                    let da = Self::ensure(grads, nodes, *a);
                    for d in da.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::MeanDiag(a) => {
                if wants(*a) {
                    let r = nodes[a.0].rows;
                    let scale = g[0] / r.max(1) as f32;
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..r {
                        da[i * r + i] += scale;
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (nodes[id].rows, nodes[id].cols);
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].cols;
                let cb = nodes[b.0].cols;
                let c = ca + cb;
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for i in 0..nodes[id].rows {
                        for j in 0..ca {
                            da[i * ca + j] += g[i * c + j];
                        }
                    }
                }
                if wants(*b) {
                    let db = Self::ensure(grads, nodes, *b);
                    for i in 0..nodes[id].rows {
                        for j in 0..cb {
                            db[i * cb + j] += g[i * c + ca + j];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.len();
                if wants(*a) {
                    let da = Self::ensure(grads, nodes, *a);
                    for (d, &gv) in da.iter_mut().zip(&g[..na]) {
                        *d += gv;
                    }
                }
                if wants(*b) {
                    let db = Self::ensure(grads, nodes, *b);
                    for (d, &gv) in db.iter_mut().zip(&g[na..]) {
                        *d += gv;
                    }
                }
            }
            Op::TileRows { x, times } => {
                if wants(*x) {
                    let n = nodes[x.0].value.len();
                    let dx = Self::ensure(grads, nodes, *x);
                    for t in 0..*times {
                        for i in 0..n {
                            dx[i] += g[t * n + i];
                        }
                    }
                }
            }
            Op::RepeatRowPerBlock { x, block } => {
                if wants(*x) {
                    let (r, c) = (nodes[x.0].rows, nodes[x.0].cols);
                    let dx = Self::ensure(grads, nodes, *x);
                    for i in 0..r {
                        for rep in 0..*block {
                            let src = &g[(i * block + rep) * c..(i * block + rep + 1) * c];
                            for j in 0..c {
                                dx[i * c + j] += src[j];
                            }
                        }
                    }
                }
            }
            Op::WeightedBlockSum { w, x, n } => {
                let b = nodes[w.0].rows;
                let c = nodes[x.0].cols;
                if wants(*w) {
                    let xv = &nodes[x.0].value;
                    let dw = Self::ensure(grads, nodes, *w);
                    for bi in 0..b {
                        let gr = &g[bi * c..(bi + 1) * c];
                        for i in 0..*n {
                            let row = &xv[(bi * n + i) * c..(bi * n + i + 1) * c];
                            dw[bi * n + i] += super::dot(gr, row);
                        }
                    }
                }
                if wants(*x) {
                    let wv = &nodes[w.0].value;
                    let dx = Self::ensure(grads, nodes, *x);
                    for bi in 0..b {
                        let gr = &g[bi * c..(bi + 1) * c];
                        for i in 0..*n {
                            let wval = wv[bi * n + i];
                            let row = &mut dx[(bi * n + i) * c..(bi * n + i + 1) * c];
                            for j in 0..c {
                                row[j] += wval * gr[j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let dx = Self::ensure(grads, nodes, *x);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                nq,
                nk,
                heads,
                weights,
            } => {
                self.backprop_attention(
                    g, grads, *q, *k, *v, *blocks, *nq, *nk, *heads, weights,
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        nq: usize,
        nk: usize,
        heads: usize,
        weights: &[f32],
    ) {
        let nodes = &self.nodes;
        let d = nodes[q.0].cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let want_q = nodes[q.0].needs_grad;
        let want_k = nodes[k.0].needs_grad;
        let want_v = nodes[v.0].needs_grad;
        // Materialize all three grad buffers up front so the borrow of
        // `grads` does not fight the scratch loops below.
        if want_q {
            Self::ensure(grads, nodes, q);
        }
        if want_k {
            Self::ensure(grads, nodes, k);
        }
        if want_v {
            Self::ensure(grads, nodes, v);
        }

        let mut qh = vec![0.0f32; nq * dh];
        let mut kh = vec![0.0f32; nk * dh];
        let mut vh = vec![0.0f32; nk * dh];
        let mut goh = vec![0.0f32; nq * dh];
        let mut dp = vec![0.0f32; nq * nk];
        let mut ds = vec![0.0f32; nq * nk];
        let mut dqh = vec![0.0f32; nq * dh];
        let mut dkh = vec![0.0f32; nk * dh];
        let mut dvh = vec![0.0f32; nk * dh];

        for b in 0..blocks {
            for h in 0..heads {
                let p = &weights[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
                gather_head(&nodes[q.0].value, b * nq, nq, d, h * dh, dh, &mut qh);
                gather_head(&nodes[k.0].value, b * nk, nk, d, h * dh, dh, &mut kh);
                gather_head(&nodes[v.0].value, b * nk, nk, d, h * dh, dh, &mut vh);
                gather_head(g, b * nq, nq, d, h * dh, dh, &mut goh);

                if want_v {
                    dvh.iter_mut().for_each(|x| *x = 0.0);
                    matmul_tn_acc(p, &goh, nq, nk, dh, &mut dvh);
                    scatter_head_acc(&dvh, b * nk, nk, d, h * dh, dh, grads[v.0].as_mut().unwrap());
                }
                if want_q || want_k {
                    dp.iter_mut().for_each(|x| *x = 0.0);
                    matmul_nt_acc(&goh, &vh, nq, dh, nk, &mut dp);
                    // Softmax backward per row, then undo the score scaling.
                    for i in 0..nq {
                        let pr = &p[i * nk..(i + 1) * nk];
                        let dpr = &dp[i * nk..(i + 1) * nk];
                        let dot: f64 = pr
                            .iter()
                            .zip(dpr)
                            .map(|(&pv, &dv)| pv as f64 * dv as f64)
                            .sum();
                        for j in 0..nk {
                            ds[i * nk + j] =
                                (pr[j] as f64 * (dpr[j] as f64 - dot) * scale as f64) as f32;
                        }
                    }
                    if want_q {
                        dqh.iter_mut().for_each(|x| *x = 0.0);
                        matmul_acc(&ds, &kh, nq, nk, dh, &mut dqh);
                        scatter_head_acc(
                            &dqh,
                            b * nq,
                            nq,
                            d,
                            h * dh,
                            dh,
                            grads[q.0].as_mut().unwrap(),
                        );
                    }
                    if want_k {
                        dkh.iter_mut().for_each(|x| *x = 0.0);
                        matmul_tn_acc(&ds, &qh, nq, nk, dh, &mut dkh);
                        scatter_head_acc(
                            &dkh,
                            b * nk,
                            nk,
                            d,
                            h * dh,
                            dh,
                            grads[k.0].as_mut().unwrap(),
                        );
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Re-evaluates the recorded graph up to `target` entirely in f64,
    /// substituting `leaf_values` for the given leaf. This is the oracle
    /// side of finite-difference checking: the recorded f32 program is
    /// replayed without rounding noise, so central differences resolve
    /// gradients far below f32 epsilon.
    pub fn replay_scalar_f64(
        &self,
        target: Var,
        leaf: Var,
        leaf_values: &[f64],
    ) -> Result<f64> {
        if !matches!(self.nodes[leaf.0].op, Op::Leaf) {
            return Err(Error::InvalidArgument(
                "replay override must be a leaf".into(),
            ));
        }
        if leaf_values.len() != self.nodes[leaf.0].value.len() {
            return Err(Error::ShapeMismatch(format!(
                "override has {} elements, leaf has {}",
                leaf_values.len(),
                self.nodes[leaf.0].value.len()
            )));
        }
        if self.nodes[target.0].value.len() != 1 {
            return Err(Error::ShapeMismatch("replay target must be 1x1".into()));
        }

        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            let v = |x: Var| -> &[f64] { &vals[x.0] };
            let out: Vec<f64> = match &node.op {
                Op::Leaf => {
                    if id == leaf.0 {
                        leaf_values.to_vec()
                    } else {
                        node.value.iter().map(|&x| x as f64).collect()
                    }
                }
                Op::Add(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x - y).collect(),
                Op::Mul(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).collect(),
                Op::Scale(a, c) => v(*a).iter().map(|x| x * *c as f64).collect(),
                Op::AddScalar(a, c) => v(*a).iter().map(|x| x + *c as f64).collect(),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    let (av, bv) = (v(*a), v(*b));
                    let mut out = vec![0.0f64; m * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                out[i * n + j] += aik * bv[kk * n + j];
                            }
                        }
                    }
                    out
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].rows;
                    let (av, bv) = (v(*a), v(*b));
                    let mut out = vec![0.0f64; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let mut s = 0.0;
                            for kk in 0..k {
                                s += av[i * k + kk] * bv[j * k + kk];
                            }
                            out[i * n + j] = s;
                        }
                    }
                    out
                }
                Op::Tanh(a) => v(*a).iter().map(|x| x.tanh()).collect(),
                Op::Sigmoid(a) => v(*a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
                Op::Exp(a) => v(*a).iter().map(|x| x.exp()).collect(),
                Op::Square(a) => v(*a).iter().map(|x| x * x).collect(),
                Op::ElemMin(a, b) => v(*a)
                    .iter()
                    .zip(v(*b))
                    .map(|(x, y)| if x <= y { *x } else { *y })
                    .collect(),
                Op::Clamp(a, lo, hi) => v(*a)
                    .iter()
                    .map(|x| x.clamp(*lo as f64, *hi as f64))
                    .collect(),
                Op::SoftmaxRows { x, temp } => {
                    let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let xv = v(*x);
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for j in 0..c {
                            let e = ((row[j] - m) / *temp as f64).exp();
                            out[i * c + j] = e;
                            denom += e;
                        }
                        for j in 0..c {
                            out[i * c + j] /= denom;
                        }
                    }
                    out
                }
                Op::LogSoftmaxRows { x } => {
                    let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let xv = v(*x);
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                        for j in 0..c {
                            out[i * c + j] = row[j] - lse;
                        }
                    }
                    out
                }
                Op::LayerNormRows { x, eps } => {
                    let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let xv = v(*x);
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let mu = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + *eps as f64).sqrt();
                        for j in 0..c {
                            out[i * c + j] = (row[j] - mu) * inv;
                        }
                    }
                    out
                }
                Op::NormalizeRows { x, eps } => {
                    let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let xv = v(*x);
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let denom = norm.max(*eps as f64);
                        for j in 0..c {
                            out[i * c + j] = row[j] / denom;
                        }
                    }
                    out
                }
                Op::AddRow(a, b) => {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let (av, bv) = (v(*a), v(*b));
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = av[i * c + j] + bv[j];
                        }
                    }
                    out
                }
                Op::MulRow(a, b) => {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let (av, bv) = (v(*a), v(*b));
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = av[i * c + j] * bv[j];
                        }
                    }
                    out
                }
                Op::RowSum(a) => {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let av = v(*a);
                    (0..r)
                        .map(|i| av[i * c..(i + 1) * c].iter().sum::<f64>())
                        .collect()
                }
                Op::SumAll(a) => vec![v(*a).iter().sum::<f64>()],
                Op::MeanAll(a) => {
                    let av = v(*a);
                    vec![av.iter().sum::<f64>() / av.len().max(1) as f64]
                }
                Op::MeanDiag(a) => {
                    let r = self.nodes[a.0].rows;
                    let av = v(*a);
                    vec![(0..r).map(|i| av[i * r + i]).sum::<f64>() / r.max(1) as f64]
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let av = v(*a);
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = av[i * c + j];
                        }
                    }
                    out
                }
                Op::ConcatCols(a, b) => {
                    let r = self.nodes[a.0].rows;
                    let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let (av, bv) = (v(*a), v(*b));
                    let mut out = vec![0.0f64; r * (ca + cb)];
                    for i in 0..r {
                        out[i * (ca + cb)..i * (ca + cb) + ca]
                            .copy_from_slice(&av[i * ca..(i + 1) * ca]);
                        out[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                            .copy_from_slice(&bv[i * cb..(i + 1) * cb]);
                    }
                    out
                }
                Op::ConcatRows(a, b) => {
                    let mut out = v(*a).to_vec();
                    out.extend_from_slice(v(*b));
                    out
                }
                Op::TileRows { x, times } => {
                    let mut out = Vec::with_capacity(v(*x).len() * times);
                    for _ in 0..*times {
                        out.extend_from_slice(v(*x));
                    }
                    out
                }
                Op::RepeatRowPerBlock { x, block } => {
                    let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    let xv = v(*x);
                    let mut out = Vec::with_capacity(r * block * c);
                    for i in 0..r {
                        for _ in 0..*block {
                            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
                        }
                    }
                    out
                }
                Op::WeightedBlockSum { w, x, n } => {
                    let b = self.nodes[w.0].rows;
                    let c = self.nodes[x.0].cols;
                    let (wv, xv) = (v(*w), v(*x));
                    let mut out = vec![0.0f64; b * c];
                    for bi in 0..b {
                        for i in 0..*n {
                            let wval = wv[bi * n + i];
                            for j in 0..c {
                                out[bi * c + j] += wval * xv[(bi * n + i) * c + j];
                            }
                        }
                    }
                    out
                }
                Op::Reshape(x) => v(*x).to_vec(),
                Op::Attention {
                    q,
                    k,
                    v: vv,
                    blocks,
                    nq,
                    nk,
                    heads,
                    ..
                } => {
                    let d = self.nodes[q.0].cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qv, kv, vvv) = (&vals[q.0], &vals[k.0], &vals[vv.0]);
                    let mut out = vec![0.0f64; self.nodes[q.0].rows * d];
                    let mut p = vec![0.0f64; *nk];
                    for b in 0..*blocks {
                        for h in 0..*heads {
                            for iq in 0..*nq {
                                let qrow = &qv[(b * nq + iq) * d + h * dh..][..dh];
                                let mut m = f64::NEG_INFINITY;
                                for jk in 0..*nk {
                                    let krow = &kv[(b * nk + jk) * d + h * dh..][..dh];
                                    let s: f64 =
                                        qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                                    p[jk] = s;
                                    m = m.max(s);
                                }
                                let mut denom = 0.0;
                                for pj in p.iter_mut() {
                                    *pj = ((*pj - m) * scale).exp();
                                    denom += *pj;
                                }
                                for jk in 0..*nk {
                                    let w = p[jk] / denom;
                                    let vrow = &vvv[(b * nk + jk) * d + h * dh..][..dh];
                                    let orow =
                                        &mut out[(b * nq + iq) * d + h * dh..][..dh];
                                    for x in 0..dh {
                                        orow[x] += w * vrow[x];
                                    }
                                }
                            }
                        }
                    }
                    out
                }
            };
            vals.push(out);
        }
        Ok(vals[target.0][0])
    }
}

/// Copies a head's column slice into a contiguous rows x dh scratch buffer.
fn gather_head(
    src: &[f32],
    row0: usize,
    rows: usize,
    stride: usize,
    col0: usize,
    dh: usize,
    dst: &mut [f32],
) {
    for i in 0..rows {
        let o = (row0 + i) * stride + col0;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[o..o + dh]);
    }
}

/// Writes a contiguous rows x dh buffer back into a head's column slice.
fn scatter_head(
    src: &[f32],
    row0: usize,
    rows: usize,
    stride: usize,
    col0: usize,
    dh: usize,
    dst: &mut [f32],
) {
    for i in 0..rows {
        let o = (row0 + i) * stride + col0;
        dst[o..o + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Accumulating variant of [`scatter_head`].
fn scatter_head_acc(
    src: &[f32],
    row0: usize,
    rows: usize,
    stride: usize,
    col0: usize,
    dh: usize,
    dst: &mut [f32],
) {
    for i in 0..rows {
        let o = (row0 + i) * stride + col0;
        for j in 0..dh {
            dst[o + j] += src[i * dh + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f32, b: f64, tol: f64) -> bool {
        (a as f64 - b).abs() <= tol
    }

    #[test]
    fn softmax_rows_matches_direct_f64_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 3, vec![1.2, -0.4, 0.7]).unwrap();
        let y = tape.softmax_rows(x, 0.5).unwrap();

        let logits = [1.2f64 / 0.5, -0.4 / 0.5, 0.7 / 0.5];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..3 {
            assert!(close(tape.value(y)[j], logits[j].exp() / z, 1e-6));
        }
        let s: f64 = tape.value(y).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_is_shift_invariant_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(1, 3, vec![1000.0, 1000.5, 999.0]).unwrap();
        let b = tape.constant(1, 3, vec![0.0, 0.5, -1.0]).unwrap();
        let ya = tape.softmax_rows(a, 1.0).unwrap();
        let yb = tape.softmax_rows(b, 1.0).unwrap();
        for j in 0..3 {
            assert!(tape.value(ya)[j].is_finite());
            assert!((tape.value(ya)[j] - tape.value(yb)[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let mut tape = Tape::new();
        let x = tape.constant(2, 4, vec![0.3, -1.2, 2.0, 0.0, -5.0, 1.0, 1.0, 0.5]).unwrap();
        let ls = tape.log_softmax_rows(x);
        let sm = tape.softmax_rows(x, 1.0).unwrap();
        for i in 0..8 {
            assert!(
                (tape.value(ls)[i].exp() - tape.value(sm)[i]).abs() < 1e-6,
                "index {i}"
            );
        }
    }

    #[test]
    fn layer_norm_rows_matches_direct_f64_evaluation() {
        let data = vec![0.5f32, -1.5, 2.0, 0.0, 3.0, 3.0, 3.0, 3.0];
        let mut tape = Tape::new();
        let x = tape.constant(2, 4, data.clone()).unwrap();
        let y = tape.layer_norm_rows(x, 1e-5);

        for i in 0..2 {
            let row: Vec<f64> = data[i * 4..(i + 1) * 4].iter().map(|&v| v as f64).collect();
            let mu = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let want = (row[j] - mu) / (var + 1e-5).sqrt();
                assert!(close(tape.value(y)[i * 4 + j], want, 1e-6));
            }
        }
        // Constant row normalizes to zeros, not NaN.
        assert!(tape.value(y)[4..].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn normalize_rows_produces_unit_norm_and_guards_zero() {
        let mut tape = Tape::new();
        let x = tape
            .constant(2, 3, vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0])
            .unwrap();
        let y = tape.normalize_rows(x, 1e-8);
        let n0: f64 = tape.value(y)[..3].iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((n0.sqrt() - 1.0).abs() < 1e-6);
        assert!(tape.value(y)[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_single_head_matches_manual_computation() {
        // One block, one head, two queries, two keys, width two.
        let mut tape = Tape::new();
        let q = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = tape.attention(q, k, v, 1, 1).unwrap();

        let s = 1.0f64 / (2.0f64).sqrt();
        // Row 0 scores: [s, 0]; softmax in f64.
        let w0 = s.exp() / (s.exp() + 1.0);
        let want00 = w0 * 1.0 + (1.0 - w0) * 3.0;
        let want01 = w0 * 2.0 + (1.0 - w0) * 4.0;
        assert!(close(tape.value(o)[0], want00, 1e-6));
        assert!(close(tape.value(o)[1], want01, 1e-6));
    }

    #[test]
    fn attention_blocks_do_not_leak_across_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q2 = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let kv2 = Tensor::randn(vec![6, 6], 1.0, &mut rng);

        // Two blocks computed together.
        let mut tape = Tape::new();
        let q = tape.constant_from(&q2);
        let k = tape.constant_from(&kv2);
        let v = tape.constant_from(&kv2);
        let o = tape.attention(q, k, v, 2, 2).unwrap();
        let joint = tape.value(o).to_vec();

        // Block 1 computed alone must match rows 2..4.
        let mut tape1 = Tape::new();
        let q1 = tape1.constant(2, 6, q2.data()[12..].to_vec()).unwrap();
        let k1 = tape1.constant(3, 6, kv2.data()[18..].to_vec()).unwrap();
        let v1 = tape1.constant(3, 6, kv2.data()[18..].to_vec()).unwrap();
        let o1 = tape1.attention(q1, k1, v1, 1, 2).unwrap();
        for i in 0..12 {
            assert!((joint[12 + i] - tape1.value(o1)[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_on_composed_scalar_matches_hand_gradient() {
        // f(x) = mean((tanh(x) - t)^2), df/dx = 2 (tanh x - t)(1 - tanh^2 x)/n
        let xv = vec![0.3f32, -1.0, 2.0];
        let tv = vec![0.0f32, 0.5, 1.0];
        let mut tape = Tape::new();
        let xt = Tensor::new(vec![1, 3], xv.clone()).unwrap();
        let x = tape.param(&xt);
        let t = tape.constant(1, 3, tv.clone()).unwrap();
        let h = tape.tanh(x);
        let d = tape.sub(h, t).unwrap();
        let sq = tape.square(d);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for i in 0..3 {
            let th = (xv[i] as f64).tanh();
            let want = 2.0 * (th - tv[i] as f64) * (1.0 - th * th) / 3.0;
            assert!(close(gx[i], want, 1e-6), "grad {i}: {} vs {want}", gx[i]);
        }
    }

    #[test]
    fn constants_are_not_given_gradients() {
        let mut tape = Tape::new();
        let pt = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let p = tape.param(&pt);
        let c = tape.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let prod = tape.mul(p, c).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(p).is_some());
        assert!(grads.get(c).is_none());
        assert!(!tape.needs_grad(c));
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut tape = Tape::new_inference();
        let t = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let x = tape.param(&t);
        let y = tape.square(x);
        let loss = tape.sum_all(y);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn scalar_tracking_keeps_f64_precision_through_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = tape.sum_all(a);
        let m = tape.scale(s, 0.5);
        let m2 = tape.add_scalar(m, 1.0);
        assert_eq!(tape.scalar(m2).unwrap(), 4.0);
    }

    #[test]
    fn weighted_block_sum_matches_manual_loop() {
        let mut tape = Tape::new();
        let w = tape.constant(2, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let x = tape
            .constant(4, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 0.0])
            .unwrap();
        let y = tape.weighted_block_sum(w, x).unwrap();
        assert_eq!(tape.value(y), &[0.25, 0.75, 3.0, 1.0]);
    }

    #[test]
    fn block_layout_ops_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tiled = tape.tile_rows(x, 2);
        assert_eq!(tape.rows(tiled), 4);
        assert_eq!(&tape.value(tiled)[6..9], &[1.0, 2.0, 3.0]);

        let rep = tape.repeat_row_per_block(x, 2);
        assert_eq!(tape.rows(rep), 4);
        assert_eq!(&tape.value(rep)[3..6], &[1.0, 2.0, 3.0]);
        assert_eq!(&tape.value(rep)[6..9], &[4.0, 5.0, 6.0]);

        let flat = tape.reshape(x, 1, 6).unwrap();
        assert_eq!(tape.value(flat), tape.value(x));
    }
}
