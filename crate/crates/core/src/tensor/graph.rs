use super::kernels::{self, gemm};
use super::{Mask, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    /// Tanh approximation with cubic coefficient 0.044715.
    Gelu,
    Silu,
    Relu,
    Tanh,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Unary(Var, Unary),
    SoftmaxMasked { x: Var, mask: Mask },
    LayerNorm { x: Var, eps: f64 },
    ConcatLast(Var, Var),
    ConcatSeq(Var, Var),
    SelectSeq { x: Var, index: Vec<usize> },
    Embedding { table: Var, index: Vec<usize>, lead: Vec<usize> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Reshape { x: Var, shape: Vec<usize> },
    SumAll(Var),
    MseMasked { pred: Var, target: Tensor, mask: Vec<bool> },
    CrossEntropyMasked { logits: Var, target: Vec<usize>, mask: Vec<bool> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatLast(a, b) | Op::ConcatSeq(a, b) => vec![*a, *b],
            Op::AddScalar(x, _)
            | Op::MulScalar(x, _)
            | Op::Unary(x, _)
            | Op::SumAll(x)
            | Op::SoftmaxMasked { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::SelectSeq { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::MseMasked { pred, .. } => vec![*pred],
            Op::CrossEntropyMasked { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation record: nodes in creation (hence topological) order.
///
/// Leaf gradients accumulate across repeated [`Graph::backward`] calls until
/// [`Graph::zero_grads`]; gradients of intermediate nodes hold the most recent
/// pass only.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Shapes of a broadcast binary op: the output takes the longer operand's
/// shape, and the shorter one repeats over leading dims.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b || bn == 1 && an >= 1 {
        return Ok(a.to_vec());
    }
    if an == 1 {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(shape_err(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible"
    )))
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if cols == 0 { 0 } else { n / cols }, cols)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Node values in record order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Ids of each node's inputs, in record order.
    pub fn record(&self) -> Vec<(usize, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.op.inputs().into_iter().map(Var::id).collect()))
            .collect()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recomputes every non-leaf node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut g = Graph {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for n in &self.nodes {
            let value = match n.op {
                Op::Leaf => n.value.clone(),
                _ => g.eval(&n.op)?,
            };
            g.nodes.push(Node {
                value,
                grad: None,
                requires_grad: n.requires_grad,
                op: n.op.clone(),
            });
        }
        Ok(g.nodes.into_iter().map(|n| n.value).collect())
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., m, k] · b[k, n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b })
    }

    /// `x[..., in] · wᵀ + bias` with `w[out, in]` and `bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.push(Op::Linear { x, w, b })
    }

    /// Batched product over a shared leading dim: `a[N, m, k] · b[N, k, n]`,
    /// or `a · bᵀ` with `b[N, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.push(Op::BatchMatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(x, c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::MulScalar(x, c))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        self.push(Op::Unary(x, kind))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    /// Softmax over the last dim; masked slots are exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Mask) -> Result<Var> {
        self.push(Op::SoftmaxMasked { x, mask })
    }

    /// Normalizes the last dim to zero mean and unit population variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatLast(a, b))
    }

    /// Concatenates `[B, N1, D]` and `[B, N2, D]` along the middle axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatSeq(a, b))
    }

    /// Gathers positions `index` from the middle axis of `x[B, N, D]`.
    pub fn select_seq(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectSeq { x, index })
    }

    /// Row lookup into `table[V, D]`; output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, index: Vec<usize>, lead: Vec<usize>) -> Result<Var> {
        self.push(Op::Embedding { table, index, lead })
    }

    /// `[B, L, H·d] → [B·H, L, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::SplitHeads { x, heads })
    }

    /// `[B·H, L, d] → [B, L, H·d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::MergeHeads { x, heads })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape { x, shape })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    /// Mean squared error over unmasked rows of `pred[..., A]`.
    pub fn mse_masked(&mut self, pred: Var, target: Tensor, mask: Vec<bool>) -> Result<Var> {
        self.push(Op::MseMasked { pred, target, mask })
    }

    /// Mean cross-entropy of `softmax(logits[N, n])` against class indices
    /// over unmasked rows.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        target: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Var> {
        self.push(Op::CrossEntropyMasked {
            logits,
            target,
            mask,
        })
    }

    // ------------------------------------------------------------ forward

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |x: &Var| &self.nodes[x.0].value;
        match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::MatMul { a, b } => {
                let (a, b) = (v(a), v(b));
                if a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.shape()[0] {
                    return Err(shape_err(format!(
                        "matmul: cannot multiply {:?} by {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let (m, k) = rows_cols(a.shape());
                let n = b.shape()[1];
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                Tensor::new(shape, out)
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (v(x), v(w));
                if wv.rank() != 2 || xv.rank() < 1 || xv.last_dim() != wv.shape()[1] {
                    return Err(shape_err(format!(
                        "linear: input {:?} does not match weight {:?}",
                        xv.shape(),
                        wv.shape()
                    )));
                }
                let (m, k) = rows_cols(xv.shape());
                let n = wv.shape()[0];
                let mut out = vec![0.0; m * n];
                if let Some(b) = b {
                    let bv = v(b);
                    if bv.numel() != n {
                        return Err(shape_err(format!(
                            "linear: bias {:?} does not match {n} outputs",
                            bv.shape()
                        )));
                    }
                    for row in out.chunks_exact_mut(n) {
                        row.copy_from_slice(bv.data());
                    }
                    gemm(m, k, n, xv.data(), (k, 1), wv.data(), (1, k), &mut out, 1.0);
                } else {
                    gemm(m, k, n, xv.data(), (k, 1), wv.data(), (1, k), &mut out, 0.0);
                }
                let mut shape = xv.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                Tensor::new(shape, out)
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
                    return Err(shape_err(format!(
                        "bmm: incompatible {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let (kb, n) = if *trans_b {
                    (b.shape()[2], b.shape()[1])
                } else {
                    (b.shape()[1], b.shape()[2])
                };
                if kb != k {
                    return Err(shape_err(format!(
                        "bmm: inner dims disagree for {:?} and {:?} (trans_b={trans_b})",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut out = vec![0.0; nb * m * n];
                let bs = if *trans_b { (1, k) } else { (n, 1) };
                for i in 0..nb {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..],
                        (k, 1),
                        &b.data()[i * k * n..],
                        bs,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                Tensor::new(vec![nb, m, n], out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let shape = broadcast_shape(av.shape(), bv.shape())?;
                let n: usize = shape.iter().product();
                let (ad, bd) = (av.data(), bv.data());
                let (al, bl) = (ad.len(), bd.len());
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = if al == n && bl == n {
                    ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
                } else {
                    (0..n).map(|i| f(ad[i % al], bd[i % bl])).collect()
                };
                Tensor::new(shape, out)
            }
            Op::AddScalar(x, c) => {
                let xv = v(x);
                Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|a| a + c).collect())
            }
            Op::MulScalar(x, c) => {
                let xv = v(x);
                Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|a| a * c).collect())
            }
            Op::Unary(x, kind) => {
                let xv = v(x);
                let f: fn(f64) -> f64 = match kind {
                    Unary::Gelu => kernels::gelu,
                    Unary::Silu => kernels::silu,
                    Unary::Relu => |a| a.max(0.0),
                    Unary::Tanh => f64::tanh,
                };
                Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&a| f(a)).collect())
            }
            Op::SoftmaxMasked { x, mask } => {
                let xv = v(x);
                if xv.rank() == 0 || !xv.shape().ends_with(mask.shape()) || mask.numel() == 0 {
                    return Err(shape_err(format!(
                        "softmax: mask {:?} does not trail input {:?}",
                        mask.shape(),
                        xv.shape()
                    )));
                }
                let n = xv.last_dim();
                if mask.rank_ok(n) {
                    let mut out = vec![0.0; xv.numel()];
                    if let Some(row) = kernels::softmax_rows(xv.data(), n, mask.data(), &mut out)
                    {
                        return Err(Error::InvalidMask(format!("row {row} is fully masked")));
                    }
                    Tensor::new(xv.shape().to_vec(), out)
                } else {
                    Err(shape_err("softmax: mask must cover the last dim"))
                }
            }
            Op::LayerNorm { x, eps } => {
                let xv = v(x);
                let (rows, d) = rows_cols(xv.shape());
                if d == 0 {
                    return Err(shape_err("layer_norm over an empty last dim"));
                }
                let mut out = vec![0.0; xv.numel()];
                let mut rstd = vec![0.0; rows];
                kernels::layer_norm_rows(xv.data(), d, *eps, &mut out, &mut rstd);
                Tensor::new(xv.shape().to_vec(), out)
            }
            Op::ConcatLast(a, b) => {
                let (av, bv) = (v(a), v(b));
                if av.rank() == 0
                    || av.rank() != bv.rank()
                    || av.shape()[..av.rank() - 1] != bv.shape()[..bv.rank() - 1]
                {
                    return Err(shape_err(format!(
                        "concat_last: leading shapes of {:?} and {:?} differ",
                        av.shape(),
                        bv.shape()
                    )));
                }
                let (d1, d2) = (av.last_dim(), bv.last_dim());
                let rows = if d1 + d2 == 0 {
                    0
                } else {
                    av.shape()[..av.rank() - 1].iter().product()
                };
                let mut out = Vec::with_capacity(rows * (d1 + d2));
                for r in 0..rows {
                    out.extend_from_slice(&av.data()[r * d1..(r + 1) * d1]);
                    out.extend_from_slice(&bv.data()[r * d2..(r + 1) * d2]);
                }
                let mut shape = av.shape().to_vec();
                *shape.last_mut().unwrap() = d1 + d2;
                Tensor::new(shape, out)
            }
            Op::ConcatSeq(a, b) => {
                let (av, bv) = (v(a), v(b));
                if av.rank() != 3
                    || bv.rank() != 3
                    || av.shape()[0] != bv.shape()[0]
                    || av.shape()[2] != bv.shape()[2]
                {
                    return Err(shape_err(format!(
                        "concat_seq: incompatible {:?} and {:?}",
                        av.shape(),
                        bv.shape()
                    )));
                }
                let (bsz, n1, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n2 = bv.shape()[1];
                let mut out = Vec::with_capacity(bsz * (n1 + n2) * d);
                for i in 0..bsz {
                    out.extend_from_slice(&av.data()[i * n1 * d..(i + 1) * n1 * d]);
                    out.extend_from_slice(&bv.data()[i * n2 * d..(i + 1) * n2 * d]);
                }
                Tensor::new(vec![bsz, n1 + n2, d], out)
            }
            Op::SelectSeq { x, index } => {
                let xv = v(x);
                if xv.rank() != 3 {
                    return Err(shape_err(format!("select_seq expects rank 3, got {:?}", xv.shape())));
                }
                let (bsz, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                if let Some(bad) = index.iter().find(|&&i| i >= n) {
                    return Err(shape_err(format!("select_seq index {bad} out of range {n}")));
                }
                let m = index.len();
                let mut out = Vec::with_capacity(bsz * m * d);
                for b in 0..bsz {
                    for &i in index {
                        let off = (b * n + i) * d;
                        out.extend_from_slice(&xv.data()[off..off + d]);
                    }
                }
                Tensor::new(vec![bsz, m, d], out)
            }
            Op::Embedding { table, index, lead } => {
                let tv = v(table);
                if tv.rank() != 2 {
                    return Err(shape_err("embedding table must be rank 2"));
                }
                let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
                if lead.iter().product::<usize>() != index.len() {
                    return Err(shape_err("embedding: lead shape does not match index count"));
                }
                if let Some(bad) = index.iter().find(|&&i| i >= vocab) {
                    return Err(Error::InvalidArgument(format!(
                        "embedding index {bad} out of range for vocabulary {vocab}"
                    )));
                }
                let mut out = Vec::with_capacity(index.len() * d);
                for &i in index {
                    out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
                }
                let mut shape = lead.clone();
                shape.push(d);
                Tensor::new(shape, out)
            }
            Op::SplitHeads { x, heads } => {
                let xv = v(x);
                let h = *heads;
                if xv.rank() != 3 || h == 0 || xv.shape()[2] % h != 0 {
                    return Err(shape_err(format!(
                        "split_heads: {:?} not divisible into {h} heads",
                        xv.shape()
                    )));
                }
                let (b, l, dm) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let d = dm / h;
                let mut out = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for li in 0..l {
                        for hi in 0..h {
                            let src = (bi * l + li) * dm + hi * d;
                            let dst = ((bi * h + hi) * l + li) * d;
                            out[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
                        }
                    }
                }
                Tensor::new(vec![b * h, l, d], out)
            }
            Op::MergeHeads { x, heads } => {
                let xv = v(x);
                let h = *heads;
                if xv.rank() != 3 || h == 0 || xv.shape()[0] % h != 0 {
                    return Err(shape_err(format!(
                        "merge_heads: {:?} not divisible into {h} heads",
                        xv.shape()
                    )));
                }
                let (bh, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let b = bh / h;
                let dm = d * h;
                let mut out = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for li in 0..l {
                        for hi in 0..h {
                            let dst = (bi * l + li) * dm + hi * d;
                            let src = ((bi * h + hi) * l + li) * d;
                            out[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
                        }
                    }
                }
                Tensor::new(vec![b, l, dm], out)
            }
            Op::Reshape { x, shape } => v(x).clone().reshape(shape.clone()),
            Op::SumAll(x) => Ok(Tensor::scalar(v(x).data().iter().sum())),
            Op::MseMasked { pred, target, mask } => {
                let pv = v(pred);
                if pv.shape() != target.shape() {
                    return Err(shape_err(format!(
                        "mse: prediction {:?} vs target {:?}",
                        pv.shape(),
                        target.shape()
                    )));
                }
                let (rows, a) = rows_cols(pv.shape());
                if mask.len() != rows {
                    return Err(shape_err(format!("mse: mask has {} rows, expected {rows}", mask.len())));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(Error::InvalidMask("every loss position is masked".into()));
                }
                let mut total = 0.0;
                for r in (0..rows).filter(|&r| mask[r]) {
                    for j in 0..a {
                        let d = pv.data()[r * a + j] - target.data()[r * a + j];
                        total += d * d;
                    }
                }
                Ok(Tensor::scalar(total / (count * a) as f64))
            }
            Op::CrossEntropyMasked {
                logits,
                target,
                mask,
            } => {
                let lv = v(logits);
                let (rows, n) = rows_cols(lv.shape());
                if target.len() != rows || mask.len() != rows {
                    return Err(shape_err(format!(
                        "cross_entropy: {rows} rows but {} targets / {} mask entries",
                        target.len(),
                        mask.len()
                    )));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(Error::InvalidMask("every loss position is masked".into()));
                }
                let mut total = 0.0;
                for r in (0..rows).filter(|&r| mask[r]) {
                    let row = &lv.data()[r * n..(r + 1) * n];
                    let t = target[r];
                    if t >= n {
                        return Err(Error::InvalidArgument(format!(
                            "class {t} out of range for {n} logits"
                        )));
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    total += lse - row[t];
                }
                Ok(Tensor::scalar(total / count as f64))
            }
        }
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) back to every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match node.op {
                Op::Leaf => match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                },
                _ => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let val = |x: &Var| &nodes[x.0].value;
        let rg = |x: &Var| nodes[x.0].requires_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = rows_cols(av.shape());
                let n = bv.shape()[1];
                if rg(a) {
                    let ga = add_into(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, (n, 1), bv.data(), (1, n), ga, 1.0);
                }
                if rg(b) {
                    let gb = add_into(&mut grads[b.0], k * n);
                    gemm(k, m, n, av.data(), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (m, k) = rows_cols(xv.shape());
                let n = wv.shape()[0];
                if rg(x) {
                    let gx = add_into(&mut grads[x.0], m * k);
                    gemm(m, n, k, g, (n, 1), wv.data(), (k, 1), gx, 1.0);
                }
                if rg(w) {
                    let gw = add_into(&mut grads[w.0], n * k);
                    gemm(n, m, k, g, (1, n), xv.data(), (k, 1), gw, 1.0);
                }
                if let Some(b) = b.filter(|b| rg(b)) {
                    let gb = add_into(&mut grads[b.0], n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                if rg(a) {
                    let ga = add_into(&mut grads[a.0], nb * m * k);
                    // dA = dC · Bᵀ
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..nb {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n, 1),
                            &bv.data()[i * k * n..],
                            bs,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if rg(b) {
                    let gb = add_into(&mut grads[b.0], nb * k * n);
                    for i in 0..nb {
                        if *trans_b {
                            // dB[n×k] = dCᵀ · A
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * m * n..],
                                (1, n),
                                &av.data()[i * m * k..],
                                (k, 1),
                                &mut gb[i * k * n..(i + 1) * k * n],
                                1.0,
                            );
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..],
                                (1, k),
                                &g[i * m * n..],
                                (n, 1),
                                &mut gb[i * k * n..(i + 1) * k * n],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (al, bl) = (av.numel(), bv.numel());
                let n = g.len();
                let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(nodes[id].op, Op::Mul(..));
                if rg(a) {
                    let ga = add_into(&mut grads[a.0], al);
                    if is_mul {
                        for i in 0..n {
                            ga[i % al] += g[i] * bv.data()[i % bl];
                        }
                    } else {
                        for i in 0..n {
                            ga[i % al] += g[i];
                        }
                    }
                }
                if rg(b) {
                    let gb = add_into(&mut grads[b.0], bl);
                    if is_mul {
                        for i in 0..n {
                            gb[i % bl] += g[i] * av.data()[i % al];
                        }
                    } else {
                        for i in 0..n {
                            gb[i % bl] += sign * g[i];
                        }
                    }
                }
            }
            Op::AddScalar(x, _) => {
                let gx = add_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::MulScalar(x, c) => {
                let gx = add_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
            Op::Unary(x, kind) => {
                let xv = val(x);
                let gx = add_into(&mut grads[x.0], g.len());
                match kind {
                    Unary::Gelu => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                            *a += gi * kernels::gelu_grad(xi);
                        }
                    }
                    Unary::Silu => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                            *a += gi * kernels::silu_grad(xi);
                        }
                    }
                    Unary::Relu => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                            if xi > 0.0 {
                                *a += gi;
                            }
                        }
                    }
                    Unary::Tanh => {
                        for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(out.data()) {
                            *a += gi * (1.0 - yi * yi);
                        }
                    }
                }
            }
            Op::SoftmaxMasked { x, .. } => {
                let n = out.last_dim();
                let gx = add_into(&mut grads[x.0], g.len());
                for ((gxr, gr), yr) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.data().chunks_exact(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let xv = val(x);
                let d = out.last_dim();
                let gx = add_into(&mut grads[x.0], g.len());
                for ((gxr, gr), (yr, xr)) in gx
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(out.data().chunks_exact(d).zip(xv.data().chunks_exact(d)))
                {
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += rstd * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let (d1, d2) = (val(a).last_dim(), val(b).last_dim());
                let rows = if d1 + d2 == 0 { 0 } else { g.len() / (d1 + d2) };
                if rg(a) {
                    let ga = add_into(&mut grads[a.0], rows * d1);
                    for r in 0..rows {
                        let src = &g[r * (d1 + d2)..r * (d1 + d2) + d1];
                        ga[r * d1..(r + 1) * d1]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, s)| *o += s);
                    }
                }
                if rg(b) {
                    let gb = add_into(&mut grads[b.0], rows * d2);
                    for r in 0..rows {
                        let src = &g[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)];
                        gb[r * d2..(r + 1) * d2]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, s)| *o += s);
                    }
                }
            }
            Op::ConcatSeq(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (bsz, n1, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n2 = bv.shape()[1];
                let stride = (n1 + n2) * d;
                if rg(a) {
                    let ga = add_into(&mut grads[a.0], bsz * n1 * d);
                    for i in 0..bsz {
                        ga[i * n1 * d..(i + 1) * n1 * d]
                            .iter_mut()
                            .zip(&g[i * stride..i * stride + n1 * d])
                            .for_each(|(o, s)| *o += s);
                    }
                }
                if rg(b) {
                    let gb = add_into(&mut grads[b.0], bsz * n2 * d);
                    for i in 0..bsz {
                        gb[i * n2 * d..(i + 1) * n2 * d]
                            .iter_mut()
                            .zip(&g[i * stride + n1 * d..(i + 1) * stride])
                            .for_each(|(o, s)| *o += s);
                    }
                }
            }
            Op::SelectSeq { x, index } => {
                let xv = val(x);
                let (bsz, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let m = index.len();
                let gx = add_into(&mut grads[x.0], bsz * n * d);
                for b in 0..bsz {
                    for (j, &i) in index.iter().enumerate() {
                        let src = (b * m + j) * d;
                        let dst = (b * n + i) * d;
                        gx[dst..dst + d]
                            .iter_mut()
                            .zip(&g[src..src + d])
                            .for_each(|(o, s)| *o += s);
                    }
                }
            }
            Op::Embedding { table, index, .. } => {
                let tv = val(table);
                let d = tv.shape()[1];
                let gt = add_into(&mut grads[table.0], tv.numel());
                for (j, &i) in index.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[j * d..(j + 1) * d])
                        .for_each(|(o, s)| *o += s);
                }
            }
            Op::SplitHeads { x, heads } => {
                let xv = val(x);
                let h = *heads;
                let (b, l, dm) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let d = dm / h;
                let gx = add_into(&mut grads[x.0], xv.numel());
                for bi in 0..b {
                    for li in 0..l {
                        for hi in 0..h {
                            let dst = (bi * l + li) * dm + hi * d;
                            let src = ((bi * h + hi) * l + li) * d;
                            gx[dst..dst + d]
                                .iter_mut()
                                .zip(&g[src..src + d])
                                .for_each(|(o, s)| *o += s);
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let xv = val(x);
                let h = *heads;
                let (bh, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let b = bh / h;
                let dm = d * h;
                let gx = add_into(&mut grads[x.0], xv.numel());
                for bi in 0..b {
                    for li in 0..l {
                        for hi in 0..h {
                            let src = (bi * l + li) * dm + hi * d;
                            let dst = ((bi * h + hi) * l + li) * d;
                            gx[dst..dst + d]
                                .iter_mut()
                                .zip(&g[src..src + d])
                                .for_each(|(o, s)| *o += s);
                        }
                    }
                }
            }
            Op::Reshape { x, .. } => {
                let gx = add_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(o, s)| *o += s);
            }
            Op::SumAll(x) => {
                let n = val(x).numel();
                let gx = add_into(&mut grads[x.0], n);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::MseMasked { pred, target, mask } => {
                let pv = val(pred);
                let (rows, a) = rows_cols(pv.shape());
                let count = mask.iter().filter(|&&m| m).count();
                let scale = 2.0 * g[0] / (count * a) as f64;
                let gp = add_into(&mut grads[pred.0], pv.numel());
                for r in (0..rows).filter(|&r| mask[r]) {
                    for j in 0..a {
                        let i = r * a + j;
                        gp[i] += scale * (pv.data()[i] - target.data()[i]);
                    }
                }
            }
            Op::CrossEntropyMasked {
                logits,
                target,
                mask,
            } => {
                let lv = val(logits);
                let (rows, n) = rows_cols(lv.shape());
                let count = mask.iter().filter(|&&m| m).count();
                let scale = g[0] / count as f64;
                let gl = add_into(&mut grads[logits.0], lv.numel());
                for r in (0..rows).filter(|&r| mask[r]) {
                    let row = &lv.data()[r * n..(r + 1) * n];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - max).exp() / sum;
                        let onehot = if j == target[r] { 1.0 } else { 0.0 };
                        gl[r * n + j] += scale * (p - onehot);
                    }
                }
            }
        }
    }
}

impl Mask {
    fn rank_ok(&self, n: usize) -> bool {
        self.shape().last().copied() == Some(n)
    }
}
