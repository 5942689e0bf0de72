use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rand::Rng;

use super::{Scalar, Tensor, LN_EPS, NEG_INF};

/// Index of a learned parameter in the model's registry. Used to route
/// gradients from tape leaves back to the optimizer's dense buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-node gradient. Tables touched only through row gathers accumulate
/// sparsely; anything else is dense. Mixed use promotes to dense.
#[derive(Debug, Default)]
enum Grad {
    #[default]
    None,
    Dense(Vec<Scalar>),
    Rows {
        cols: usize,
        indices: Vec<u32>,
        data: Vec<Scalar>,
    },
}

impl Grad {
    fn add_dense(&mut self, g: &[Scalar], rows: usize, cols: usize) {
        match self {
            Grad::None => {
                *self = Grad::Dense(g.to_vec());
            }
            Grad::Dense(d) => {
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Grad::Rows { .. } => {
                let mut dense = self.to_dense(rows, cols);
                for (a, b) in dense.iter_mut().zip(g) {
                    *a += b;
                }
                *self = Grad::Dense(dense);
            }
        }
    }

    fn add_row(&mut self, cols: usize, row: u32, piece: &[Scalar]) {
        match self {
            Grad::None => {
                *self = Grad::Rows {
                    cols,
                    indices: vec![row],
                    data: piece.to_vec(),
                };
            }
            Grad::Rows {
                indices,
                data,
                cols: c,
            } => {
                debug_assert_eq!(*c, cols);
                indices.push(row);
                data.extend_from_slice(piece);
            }
            Grad::Dense(d) => {
                let start = row as usize * cols;
                for (a, b) in d[start..start + cols].iter_mut().zip(piece) {
                    *a += b;
                }
            }
        }
    }

    fn to_dense(&self, rows: usize, cols: usize) -> Vec<Scalar> {
        match self {
            Grad::None => vec![0.0; rows * cols],
            Grad::Dense(d) => d.clone(),
            Grad::Rows {
                cols: c,
                indices,
                data,
            } => {
                let mut out = vec![0.0; rows * cols];
                for (slot, &row) in indices.iter().enumerate() {
                    let src = &data[slot * c..(slot + 1) * c];
                    let dst = &mut out[row as usize * c..row as usize * c + c];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Gather { x: usize, indices: Arc<Vec<u32>> },
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, Scalar),
    ConcatCols(Arc<Vec<usize>>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    // the mask is not saved: masked outputs are exactly zero, which already
    // zeroes their gradient through the softmax jacobian
    SoftmaxMaskRows { x: usize },
    // fused scaled dot-product attention over head-blocked columns; saves
    // the per-head softmax weights for the backward pass
    MultiHeadAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: Scalar,
        weights: Arc<Vec<Scalar>>,
    },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Arc<Vec<Scalar>>, inv_std: Arc<Vec<Scalar>> },
    Relu(usize),
    PRelu { x: usize, slope: usize },
    Softplus(usize),
    Dropout { x: usize, mask: Arc<Vec<Scalar>> },
    SumAll(usize),
    MeanAll(usize),
    Log(usize),
    Exp(usize),
    LogSumExpRow(usize),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Arc<Vec<Scalar>>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Grad,
}

/// Records a forward computation; nodes are stored in topological order by
/// construction, so a single reverse sweep computes all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    swept: Cell<bool>,
}

fn assert_finite(op: &str, data: &[Scalar]) {
    if !data.iter().all(|x| x.is_finite()) {
        panic!("{op} produced a non-finite value");
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(
        &self,
        rows: usize,
        cols: usize,
        value: Vec<Scalar>,
        op: Op,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value: Arc::new(value),
            op,
            requires_grad,
            param,
            grad: Grad::None,
        });
        Var(nodes.len() - 1)
    }

    fn push_shared(
        &self,
        rows: usize,
        cols: usize,
        value: Arc<Vec<Scalar>>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            op: Op::Leaf,
            requires_grad,
            param,
            grad: Grad::None,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> (Arc<Vec<Scalar>>, usize, usize) {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        (Arc::clone(&n.value), n.rows, n.cols)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push_shared(t.rows(), t.cols(), t.shared(), false, None)
    }

    /// A differentiable leaf (reachable through [`Tape::grad_of`]).
    pub fn input(&self, t: &Tensor) -> Var {
        self.push_shared(t.rows(), t.cols(), t.shared(), true, None)
    }

    /// A differentiable leaf routed to the parameter registry by id.
    pub fn param(&self, pid: ParamId, t: &Tensor) -> Var {
        self.push_shared(t.rows(), t.cols(), t.shared(), true, Some(pid))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let (data, rows, cols) = self.val(v);
        Tensor::from_shared(rows, cols, data)
    }

    pub fn value_scalar(&self, v: Var) -> Scalar {
        let (data, rows, cols) = self.val(v);
        assert!(
            rows == 1 && cols == 1,
            "value_scalar on a {rows}x{cols} tensor"
        );
        data[0]
    }

    /// Gather rows of `table`. The backward pass accumulates sparsely into
    /// the table's gradient, so large embedding tables stay cheap.
    pub fn gather_rows(&self, table: Var, indices: &[u32]) -> Var {
        let (tv, trows, tcols) = self.val(table);
        let mut out = Vec::with_capacity(indices.len() * tcols);
        for &r in indices {
            let r = r as usize;
            assert!(
                r < trows,
                "gather_rows: row {r} out of range for {trows}x{tcols}"
            );
            out.extend_from_slice(&tv[r * tcols..(r + 1) * tcols]);
        }
        assert_finite("gather_rows", &out);
        let req = self.requires(table);
        self.push(
            indices.len(),
            tcols,
            out,
            Op::Gather {
                x: table.0,
                indices: Arc::new(indices.to_vec()),
            },
            req,
            None,
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, m, ka) = self.val(a);
        let (bv, kb, n) = self.val(b);
        if ka != kb {
            panic!("matmul: incompatible shapes {m}x{ka} and {kb}x{n}");
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&av, &bv, m, ka, n, &mut out);
        assert_finite("matmul", &out);
        let req = self.requires(a) || self.requires(b);
        self.push(m, n, out, Op::Matmul(a.0, b.0), req, None)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let (av, m, n) = self.val(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push(n, m, out, Op::Transpose(a.0), req, None)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, m, n) = self.val(a);
        let (bv, mb, nb) = self.val(b);
        if (m, n) != (mb, nb) {
            panic!("add: incompatible shapes {m}x{n} and {mb}x{nb}");
        }
        let out: Vec<Scalar> = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
        assert_finite("add", &out);
        let req = self.requires(a) || self.requires(b);
        self.push(m, n, out, Op::Add(a.0, b.0), req, None)
    }

    /// Add a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let (av, m, n) = self.val(a);
        let (bv, mb, nb) = self.val(b);
        if mb != 1 || nb != n {
            panic!("add_row: incompatible shapes {m}x{n} and {mb}x{nb}");
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        assert_finite("add_row", &out);
        let req = self.requires(a) || self.requires(b);
        self.push(m, n, out, Op::AddRow(a.0, b.0), req, None)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, m, n) = self.val(a);
        let (bv, mb, nb) = self.val(b);
        if (m, n) != (mb, nb) {
            panic!("elementwise_mul: incompatible shapes {m}x{n} and {mb}x{nb}");
        }
        let out: Vec<Scalar> = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        assert_finite("elementwise_mul", &out);
        let req = self.requires(a) || self.requires(b);
        self.push(m, n, out, Op::Mul(a.0, b.0), req, None)
    }

    pub fn scale(&self, a: Var, c: Scalar) -> Var {
        let (av, m, n) = self.val(a);
        let out: Vec<Scalar> = av.iter().map(|x| x * c).collect();
        assert_finite("scale", &out);
        let req = self.requires(a);
        self.push(m, n, out, Op::Scale(a.0, c), req, None)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let shapes: Vec<(Arc<Vec<Scalar>>, usize, usize)> =
            parts.iter().map(|&p| self.val(p)).collect();
        let m = shapes[0].1;
        for (_, r, c) in &shapes {
            if *r != m {
                panic!(
                    "concat_cols: incompatible shapes {m}x{} and {r}x{c}",
                    shapes[0].2
                );
            }
        }
        let total: usize = shapes.iter().map(|(_, _, c)| c).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (v, _, c) in &shapes {
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            m,
            total,
            out,
            Op::ConcatCols(Arc::new(parts.iter().map(|p| p.0).collect())),
            req,
            None,
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let (av, m, n) = self.val(a);
        assert!(
            start + len <= n,
            "slice_cols: [{start}, {}) out of range for {m}x{n}",
            start + len
        );
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let req = self.requires(a);
        self.push(m, len, out, Op::SliceCols { x: a.0, start }, req, None)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let (av, m, n) = self.val(a);
        assert!(
            start + len <= m,
            "slice_rows: [{start}, {}) out of range for {m}x{n}",
            start + len
        );
        let out = av[start * n..(start + len) * n].to_vec();
        let req = self.requires(a);
        self.push(len, n, out, Op::SliceRows { x: a.0, start }, req, None)
    }

    /// Row softmax with an optional additive mask of 0 / [`NEG_INF`]
    /// entries. Masked positions get exactly zero probability; a fully
    /// masked row outputs all zeros.
    pub fn softmax_rows_masked(&self, x: Var, mask: Option<Arc<Vec<Scalar>>>) -> Var {
        let (xv, m, n) = self.val(x);
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                panic!(
                    "row_softmax_with_mask: incompatible shapes {m}x{n} and mask of {} entries",
                    mk.len()
                );
            }
        }
        let masked_at = |i: usize, j: usize| -> bool {
            mask.as_ref().is_some_and(|mk| mk[i * n + j] <= NEG_INF)
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let mut mx = Scalar::NEG_INFINITY;
            for j in 0..n {
                if !masked_at(i, j) {
                    mx = mx.max(xv[i * n + j]);
                }
            }
            if mx == Scalar::NEG_INFINITY {
                continue; // fully masked row stays all zero
            }
            let mut sum = 0.0;
            for j in 0..n {
                if !masked_at(i, j) {
                    let e = (xv[i * n + j] - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        assert_finite("row_softmax_with_mask", &out);
        let req = self.requires(x);
        self.push(m, n, out, Op::SoftmaxMaskRows { x: x.0 }, req, None)
    }

    /// Fused multi-head scaled dot-product attention. `q` is `mq×(H·w)`,
    /// `k` and `v` are `mk×(H·w)`, columns blocked by head. Per head:
    /// `softmax(scale · qₕ kₕᵀ + mask) vₕ`, with the same hard-mask
    /// semantics as [`Tape::softmax_rows_masked`] (`mask` is `mq×mk`,
    /// shared across heads). Output is `mq×(H·w)`.
    pub fn multi_head_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: Scalar,
        mask: Option<Arc<Vec<Scalar>>>,
    ) -> Var {
        let (qv, mq, qc) = self.val(q);
        let (kv, mk, kc) = self.val(k);
        let (vv, mv, vc) = self.val(v);
        if qc != kc || kc != vc || mk != mv {
            panic!(
                "multi_head_attention: incompatible shapes {mq}x{qc}, {mk}x{kc}, {mv}x{vc}"
            );
        }
        assert!(heads > 0 && qc % heads == 0, "column count {qc} not blocked by {heads} heads");
        if let Some(m) = &mask {
            assert_eq!(m.len(), mq * mk, "attention mask must be {mq}x{mk}");
        }
        let w = qc / heads;
        let mut out = vec![0.0; mq * qc];
        // weights laid out [i][h][j] so one query row's softmaxes are contiguous
        let mut weights = vec![0.0; mq * heads * mk];
        for i in 0..mq {
            let wmat = &mut weights[i * heads * mk..(i + 1) * heads * mk];
            for h in 0..heads {
                let off = h * w;
                let qrow = &qv[i * qc + off..i * qc + off + w];
                let row = &mut wmat[h * mk..(h + 1) * mk];
                let mut mx = Scalar::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    let masked = mask.as_ref().is_some_and(|m| m[i * mk + j] <= NEG_INF);
                    if masked {
                        *slot = Scalar::NEG_INFINITY;
                    } else {
                        let krow = &kv[j * kc + off..j * kc + off + w];
                        let dot: Scalar = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *slot = dot * scale;
                        mx = mx.max(*slot);
                    }
                }
                if mx == Scalar::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue; // fully masked row: zero weights, zero output
                }
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    if *x == Scalar::NEG_INFINITY {
                        *x = 0.0;
                    } else {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                }
                let orow = &mut out[i * qc + off..i * qc + off + w];
                for (j, x) in row.iter_mut().enumerate() {
                    *x /= sum;
                    if *x != 0.0 {
                        let vrow = &vv[j * vc + off..j * vc + off + w];
                        for (o, &y) in orow.iter_mut().zip(vrow) {
                            *o += *x * y;
                        }
                    }
                }
            }
        }
        assert_finite("multi_head_attention", &out);
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            mq,
            qc,
            out,
            Op::MultiHeadAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                scale,
                weights: Arc::new(weights),
            },
            req,
            None,
        )
    }

    /// Row-wise layer normalization with learned gain and bias (`1×n`).
    /// A zero-variance row normalizes to zeros before gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, m, n) = self.val(x);
        let (gv, gr, gc) = self.val(gain);
        let (bv, br, bc) = self.val(bias);
        if gr != 1 || gc != n || br != 1 || bc != n {
            panic!("layer_norm: incompatible shapes {m}x{n}, gain {gr}x{gc}, bias {br}x{bc}");
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu: Scalar = row.iter().sum::<Scalar>() / n as Scalar;
            let var: Scalar =
                row.iter().map(|&v| (v - mu) * (v - mu)).sum::<Scalar>() / n as Scalar;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = gv[j] * xh + bv[j];
            }
        }
        assert_finite("layer_norm", &out);
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
            req,
            None,
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let (av, m, n) = self.val(a);
        let out: Vec<Scalar> = av.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let req = self.requires(a);
        self.push(m, n, out, Op::Relu(a.0), req, None)
    }

    /// Parametric ReLU with a learned `1×1` negative-side slope.
    pub fn prelu(&self, a: Var, slope: Var) -> Var {
        let (av, m, n) = self.val(a);
        let (sv, sr, sc) = self.val(slope);
        if sr != 1 || sc != 1 {
            panic!("prelu: slope must be 1x1, found {sr}x{sc}");
        }
        let s = sv[0];
        let out: Vec<Scalar> = av.iter().map(|&x| if x > 0.0 { x } else { s * x }).collect();
        assert_finite("prelu", &out);
        let req = self.requires(a) || self.requires(slope);
        self.push(m, n, out, Op::PRelu { x: a.0, slope: slope.0 }, req, None)
    }

    pub fn softplus(&self, a: Var) -> Var {
        let (av, m, n) = self.val(a);
        let out: Vec<Scalar> = av
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        assert_finite("softplus", &out);
        let req = self.requires(a);
        self.push(m, n, out, Op::Softplus(a.0), req, None)
    }

    /// Inverted dropout: keeps entries with probability `1 - p`, scaling
    /// kept entries by `1/(1-p)` so the expectation matches the input.
    pub fn dropout(&self, a: Var, p: Scalar, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout: p={p} outside [0,1)");
        let (av, m, n) = self.val(a);
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let mask: Vec<Scalar> = (0..m * n)
            .map(|_| {
                if rng.random::<Scalar>() < keep {
                    inv
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<Scalar> = av.iter().zip(&mask).map(|(x, k)| x * k).collect();
        let req = self.requires(a);
        self.push(
            m,
            n,
            out,
            Op::Dropout {
                x: a.0,
                mask: Arc::new(mask),
            },
            req,
            None,
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let (av, _, _) = self.val(a);
        let s: Scalar = av.iter().sum();
        assert_finite("sum", &[s]);
        let req = self.requires(a);
        self.push(1, 1, vec![s], Op::SumAll(a.0), req, None)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (av, _, _) = self.val(a);
        let s: Scalar = av.iter().sum::<Scalar>() / av.len() as Scalar;
        assert_finite("mean", &[s]);
        let req = self.requires(a);
        self.push(1, 1, vec![s], Op::MeanAll(a.0), req, None)
    }

    pub fn log(&self, a: Var) -> Var {
        let (av, m, n) = self.val(a);
        let out: Vec<Scalar> = av.iter().map(|&x| x.ln()).collect();
        assert_finite("log", &out);
        let req = self.requires(a);
        self.push(m, n, out, Op::Log(a.0), req, None)
    }

    pub fn exp(&self, a: Var) -> Var {
        let (av, m, n) = self.val(a);
        let out: Vec<Scalar> = av.iter().map(|&x| x.exp()).collect();
        assert_finite("exp", &out);
        let req = self.requires(a);
        self.push(m, n, out, Op::Exp(a.0), req, None)
    }

    /// Per-row log-sum-exp with max-shift stabilization: `m×n -> m×1`.
    pub fn logsumexp_row(&self, a: Var) -> Var {
        let (av, m, n) = self.val(a);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let s: Scalar = row.iter().map(|&x| (x - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        assert_finite("logsumexp", &out);
        let req = self.requires(a);
        self.push(m, 1, out, Op::LogSumExpRow(a.0), req, None)
    }

    /// Reverse sweep seeding `∂out/∂out = 1`. `out` must be scalar.
    pub fn backward(&self, out: Var) {
        let (_, r, c) = self.val(out);
        assert!(r == 1 && c == 1, "backward requires a scalar, got {r}x{c}");
        self.backward_seeded(out, &[1.0]);
    }

    /// Reverse sweep from `out` with an explicit cotangent of the same
    /// shape. Panics if the tape was already swept.
    pub fn backward_seeded(&self, out: Var, seed: &[Scalar]) {
        if self.swept.replace(true) {
            panic!("backward called twice on the same tape");
        }
        let mut nodes = self.nodes.borrow_mut();
        {
            let n = &mut nodes[out.0];
            assert_eq!(
                seed.len(),
                n.rows * n.cols,
                "backward seed length {} does not match output shape {}x{}",
                seed.len(),
                n.rows,
                n.cols
            );
            if !n.requires_grad {
                return;
            }
            n.grad.add_dense(seed, n.rows, n.cols);
        }
        for idx in (0..=out.0).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            if matches!(nodes[idx].op, Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            }
            let grad = std::mem::take(&mut nodes[idx].grad);
            let g = match grad {
                Grad::None => continue,
                g => g.to_dense(nodes[idx].rows, nodes[idx].cols),
            };
            let op = nodes[idx].op.clone();
            let (rows, cols) = (nodes[idx].rows, nodes[idx].cols);
            let out_val = Arc::clone(&nodes[idx].value);
            backprop(&mut nodes, idx, op, &g, rows, cols, &out_val);
        }
    }

    /// Gradient of a leaf after the backward sweep.
    pub fn grad_of(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        match &n.grad {
            Grad::None => None,
            g => Some(Tensor::new(n.rows, n.cols, g.to_dense(n.rows, n.cols))),
        }
    }

    /// Add every parameter leaf's gradient into the dense accumulator.
    pub fn export_param_grads(&self, acc: &mut DenseGrads) {
        let nodes = self.nodes.borrow();
        for n in nodes.iter() {
            let Some(pid) = n.param else { continue };
            match &n.grad {
                Grad::None => {}
                Grad::Dense(d) => {
                    let buf = acc.buf_mut(pid);
                    for (a, b) in buf.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                Grad::Rows {
                    cols,
                    indices,
                    data,
                } => {
                    let buf = acc.buf_mut(pid);
                    for (slot, &row) in indices.iter().enumerate() {
                        let src = &data[slot * cols..(slot + 1) * cols];
                        let dst = &mut buf[row as usize * cols..row as usize * cols + cols];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(nodes: &mut [Node], target: usize, g: &[Scalar]) {
    let n = &mut nodes[target];
    if !n.requires_grad {
        return;
    }
    let (r, c) = (n.rows, n.cols);
    n.grad.add_dense(g, r, c);
}

#[allow(clippy::too_many_arguments)]
fn backprop(
    nodes: &mut Vec<Node>,
    _idx: usize,
    op: Op,
    g: &[Scalar],
    rows: usize,
    cols: usize,
    out_val: &Arc<Vec<Scalar>>,
) {
    match op {
        Op::Leaf => {}
        Op::Gather { x, indices } => {
            if nodes[x].requires_grad {
                let tcols = nodes[x].cols;
                for (slot, &row) in indices.iter().enumerate() {
                    let piece = &g[slot * tcols..(slot + 1) * tcols];
                    nodes[x].grad.add_row(tcols, row, piece);
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, n) = (rows, cols);
            let k = nodes[a].cols;
            if nodes[a].requires_grad {
                let bv = Arc::clone(&nodes[b].value);
                let mut da = vec![0.0; m * k];
                matmul_abt_into(g, &bv, m, n, k, &mut da);
                add_into(nodes, a, &da);
            }
            if nodes[b].requires_grad {
                let av = Arc::clone(&nodes[a].value);
                let mut db = vec![0.0; k * n];
                matmul_atb_into(&av, g, m, k, n, &mut db);
                add_into(nodes, b, &db);
            }
        }
        Op::Transpose(a) => {
            // output is n x m of input m x n
            let (n, m) = (rows, cols);
            let mut da = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = g[i * m + j];
                }
            }
            add_into(nodes, a, &da);
        }
        Op::Add(a, b) => {
            add_into(nodes, a, g);
            add_into(nodes, b, g);
        }
        Op::AddRow(a, b) => {
            add_into(nodes, a, g);
            if nodes[b].requires_grad {
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j];
                    }
                }
                add_into(nodes, b, &db);
            }
        }
        Op::Mul(a, b) => {
            if nodes[a].requires_grad {
                let bv = Arc::clone(&nodes[b].value);
                let da: Vec<Scalar> = g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
                add_into(nodes, a, &da);
            }
            if nodes[b].requires_grad {
                let av = Arc::clone(&nodes[a].value);
                let db: Vec<Scalar> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                add_into(nodes, b, &db);
            }
        }
        Op::Scale(a, c) => {
            let da: Vec<Scalar> = g.iter().map(|x| x * c).collect();
            add_into(nodes, a, &da);
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts.iter() {
                let pc = nodes[p].cols;
                if nodes[p].requires_grad {
                    let m = nodes[p].rows;
                    let mut dp = Vec::with_capacity(m * pc);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * cols + start..i * cols + start + pc]);
                    }
                    add_into(nodes, p, &dp);
                }
                start += pc;
            }
        }
        Op::SliceCols { x, start } => {
            if nodes[x].requires_grad {
                let (m, n) = (nodes[x].rows, nodes[x].cols);
                let mut dx = vec![0.0; m * n];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * n + start + j] = g[i * cols + j];
                    }
                }
                add_into(nodes, x, &dx);
            }
        }
        Op::SliceRows { x, start } => {
            if nodes[x].requires_grad {
                let (m, n) = (nodes[x].rows, nodes[x].cols);
                let mut dx = vec![0.0; m * n];
                dx[start * n..start * n + rows * n].copy_from_slice(g);
                add_into(nodes, x, &dx);
            }
        }
        Op::MultiHeadAttention {
            q,
            k,
            v,
            heads,
            scale,
            weights,
        } => {
            let (mq, qc) = (rows, cols);
            let mk = nodes[k].rows;
            let w = qc / heads;
            let qv = Arc::clone(&nodes[q].value);
            let kv = Arc::clone(&nodes[k].value);
            let vv = Arc::clone(&nodes[v].value);
            let mut dq = vec![0.0; mq * qc];
            let mut dk = vec![0.0; mk * qc];
            let mut dv = vec![0.0; mk * qc];
            let mut dattn = vec![0.0; mk];
            for i in 0..mq {
                let wmat = &weights[i * heads * mk..(i + 1) * heads * mk];
                for h in 0..heads {
                    let off = h * w;
                    let grow = &g[i * qc + off..i * qc + off + w];
                    let wrow = &wmat[h * mk..(h + 1) * mk];
                    // dattn[j] = gᵢ·vⱼ ; dv_j += attn_ij·gᵢ ; dot for jacobian
                    let mut dot_wd = 0.0;
                    for j in 0..mk {
                        if wrow[j] == 0.0 {
                            dattn[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv[j * qc + off..j * qc + off + w];
                        let d: Scalar = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dattn[j] = d;
                        dot_wd += d * wrow[j];
                        let dvrow = &mut dv[j * qc + off..j * qc + off + w];
                        for (o, &x) in dvrow.iter_mut().zip(grow) {
                            *o += wrow[j] * x;
                        }
                    }
                    // softmax jacobian then score gradients
                    for j in 0..mk {
                        if wrow[j] == 0.0 {
                            continue;
                        }
                        let ds = wrow[j] * (dattn[j] - dot_wd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kv[j * qc + off..j * qc + off + w];
                        let qrow = &qv[i * qc + off..i * qc + off + w];
                        let dqrow = &mut dq[i * qc + off..i * qc + off + w];
                        for (o, &x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[j * qc + off..j * qc + off + w];
                        for (o, &x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
            add_into(nodes, q, &dq);
            add_into(nodes, k, &dk);
            add_into(nodes, v, &dv);
        }
        Op::SoftmaxMaskRows { x } => {
            if nodes[x].requires_grad {
                let y = out_val;
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(nodes, x, &dx);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = cols as Scalar;
            if nodes[gain].requires_grad {
                let mut dg = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dg[j] += g[i * cols + j] * xhat[i * cols + j];
                    }
                }
                add_into(nodes, gain, &dg);
            }
            if nodes[bias].requires_grad {
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j];
                    }
                }
                add_into(nodes, bias, &db);
            }
            if nodes[x].requires_grad {
                let gv = Arc::clone(&nodes[gain].value);
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let xh = &xhat[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..cols {
                        let dxh = gr[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    for j in 0..cols {
                        let dxh = gr[j] * gv[j];
                        dx[i * cols + j] = (dxh - mean_dxh - xh[j] * mean_dxh_xh) * inv_std[i];
                    }
                }
                add_into(nodes, x, &dx);
            }
        }
        Op::Relu(a) => {
            if nodes[a].requires_grad {
                let xv = Arc::clone(&nodes[a].value);
                let da: Vec<Scalar> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                add_into(nodes, a, &da);
            }
        }
        Op::PRelu { x, slope } => {
            let xv = Arc::clone(&nodes[x].value);
            let s = nodes[slope].value[0];
            if nodes[x].requires_grad {
                let dx: Vec<Scalar> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { gi * s })
                    .collect();
                add_into(nodes, x, &dx);
            }
            if nodes[slope].requires_grad {
                let ds: Scalar = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gi, &v)| if v > 0.0 { 0.0 } else { gi * v })
                    .sum();
                add_into(nodes, slope, &[ds]);
            }
        }
        Op::Softplus(a) => {
            if nodes[a].requires_grad {
                let xv = Arc::clone(&nodes[a].value);
                let da: Vec<Scalar> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gi, &x)| {
                        let sig = if x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        };
                        gi * sig
                    })
                    .collect();
                add_into(nodes, a, &da);
            }
        }
        Op::Dropout { x, mask } => {
            if nodes[x].requires_grad {
                let dx: Vec<Scalar> = g.iter().zip(mask.iter()).map(|(a, b)| a * b).collect();
                add_into(nodes, x, &dx);
            }
        }
        Op::SumAll(a) => {
            if nodes[a].requires_grad {
                let len = nodes[a].rows * nodes[a].cols;
                let da = vec![g[0]; len];
                add_into(nodes, a, &da);
            }
        }
        Op::MeanAll(a) => {
            if nodes[a].requires_grad {
                let len = nodes[a].rows * nodes[a].cols;
                let da = vec![g[0] / len as Scalar; len];
                add_into(nodes, a, &da);
            }
        }
        Op::Log(a) => {
            if nodes[a].requires_grad {
                let xv = Arc::clone(&nodes[a].value);
                let da: Vec<Scalar> = g.iter().zip(xv.iter()).map(|(gi, &x)| gi / x).collect();
                add_into(nodes, a, &da);
            }
        }
        Op::Exp(a) => {
            if nodes[a].requires_grad {
                let da: Vec<Scalar> = g.iter().zip(out_val.iter()).map(|(gi, &y)| gi * y).collect();
                add_into(nodes, a, &da);
            }
        }
        Op::LogSumExpRow(a) => {
            if nodes[a].requires_grad {
                let xv = Arc::clone(&nodes[a].value);
                let n = nodes[a].cols;
                let mut da = vec![0.0; nodes[a].rows * n];
                for i in 0..rows {
                    let lse = out_val[i];
                    for j in 0..n {
                        da[i * n + j] = g[i] * (xv[i * n + j] - lse).exp();
                    }
                }
                add_into(nodes, a, &da);
            }
        }
    }
}

/// `out += a · b` for row-major `m×k`, `k×n`.
fn matmul_into(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize, out: &mut [Scalar]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for row-major `m×n`, `k×n` giving `m×k`.
fn matmul_abt_into(a: &[Scalar], b: &[Scalar], m: usize, n: usize, k: usize, out: &mut [Scalar]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let dot: Scalar = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + l] += dot;
        }
    }
}

/// `out += aᵀ · b` for row-major `m×k`, `m×n` giving `k×n`.
fn matmul_atb_into(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize, out: &mut [Scalar]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dense per-parameter gradient accumulators, aligned with the parameter
/// registry.
#[derive(Debug, Clone, Default)]
pub struct DenseGrads {
    bufs: Vec<Vec<Scalar>>,
}

impl DenseGrads {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            bufs: shapes.iter().map(|&(r, c)| vec![0.0; r * c]).collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn zero_fill(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn buf(&self, pid: ParamId) -> &[Scalar] {
        &self.bufs[pid.0]
    }

    pub fn buf_mut(&mut self, pid: ParamId) -> &mut [Scalar] {
        &mut self.bufs[pid.0]
    }

    pub fn global_norm(&self) -> Scalar {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<Scalar>()
            .sqrt()
    }

    pub fn scale(&mut self, c: Scalar) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x *= c);
        }
    }
}
