//! Reverse-mode tape: append ops forward, walk once backward.
//!
//! Node indices are topological by construction, so the backward pass is a
//! single reverse sweep visiting each edge exactly once. Backward uses fresh
//! propagation buffers and then adds them into each node's persistent grad,
//! so repeated `backward` calls accumulate (a second call doubles every
//! gradient) and nothing is implicitly zeroed.

use super::{kernels, special, Tensor, TensorError};

/// exp() clamps its input to this symmetric window; outside it the value
/// saturates and the gradient is zero.
pub const EXP_CLAMP: f64 = 15.0;

// Keeps pairwise distances differentiable when two rows coincide.
const TRIPLET_DIST_EPS: f64 = 1e-12;

/// Handle to a node on one specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

// Elementwise ops align a rank-2 tensor with a mate broadcast along the
// leading (row) axis: bare `[n]` and `[1, n]` repeat per row, `[r, 1]` per
// column. `Lhs*`/`Rhs*` say which side is the small one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    RhsRow,
    RhsCol,
    LhsRow,
    LhsCol,
}

#[derive(Debug, Clone, Copy)]
struct TripletPick {
    pos: u32,
    neg: u32,
    active: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    MatmulBt {
        a: Var,
        b: Var,
    },
    Bin {
        kind: BinKind,
        a: Var,
        b: Var,
        bc: Bcast,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        c: f64,
    },
    Relu {
        a: Var,
    },
    ClampedExp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Sqrt {
        a: Var,
    },
    Lgamma {
        a: Var,
    },
    Digamma {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: u8,
    },
    MeanAxis {
        a: Var,
        axis: u8,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    L2NormRows {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    SoftmaxCeRows {
        logits: Var,
        onehot: Var,
    },
    BatchHardTriplet {
        feats: Var,
        picks: Vec<Option<TripletPick>>,
        valid: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Growing record of one forward computation. Confined to one thread; run
/// independent tapes for concurrent work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Value of a node. Panics if `v` came from a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node; `None` before any backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<Var, TensorError> {
        t.check_finite("leaf")?;
        Ok(self.push(t, Op::Leaf))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(&self, op: &'static str, v: Var) -> Result<&Tensor, TensorError> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(TensorError::ForeignVar {
            op,
            var: v.0,
            len: self.nodes.len(),
        })
    }

    fn push_checked(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var, TensorError> {
        value.check_finite(op)?;
        Ok(self.push(value, node_op))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let op = kind.name();
        let ta = self.checked(op, a)?;
        let tb = self.checked(op, b)?;
        let bc = broadcast_kind(op, ta.shape(), tb.shape())?;
        let out_shape = match bc {
            Bcast::LhsRow | Bcast::LhsCol => tb.shape().to_vec(),
            _ => ta.shape().to_vec(),
        };
        let (rows, cols) = plane(&out_shape);
        let (av, bv) = (ta.data(), tb.data());
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let flat = i * cols + j;
                let (ia, ib) = bin_indices(bc, i, j, flat);
                out[flat] = match kind {
                    BinKind::Add => av[ia] + bv[ib],
                    BinKind::Sub => av[ia] - bv[ib],
                    BinKind::Mul => av[ia] * bv[ib],
                    BinKind::Div => av[ia] / bv[ib],
                };
            }
        }
        let value = Tensor::new(out_shape, out).expect("binary output shape is consistent");
        self.push_checked(op, value, Op::Bin { kind, a, b, bc })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        require_finite_scalar("add_scalar", c)?;
        let t = self.checked("add_scalar", a)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
            .expect("shape preserved");
        self.push_checked("add_scalar", value, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        require_finite_scalar("mul_scalar", c)?;
        let t = self.checked("mul_scalar", a)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        self.push_checked("mul_scalar", value, Op::MulScalar { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("relu", a)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect())
            .expect("shape preserved");
        self.push_checked("relu", value, Op::Relu { a })
    }

    /// exp with the input clamped to `[-EXP_CLAMP, EXP_CLAMP]`. Gradient is
    /// zero outside the window.
    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("exp", a)?;
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()).collect(),
        )
        .expect("shape preserved");
        self.push_checked("exp", value, Op::ClampedExp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("log", a)?;
        require_positive("log", t)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.ln()).collect())
            .expect("shape preserved");
        self.push_checked("log", value, Op::Log { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("sqrt", a)?;
        require_positive("sqrt", t)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.sqrt()).collect())
            .expect("shape preserved");
        self.push_checked("sqrt", value, Op::Sqrt { a })
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("lgamma", a)?;
        let mut out = Vec::with_capacity(t.len());
        for (index, &x) in t.data().iter().enumerate() {
            out.push(map_domain("lgamma", special::lgamma(x), x, index)?);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push_checked("lgamma", value, Op::Lgamma { a })
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("digamma", a)?;
        let mut out = Vec::with_capacity(t.len());
        for (index, &x) in t.data().iter().enumerate() {
            out.push(map_domain("digamma", special::digamma(x), x, index)?);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push_checked("digamma", value, Op::Digamma { a })
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ta = self.checked("matmul", a)?;
        let tb = self.checked("matmul", b)?;
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out).expect("product shape is consistent");
        self.push_checked("matmul", value, Op::Matmul { a, b })
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ta = self.checked("matmul_bt", a)?;
        let tb = self.checked("matmul_bt", b)?;
        let (m, k) = rank2("matmul_bt", ta)?;
        let (n, k2) = rank2("matmul_bt", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out).expect("product shape is consistent");
        self.push_checked("matmul_bt", value, Op::MatmulBt { a, b })
    }

    // ---- reductions and shape ----

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.axis_reduce("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.axis_reduce("mean_axis", a, axis, true)
    }

    fn axis_reduce(&mut self, op: &'static str, a: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let t = self.checked(op, a)?;
        let (r, c) = rank2(op, t)?;
        if axis > 1 {
            return Err(TensorError::Unsupported {
                op,
                msg: format!("axis {axis} out of range for rank-2 input"),
            });
        }
        let d = t.data();
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in d.chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            if mean {
                for o in &mut out {
                    *o /= r as f64;
                }
            }
            Tensor::vector(out)
        } else {
            let mut out: Vec<f64> = d
                .chunks_exact(c)
                .map(|row| row.iter().sum::<f64>())
                .collect();
            if mean {
                for o in &mut out {
                    *o /= c as f64;
                }
            }
            Tensor::vector(out)
        };
        let node = if mean {
            Op::MeanAxis { a, axis: axis as u8 }
        } else {
            Op::SumAxis { a, axis: axis as u8 }
        };
        self.push_checked(op, value, node)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("sum_all", a)?;
        let value = Tensor::scalar(t.data().iter().sum());
        self.push_checked("sum_all", value, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("mean_all", a)?;
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push_checked("mean_all", value, Op::MeanAll { a })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.checked("reshape", a)?;
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { op: "reshape", shape });
        }
        if shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                count: t.len(),
                shape,
            });
        }
        let value = Tensor::new(shape, t.data().to_vec()).expect("count checked");
        self.push_checked("reshape", value, Op::Reshape { a })
    }

    // ---- row ops ----

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("l2_normalize_rows", a)?;
        let (_, c) = rank2("l2_normalize_rows", t)?;
        let mut out = t.data().to_vec();
        if let Some(row) = kernels::l2_normalize_rows_in_place(&mut out, c) {
            return Err(TensorError::Domain {
                op: "l2_normalize_rows",
                requirement: "rows must have nonzero norm",
                value: 0.0,
                index: row * c,
            });
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push_checked("l2_normalize_rows", value, Op::L2NormRows { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.checked("softmax_rows", a)?;
        let (_, c) = rank2("softmax_rows", t)?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push_checked("softmax_rows", value, Op::SoftmaxRows { a })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = self.checked("gather_rows", a)?;
        let (r, c) = rank2("gather_rows", t)?;
        if idx.is_empty() {
            return Err(TensorError::Unsupported {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    rows: r,
                });
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, out).expect("gather shape is consistent");
        self.push_checked("gather_rows", value, Op::GatherRows { a, idx: idx.to_vec() })
    }

    /// Per-row softmax cross-entropy against exact one-hot targets; returns
    /// the `[rows]` vector of losses. Stable via max-shifted log-sum-exp.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, onehot: Var) -> Result<Var, TensorError> {
        let tl = self.checked("softmax_cross_entropy_rows", logits)?;
        let ty = self.checked("softmax_cross_entropy_rows", onehot)?;
        let (r, c) = rank2("softmax_cross_entropy_rows", tl)?;
        if tl.shape() != ty.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy_rows",
                lhs: tl.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        check_one_hot("softmax_cross_entropy_rows", ty.data(), c)?;
        let mut out = Vec::with_capacity(r);
        for (lrow, yrow) in tl.data().chunks_exact(c).zip(ty.data().chunks_exact(c)) {
            let m = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lrow.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let true_logit: f64 = lrow.iter().zip(yrow).map(|(l, y)| l * y).sum();
            out.push(lse - true_logit);
        }
        let value = Tensor::vector(out);
        self.push_checked("softmax_cross_entropy_rows", value, Op::SoftmaxCeRows { logits, onehot })
    }

    /// Batch-hard triplet loss over feature rows: for every anchor take its
    /// farthest same-label row and nearest other-label row, hinge at
    /// `margin`, and average over anchors that have a positive. Scalar
    /// output. Distances are Euclidean with a tiny epsilon inside the root.
    pub fn batch_hard_triplet(&mut self, feats: Var, labels: &[usize], margin: f64) -> Result<Var, TensorError> {
        require_finite_scalar("batch_hard_triplet", margin)?;
        let t = self.checked("batch_hard_triplet", feats)?;
        let (r, c) = rank2("batch_hard_triplet", t)?;
        if labels.len() != r {
            return Err(TensorError::Unsupported {
                op: "batch_hard_triplet",
                msg: format!("{} labels for {} rows", labels.len(), r),
            });
        }
        let distinct = {
            let mut seen: Vec<usize> = labels.to_vec();
            seen.sort_unstable();
            seen.dedup();
            seen.len()
        };
        if distinct < 2 {
            return Err(TensorError::Unsupported {
                op: "batch_hard_triplet",
                msg: "batch must contain at least two distinct labels".into(),
            });
        }
        let d = t.data();
        let dist = |i: usize, j: usize| -> f64 {
            let (ri, rj) = (&d[i * c..(i + 1) * c], &d[j * c..(j + 1) * c]);
            let s: f64 = ri.iter().zip(rj).map(|(x, y)| (x - y) * (x - y)).sum();
            (s + TRIPLET_DIST_EPS).sqrt()
        };
        let mut picks = Vec::with_capacity(r);
        let mut total = 0.0;
        let mut valid = 0usize;
        for i in 0..r {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..r {
                if j == i {
                    continue;
                }
                let dij = dist(i, j);
                if labels[j] == labels[i] {
                    if pos.map_or(true, |(_, best)| dij > best) {
                        pos = Some((j, dij));
                    }
                } else if neg.map_or(true, |(_, best)| dij < best) {
                    neg = Some((j, dij));
                }
            }
            match (pos, neg) {
                (Some((p, dp)), Some((n, dn))) => {
                    let hinge = (margin + dp - dn).max(0.0);
                    total += hinge;
                    valid += 1;
                    picks.push(Some(TripletPick {
                        pos: p as u32,
                        neg: n as u32,
                        active: hinge > 0.0,
                    }));
                }
                _ => picks.push(None),
            }
        }
        if valid == 0 {
            return Err(TensorError::Unsupported {
                op: "batch_hard_triplet",
                msg: "no anchor has a same-label partner".into(),
            });
        }
        let value = Tensor::scalar(total / valid as f64);
        self.push_checked("batch_hard_triplet", value, Op::BatchHardTriplet { feats, picks, valid })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Adds into existing gradients.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let t = self.checked("backward", root)?;
        if !t.is_scalar() {
            return Err(TensorError::BadRank {
                op: "backward",
                expected: "scalar root",
                got: t.shape().to_vec(),
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        scratch[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = scratch[id].take() else { continue };
            self.propagate(id, &g, &mut scratch)?;
            match &mut self.nodes[id].grad {
                Some(buf) => {
                    for (b, gi) in buf.iter_mut().zip(&g) {
                        *b += gi;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) -> Result<(), TensorError> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (m, k) = self.nodes[a.0].value.dims2().expect("validated rank-2");
                let n = self.nodes[b.0].value.dims2().expect("validated rank-2").1;
                kernels::matmul_bt_acc(g, bv, acc(scratch, *a, m * k), m, n, k);
                kernels::matmul_tn_acc(av, g, acc(scratch, *b, k * n), m, k, n);
            }
            Op::MatmulBt { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (m, k) = self.nodes[a.0].value.dims2().expect("validated rank-2");
                let n = self.nodes[b.0].value.dims2().expect("validated rank-2").0;
                kernels::matmul_nn_acc(g, bv, acc(scratch, *a, m * k), m, n, k);
                kernels::matmul_tn_acc(g, av, acc(scratch, *b, n * k), m, n, k);
            }
            Op::Bin { kind, a, b, bc } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let out_shape = self.nodes[id].value.shape();
                let (rows, cols) = plane(out_shape);
                {
                    let ga = acc(scratch, *a, av.len());
                    bin_side_grad(*kind, *bc, g, av, bv, rows, cols, ga, true);
                }
                {
                    let gb = acc(scratch, *b, bv.len());
                    bin_side_grad(*kind, *bc, g, av, bv, rows, cols, gb, false);
                }
            }
            Op::AddScalar { a } => {
                let ga = acc(scratch, *a, g.len());
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::MulScalar { a, c } => {
                let ga = acc(scratch, *a, g.len());
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }
            Op::Relu { a } => {
                let x = self.nodes[a.0].value.data();
                let ga = acc(scratch, *a, x.len());
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::ClampedExp { a } => {
                let x = self.nodes[a.0].value.data();
                let y = self.nodes[id].value.data();
                let ga = acc(scratch, *a, x.len());
                for (((o, gi), xi), yi) in ga.iter_mut().zip(g).zip(x).zip(y) {
                    if *xi > -EXP_CLAMP && *xi < EXP_CLAMP {
                        *o += gi * yi;
                    }
                }
            }
            Op::Log { a } => {
                let x = self.nodes[a.0].value.data();
                let ga = acc(scratch, *a, x.len());
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *o += gi / xi;
                }
            }
            Op::Sqrt { a } => {
                let y = self.nodes[id].value.data();
                let ga = acc(scratch, *a, y.len());
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * 0.5 / yi;
                }
            }
            Op::Lgamma { a } => {
                let x = self.nodes[a.0].value.data();
                let ga = acc(scratch, *a, x.len());
                for (index, ((o, gi), xi)) in ga.iter_mut().zip(g).zip(x).enumerate() {
                    *o += gi * map_domain("lgamma", special::digamma(*xi), *xi, index)?;
                }
            }
            Op::Digamma { a } => {
                let x = self.nodes[a.0].value.data();
                let ga = acc(scratch, *a, x.len());
                for (index, ((o, gi), xi)) in ga.iter_mut().zip(g).zip(x).enumerate() {
                    *o += gi * map_domain("digamma", special::trigamma(*xi), *xi, index)?;
                }
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let t = &self.nodes[a.0].value;
                let (r, c) = t.dims2().expect("validated rank-2");
                let mean = matches!(self.nodes[id].op, Op::MeanAxis { .. });
                let scale = if mean {
                    1.0 / (if *axis == 0 { r } else { c }) as f64
                } else {
                    1.0
                };
                let ga = acc(scratch, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        let gi = if *axis == 0 { g[j] } else { g[i] };
                        ga[i * c + j] += gi * scale;
                    }
                }
            }
            Op::SumAll { a } | Op::MeanAll { a } => {
                let len = self.nodes[a.0].value.len();
                let mean = matches!(self.nodes[id].op, Op::MeanAll { .. });
                let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                let ga = acc(scratch, *a, len);
                for o in ga.iter_mut() {
                    *o += g[0] * scale;
                }
            }
            Op::Reshape { a } => {
                let ga = acc(scratch, *a, g.len());
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::L2NormRows { a } => {
                let x = self.nodes[a.0].value.data();
                let y = self.nodes[id].value.data();
                let c = self.nodes[id].value.dims2().expect("validated rank-2").1;
                let ga = acc(scratch, *a, x.len());
                for r in 0..x.len() / c {
                    let xr = &x[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        ga[r * c + j] += (gr[j] - yr[j] * s) / norm;
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let p = self.nodes[id].value.data();
                let c = self.nodes[id].value.dims2().expect("validated rank-2").1;
                let ga = acc(scratch, *a, p.len());
                for r in 0..p.len() / c {
                    let pr = &p[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s: f64 = gr.iter().zip(pr).map(|(gi, pi)| gi * pi).sum();
                    for j in 0..c {
                        ga[r * c + j] += pr[j] * (gr[j] - s);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let c = self.nodes[id].value.dims2().expect("validated rank-2").1;
                let ga = acc(scratch, *a, self.nodes[a.0].value.len());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            }
            Op::SoftmaxCeRows { logits, onehot } => {
                let lv = self.nodes[logits.0].value.data();
                let yv = self.nodes[onehot.0].value.data();
                let c = self.nodes[logits.0].value.dims2().expect("validated rank-2").1;
                {
                    let gl = acc(scratch, *logits, lv.len());
                    for (r, (lrow, yrow)) in lv.chunks_exact(c).zip(yv.chunks_exact(c)).enumerate() {
                        let mut p = lrow.to_vec();
                        softmax_in_place(&mut p);
                        for j in 0..c {
                            gl[r * c + j] += g[r] * (p[j] - yrow[j]);
                        }
                    }
                }
                {
                    let gy = acc(scratch, *onehot, yv.len());
                    for (r, lrow) in lv.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            gy[r * c + j] -= g[r] * lrow[j];
                        }
                    }
                }
            }
            Op::BatchHardTriplet { feats, picks, valid } => {
                let f = self.nodes[feats.0].value.data();
                let c = self.nodes[feats.0].value.dims2().expect("validated rank-2").1;
                let coef = g[0] / *valid as f64;
                let gf = acc(scratch, *feats, f.len());
                for (i, pick) in picks.iter().enumerate() {
                    let Some(p) = pick else { continue };
                    if !p.active {
                        continue;
                    }
                    for (other, sign) in [(p.pos as usize, 1.0), (p.neg as usize, -1.0)] {
                        let fi = &f[i * c..(i + 1) * c];
                        let fo = &f[other * c..(other + 1) * c];
                        let sq: f64 = fi.iter().zip(fo).map(|(x, y)| (x - y) * (x - y)).sum();
                        let dist = (sq + TRIPLET_DIST_EPS).sqrt();
                        let scale = sign * coef / dist;
                        for j in 0..c {
                            let diff = fi[j] - fo[j];
                            gf[i * c + j] += scale * diff;
                            gf[other * c + j] -= scale * diff;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<'s>(scratch: &'s mut [Option<Vec<f64>>], var: Var, len: usize) -> &'s mut [f64] {
    scratch[var.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

// (rows, cols) view of a shape for elementwise iteration; non-2-D shapes are
// a single row.
fn plane(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        other => (1, other.iter().product()),
    }
}

fn bin_indices(bc: Bcast, i: usize, j: usize, flat: usize) -> (usize, usize) {
    let ia = match bc {
        Bcast::LhsRow => j,
        Bcast::LhsCol => i,
        _ => flat,
    };
    let ib = match bc {
        Bcast::RhsRow => j,
        Bcast::RhsCol => i,
        _ => flat,
    };
    (ia, ib)
}

#[allow(clippy::too_many_arguments)]
fn bin_side_grad(
    kind: BinKind,
    bc: Bcast,
    g: &[f64],
    av: &[f64],
    bv: &[f64],
    rows: usize,
    cols: usize,
    dst: &mut [f64],
    lhs_side: bool,
) {
    for i in 0..rows {
        for j in 0..cols {
            let flat = i * cols + j;
            let (ia, ib) = bin_indices(bc, i, j, flat);
            let gi = g[flat];
            if lhs_side {
                let pa = match kind {
                    BinKind::Add | BinKind::Sub => gi,
                    BinKind::Mul => gi * bv[ib],
                    BinKind::Div => gi / bv[ib],
                };
                dst[ia] += pa;
            } else {
                let pb = match kind {
                    BinKind::Add => gi,
                    BinKind::Sub => -gi,
                    BinKind::Mul => gi * av[ia],
                    BinKind::Div => -gi * av[ia] / (bv[ib] * bv[ib]),
                };
                dst[ib] += pb;
            }
        }
    }
}

fn broadcast_kind(op: &'static str, ls: &[usize], rs: &[usize]) -> Result<Bcast, TensorError> {
    if ls == rs {
        return Ok(Bcast::None);
    }
    if let [r, c] = ls[..] {
        if rs.len() == 1 && rs[0] == c {
            return Ok(Bcast::RhsRow);
        }
        if rs.len() == 2 && rs[0] == 1 && rs[1] == c {
            return Ok(Bcast::RhsRow);
        }
        if rs.len() == 2 && rs[0] == r && rs[1] == 1 && c != 1 {
            return Ok(Bcast::RhsCol);
        }
    }
    if let [r, c] = rs[..] {
        if ls.len() == 1 && ls[0] == c {
            return Ok(Bcast::LhsRow);
        }
        if ls.len() == 2 && ls[0] == 1 && ls[1] == c {
            return Ok(Bcast::LhsRow);
        }
        if ls.len() == 2 && ls[0] == r && ls[1] == 1 && c != 1 {
            return Ok(Bcast::LhsCol);
        }
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: ls.to_vec(),
        rhs: rs.to_vec(),
    })
}

fn rank2<'t>(op: &'static str, t: &'t Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or(TensorError::BadRank {
        op,
        expected: "rank-2 input",
        got: t.shape().to_vec(),
    })
}

fn require_positive(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    for (index, &value) in t.data().iter().enumerate() {
        if value <= 0.0 {
            return Err(TensorError::Domain {
                op,
                requirement: "argument must be positive",
                value,
                index,
            });
        }
    }
    Ok(())
}

fn require_finite_scalar(op: &'static str, c: f64) -> Result<(), TensorError> {
    if c.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            op,
            value: c,
            index: 0,
        })
    }
}

fn map_domain(
    op: &'static str,
    r: Result<f64, special::DomainError>,
    value: f64,
    index: usize,
) -> Result<f64, TensorError> {
    r.map_err(|_| TensorError::Domain {
        op,
        requirement: "argument must be positive and finite",
        value,
        index,
    })
}

fn check_one_hot(op: &'static str, data: &[f64], cols: usize) -> Result<(), TensorError> {
    for (r, row) in data.chunks_exact(cols).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != cols {
            return Err(TensorError::Domain {
                op,
                requirement: "rows must be exact one-hot",
                value: row.iter().cloned().fold(f64::NAN, |_, v| v),
                index: r * cols,
            });
        }
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
