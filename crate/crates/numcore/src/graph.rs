//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Nodes
//! only reference earlier nodes, so the tape order is a topological order and
//! [`Graph::backward`] walks it in reverse, accumulating each contribution in
//! that fixed order. Repeated `backward` calls on the same graph each start
//! from zero; gradients accumulate only where they are written into a
//! [`ParamStore`] with [`Graph::write_param_grads`], which adds rather than
//! overwrites until the store is zeroed.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{shape_err, NumError, Result};
use crate::kernels::{gemm, transpose};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive bias applied to attention logits at padded keys.
pub const MASK_BIAS: f64 = -1e9;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Map {
        a: Var,
        df: fn(F) -> F,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<F>>,
        probs: Vec<F>,
        denom: F,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    IndexAxis {
        a: Var,
        axis: usize,
        index: usize,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    KeyMask {
        a: Var,
    },
    RelGather {
        a: Var,
        index: Vec<usize>,
        tk: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. a leaf, or `None` when it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_vec(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but zeros for leaves the loss does not depend on.
    pub fn get_or_zero(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: IndexMap<String, Var>,
    train: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides)
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer index
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// True when `suffix` matches the trailing axes of `shape`.
fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<F: Scalar> Graph<F> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            train: false,
        }
    }

    /// Training-mode graph: dropout is active.
    pub fn training() -> Self {
        Self {
            train: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Binding the same name twice returns the same
    /// node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.input(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter bindings made so far, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Smallest `|x|` over the inputs of every relu in the graph, `None`
    /// when there is none. Finite differences with a step above this may
    /// straddle the kink at zero.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|x| x.as_f64().abs()))
            .reduce(f64::min)
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is `[..., k, n]`
    /// whose leading axes are a suffix of `a`'s (broadcast over the rest).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes, with the same broadcasting as [`Graph::matmul`].
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
    ) -> Result<(usize, usize, usize, usize, usize, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: rank < 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let a_lead = &sa[..sa.len() - 2];
        let b_lead = &sb[..sb.len() - 2];
        if k != kb || !is_suffix(a_lead, b_lead) {
            return shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out_shape = a_lead.to_vec();
        out_shape.extend([m, n]);
        Ok((numel(a_lead), numel(b_lead), m, k, n, out_shape))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (a_batch, b_batch, m, k, n, out_shape) = self.matmul_dims(a, b, trans_b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        // b as [k, n] blocks
        let b_kn: Vec<F> = if trans_b {
            bv.chunks(n * k)
                .flat_map(|blk| transpose(n, k, blk))
                .collect()
        } else {
            bv.to_vec()
        };
        let mut out = vec![F::zero(); a_batch * m * n];
        if b_batch == 1 {
            gemm(a_batch * m, k, n, av, &b_kn, &mut out);
        } else {
            for bi in 0..a_batch {
                let bj = bi % b_batch;
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    &b_kn[bj * k * n..(bj + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok((a, b))
        } else if is_suffix(sb, sa) {
            Ok((b, a))
        } else {
            shape_err(op, format!("{sa:?} vs {sb:?}: neither is a suffix"))
        }
    }

    /// Sum with broadcasting of the lower-rank operand over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Add { a, b }, rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = F::from_f64_lossy(factor);
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Scale { a, factor },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Relu { a },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| F::from_f64_lossy(gelu_parts(x.as_f64()).0))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Gelu { a },
            rg,
        )
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: fn(F) -> F, df: fn(F) -> F) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Map { a, df },
            rg,
        )
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity in
    /// evaluation mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            Op::Dropout { a, mask },
            rg,
        )
    }

    // ---- shape ops ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err("permute", format!("{perm:?} for {shape:?}"));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose_last2", "rank < 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return shape_err("concat", format!("{:?} vs {s:?}", self.shape(first)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = shape[shape.len() - 1];
        if len == 0 || start + len > w {
            return shape_err("slice_last", format!("{start}+{len} of width {w}"));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = len;
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::SliceLast { a, start },
            rg,
        ))
    }

    /// Selects `index` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err("index_axis", format!("axis {axis} of {shape:?}"));
        }
        if index >= shape[axis] {
            return Err(NumError::IndexOutOfRange {
                what: "index_axis",
                index,
                size: shape[axis],
            });
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::from_vec(&drop_axis(&shape, axis), out)?,
            Op::IndexAxis { a, axis, index },
            rg,
        ))
    }

    /// Gathers rows of the `[N, d]` view of `a` (`d` = last axis).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(a).last_dim();
        let n = self.value(a).numel() / d;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(NumError::IndexOutOfRange {
                    what: "select_rows",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(self.value(a).row(r));
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::from_vec(&[rows.len(), d], out)?,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    /// Mean over `axis`, dropping it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err("mean", format!("axis {axis} of {shape:?}"));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let inv = F::one() / F::from_usize(len).expect("len");
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        if len > 1 {
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::from_vec(&drop_axis(&shape, axis), out)?,
            Op::Mean { a, axis },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.has_nan() {
            return Err(NumError::NaN("softmax"));
        }
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Softmax { a }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    /// Variance uses `1/N`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let eps = F::from_f64_lossy(eps);
        let nf = F::from_usize(d).expect("width");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nf;
            let denom = var + eps;
            if denom <= F::zero() {
                return Err(NumError::DivisionByZero("layer_norm"));
            }
            let inv = F::one() / denom.sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- model-specific gathers ----------------------------------------

    /// Looks up rows of `table` (`[V, d]`); output shape is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err("embedding", format!("table {ts:?}"));
        }
        if numel(ids_shape) != ids.len() {
            return shape_err(
                "embedding",
                format!("{} ids for shape {ids_shape:?}", ids.len()),
            );
        }
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Adds [`MASK_BIAS`] to attention logits `[B, ..., Tk]` at keys where
    /// `key_mask[b * Tk + j]` is false.
    pub fn key_mask(&mut self, a: Var, key_mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let tk = shape[shape.len() - 1];
        let b = shape[0];
        if key_mask.len() != b * tk || shape.len() < 2 {
            return shape_err(
                "key_mask",
                format!("mask of {} for {shape:?}", key_mask.len()),
            );
        }
        let rows_per_batch = numel(&shape) / (b * tk);
        let bias = F::from_f64_lossy(MASK_BIAS);
        let mut out = self.value(a).data().to_vec();
        for (r, row) in out.chunks_mut(tk).enumerate() {
            let batch = r / rows_per_batch;
            let m = &key_mask[batch * tk..(batch + 1) * tk];
            for (v, &keep) in row.iter_mut().zip(m) {
                if !keep {
                    *v = *v + bias;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::KeyMask { a }, rg))
    }

    /// Gathers along the last axis with a per-query index table:
    /// `a` is `[..., Tq, R]`, `index` is `Tq × Tk` with entries `< R`, and
    /// `out[..., i, j] = a[..., i, index[i * Tk + j]]`.
    pub fn rel_gather(&mut self, a: Var, index: &[usize], tk: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return shape_err("rel_gather", "rank < 2");
        }
        let (tq, r) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if index.len() != tq * tk || index.iter().any(|&i| i >= r) {
            return shape_err("rel_gather", format!("index table for {tq}x{tk} over {r}"));
        }
        let src = self.value(a).data();
        let blocks = src.len() / (tq * r);
        let mut out = Vec::with_capacity(blocks * tq * tk);
        for blk in 0..blocks {
            for i in 0..tq {
                let row = &src[(blk * tq + i) * r..(blk * tq + i + 1) * r];
                out.extend(index[i * tk..(i + 1) * tk].iter().map(|&c| row[c]));
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 2") = tk;
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::RelGather {
                a,
                index: index.to_vec(),
                tk,
            },
            rg,
        ))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean cross-entropy of `logits` (`[N, C]`) against class indices.
    /// With `class_weights`, the mean is weighted by the target class weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        let n = t.numel() / c;
        if targets.len() != n || n == 0 {
            return shape_err(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            );
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return shape_err(
                    "cross_entropy",
                    format!("{} weights for {c} classes", w.len()),
                );
            }
        }
        if t.has_nan() {
            return Err(NumError::NaN("cross_entropy"));
        }
        let mut probs = t.data().to_vec();
        let mut total = F::zero();
        let mut denom = F::zero();
        let weights: Option<Vec<F>> =
            class_weights.map(|w| w.iter().map(|&x| F::from_f64_lossy(x)).collect());
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(NumError::IndexOutOfRange {
                    what: "cross_entropy class",
                    index: y,
                    size: c,
                });
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(F::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            let w = weights.as_ref().map_or(F::one(), |w| w[y]);
            total = total + w * (lse - row[y]);
            denom = denom + w;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / denom;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                denom,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(NumError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let len = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; len];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..len).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..len]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Runs [`Graph::backward`] and adds every bound parameter's gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        self.write_param_grads(&grads, store)
    }

    pub fn write_param_grads(&self, grads: &Gradients<F>, store: &mut ParamStore<F>) -> Result<()> {
        for (name, &v) in &self.params {
            if let Some(Some(g)) = grads.grads.get(v.0) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, g, grads),
            Op::Add { a, b } => {
                if self.requires(*a) {
                    self.acc(grads, *a, g.to_vec());
                }
                if self.requires(*b) {
                    let nb = self.value(*b).numel();
                    let mut gb = vec![F::zero(); nb];
                    for chunk in g.chunks(nb) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x = *x + y;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.requires(*a) {
                    let ga = g.iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect();
                    self.acc(grads, *a, ga);
                }
                if self.requires(*b) {
                    let mut gb = vec![F::zero(); nb];
                    for (i, (&x, &y)) in g.iter().zip(av).enumerate() {
                        gb[i % nb] = gb[i % nb] + x * y;
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale { a, factor } => {
                self.acc(grads, *a, g.iter().map(|&x| x * *factor).collect());
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.requires(p) {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.acc(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceLast { a, start } => {
                let w = self.value(*a).last_dim();
                let len = node.value.last_dim();
                let mut ga = vec![F::zero(); self.value(*a).numel()];
                for (row, grow) in ga.chunks_mut(w).zip(g.chunks(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                self.acc(grads, *a, ga);
            }
            Op::Mean { a, axis } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = split_at_axis(shape, *axis);
                let inv = if len > 1 {
                    F::one() / F::from_usize(len).expect("len")
                } else {
                    F::one()
                };
                let mut ga = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            ga[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut ga = vec![F::zero(); y.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot = gr.iter().zip(yr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let nf = F::from_usize(d).expect("width");
                let gv = self.value(*gamma).data();
                if self.requires(*x) {
                    let mut gx = vec![F::zero(); g.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let k = inv_std[r] / nf;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] = k * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires(*gamma) {
                    let mut gg = vec![F::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.requires(*beta) {
                    let mut gb = vec![F::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                    self.acc(grads, *beta, gb);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&gy, &x)| gy * F::from_f64_lossy(gelu_parts(x.as_f64()).1))
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&gy, &x)| if x > F::zero() { gy } else { F::zero() })
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Map { a, df } => {
                let av = self.value(*a).data();
                let ga = g.iter().zip(av).map(|(&gy, &x)| gy * df(x)).collect();
                self.acc(grads, *a, ga);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut gt = vec![F::zero(); self.value(*table).numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[k * d + j];
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Dropout { a, mask } => {
                let ga = g.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.acc(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                let c = self.value(*logits).last_dim();
                let mut gl = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(F::one(), |w| w[y]);
                    let scale = g[0] * w / *denom;
                    let row = &mut gl[i * c..(i + 1) * c];
                    row[y] = row[y] - F::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                self.acc(grads, *logits, gl);
            }
            Op::Reshape { a } => self.acc(grads, *a, g.to_vec()),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (ga, _) = permute_data(g, node.value.shape(), &inverse);
                self.acc(grads, *a, ga);
            }
            Op::IndexAxis { a, axis, index } => {
                let (outer, len, inner) = split_at_axis(self.shape(*a), *axis);
                let mut ga = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                self.acc(grads, *a, ga);
            }
            Op::SelectRows { a, rows } => {
                let d = self.value(*a).last_dim();
                let mut ga = vec![F::zero(); self.value(*a).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        ga[r * d + j] = ga[r * d + j] + g[k * d + j];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::KeyMask { a } => self.acc(grads, *a, g.to_vec()),
            Op::RelGather { a, index, tk } => {
                let shape = self.shape(*a);
                let (tq, r) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut ga = vec![F::zero(); self.value(*a).numel()];
                let blocks = ga.len() / (tq * r);
                for blk in 0..blocks {
                    for i in 0..tq {
                        let row = (blk * tq + i) * r;
                        let grow = (blk * tq + i) * tk;
                        for j in 0..*tk {
                            let c = index[i * tk + j];
                            ga[row + c] = ga[row + c] + g[grow + j];
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
        }
    }

    fn backward_matmul(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (a_batch, b_batch, m, k, n, _) = self
            .matmul_dims(a, b, trans_b)
            .expect("validated on forward");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if self.requires(a) {
            // dA = dC · Bᵀ where B is [k, n]; stored b is [n, k] when trans_b
            let b_nk: Vec<F> = if trans_b {
                bv.to_vec()
            } else {
                bv.chunks(k * n)
                    .flat_map(|blk| transpose(k, n, blk))
                    .collect()
            };
            let mut ga = vec![F::zero(); av.len()];
            if b_batch == 1 {
                gemm(a_batch * m, n, k, g, &b_nk, &mut ga);
            } else {
                for bi in 0..a_batch {
                    let bj = bi % b_batch;
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b_nk[bj * n * k..(bj + 1) * n * k],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            self.acc(grads, a, ga);
        }
        if self.requires(b) {
            let mut gb = vec![F::zero(); bv.len()];
            if b_batch == 1 {
                let rows = a_batch * m;
                if trans_b {
                    // dB[n, k] = dCᵀ · A
                    let gt = transpose(rows, n, g);
                    gemm(n, rows, k, &gt, av, &mut gb);
                } else {
                    // dB[k, n] = Aᵀ · dC
                    let at = transpose(rows, k, av);
                    gemm(k, rows, n, &at, g, &mut gb);
                }
            } else {
                for bi in 0..a_batch {
                    let bj = bi % b_batch;
                    let a_blk = &av[bi * m * k..(bi + 1) * m * k];
                    let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                    let out = &mut gb[bj * k * n..(bj + 1) * k * n];
                    if trans_b {
                        let gt = transpose(m, n, g_blk);
                        gemm(n, m, k, &gt, a_blk, out);
                    } else {
                        let at = transpose(m, k, a_blk);
                        gemm(k, m, n, &at, g_blk, out);
                    }
                }
            }
            self.acc(grads, b, gb);
        }
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax of a plain slice, outside any graph.
pub fn softmax_slice<F: Scalar>(logits: &[F]) -> Vec<F> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}
