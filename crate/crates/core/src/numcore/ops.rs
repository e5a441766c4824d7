//! Elementwise, reduction and layout ops.

use std::sync::Arc;

use super::cost::{self, Primitive, GELU_FLOPS_PER_ELEM};
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("shapes {a:?} and {b:?} are not broadcastable"),
                ))
            }
        };
    }
    Ok(out)
}

/// For each element of `dst` (row-major), the flat index of the `src`
/// element it reads under broadcasting. `src` must broadcast to `dst`.
pub(crate) fn broadcast_index(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let lead = rank - src.len();
    let src_strides = contiguous_strides(src);
    let mut strides = vec![0; rank];
    for (i, (&d, &s)) in src.iter().zip(&src_strides).enumerate() {
        if d != 1 {
            strides[lead + i] = s;
        }
    }
    let n = numel_of(dst);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            cur -= strides[d] * dst[d];
            idx[d] = 0;
        }
    }
    out
}

fn reduce_into(g: &[f64], index: &Option<Arc<Vec<usize>>>, len: usize, scale: impl Fn(usize) -> f64) -> Vec<f64> {
    match index {
        None => g.iter().enumerate().map(|(i, gi)| gi * scale(i)).collect(),
        Some(idx) => {
            let mut out = vec![0.0; len];
            for (i, (&j, gi)) in idx.iter().zip(g).enumerate() {
                out[j] += gi * scale(i);
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Relu,
    Gelu,
    ClampMin(f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::ClampMin(_) => "clamp_min",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(s) => x * s,
            Unary::AddScalar(s) => x + s,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Unary::ClampMin(m) => x.max(m),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(s) => s,
            Unary::AddScalar(_) => 1.0,
            Unary::Exp => x.exp(),
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / x.sqrt(),
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Unary::ClampMin(m) => {
                if x > m {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn flops_per_elem(self) -> u64 {
        match self {
            Unary::Gelu => GELU_FLOPS_PER_ELEM,
            _ => cost::ELEMENTWISE_FLOPS_PER_ELEM,
        }
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: Binary) -> Result<Tensor> {
        let op = kind.name();
        let shape = broadcast_shape(op, self.shape(), other.shape())?;
        let n = numel_of(&shape);
        let ia = (self.shape() != shape.as_slice()).then(|| Arc::new(broadcast_index(self.shape(), &shape)));
        let ib = (other.shape() != shape.as_slice()).then(|| Arc::new(broadcast_index(other.shape(), &shape)));
        let (da, db) = (self.data(), other.data());
        let data: Vec<f64> = match (&ia, &ib) {
            (None, None) => da.iter().zip(db).map(|(&x, &y)| kind.apply(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let x = da[ia.as_ref().map_or(i, |v| v[i])];
                    let y = db[ib.as_ref().map_or(i, |v| v[i])];
                    kind.apply(x, y)
                })
                .collect(),
        };
        cost::record(Primitive::Elementwise, n as u64);

        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            op,
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let x_at = |i: usize| a.data()[ia.as_ref().map_or(i, |v| v[i])];
                let y_at = |i: usize| b.data()[ib.as_ref().map_or(i, |v| v[i])];
                let ga = needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => reduce_into(g, &ia, a.numel(), |_| 1.0),
                    Binary::Mul => reduce_into(g, &ia, a.numel(), y_at),
                    Binary::Div => reduce_into(g, &ia, a.numel(), |i| 1.0 / y_at(i)),
                });
                let gb = needs[1].then(|| match kind {
                    Binary::Add => reduce_into(g, &ib, b.numel(), |_| 1.0),
                    Binary::Sub => reduce_into(g, &ib, b.numel(), |_| -1.0),
                    Binary::Mul => reduce_into(g, &ib, b.numel(), x_at),
                    Binary::Div => reduce_into(g, &ib, b.numel(), |i| {
                        let y = y_at(i);
                        -x_at(i) / (y * y)
                    }),
                });
                vec![ga, gb]
            }),
        )
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Div)
    }

    fn unary(&self, kind: Unary) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| kind.apply(x)).collect();
        cost::record(
            if matches!(kind, Unary::Gelu) { Primitive::Gelu } else { Primitive::Elementwise },
            self.numel() as u64 * kind.flops_per_elem(),
        );
        let x = self.clone();
        Tensor::from_op(
            kind.name(),
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(gi, &xi)| gi * kind.derivative(xi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary(Unary::Scale(s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.unary(Unary::AddScalar(s))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary(Unary::Ln)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary(Unary::Square)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Result<Tensor> {
        self.unary(Unary::Abs)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Unary::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        self.unary(Unary::Gelu)
    }

    pub fn clamp_min(&self, min: f64) -> Result<Tensor> {
        self.unary(Unary::ClampMin(min))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        cost::record(Primitive::Reduce, self.numel() as u64);
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let rank = self.rank();
        if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::Axis { axis, rank });
        }
        let kept: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let index = Arc::new(broadcast_index(&kept, self.shape()));
        let mut data = vec![0.0; numel_of(&kept)];
        for (&j, &x) in index.iter().zip(self.data()) {
            data[j] += x;
        }
        cost::record(Primitive::Reduce, self.numel() as u64);
        let out_shape: Vec<usize> = if keepdim {
            kept
        } else {
            self.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        Tensor::from_op(
            "sum_axes",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(index.iter().map(|&j| g[j]).collect())]),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes
            .iter()
            .filter(|&&a| a < self.rank())
            .map(|&a| self.dim(a))
            .product();
        self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        let gather_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..n {
            index.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += gather_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                cur -= gather_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let src = self.data();
        let data = index.iter().map(|&j| src[j]).collect();
        Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (&j, gi) in index.iter().zip(g) {
                    gx[j] = *gi;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        if len == 0 || start + len > self.dim(axis) {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.dim(axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Tensor::from_op(
            "narrow",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not match {:?} off axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            "concat",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(needs)
                    .map(|(gp, &need)| need.then_some(gp))
                    .collect()
            }),
        )
    }
}
