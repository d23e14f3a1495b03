use super::index::IndexMap;
use super::{numel, Op, Tensor};
use std::rc::Rc;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element in
/// row-major order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank];
    let mut o = 0;
    loop {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += counter[d] * sa[d];
            ib += counter[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        if o >= n {
            break;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

fn binary_kernel(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Vec<usize>) {
    let (da, db) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return (da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(), a.shape().to_vec());
    }
    if b.numel() == 1 && b.rank() <= a.rank() {
        let y = db[0];
        return (da.iter().map(|&x| f(x, y)).collect(), a.shape().to_vec());
    }
    if a.numel() == 1 && a.rank() <= b.rank() {
        let x = da[0];
        return (db.iter().map(|&y| f(x, y)).collect(), b.shape().to_vec());
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut res = vec![0.0; numel(&out)];
    for_each_broadcast(&out, &sa, &sb, |o, i, j| res[o] = f(da[i], db[j]));
    (res, out)
}

fn unary_kernel(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

macro_rules! need {
    ($inputs:expr, $i:expr, $e:expr) => {
        if $inputs[$i].requires_grad() {
            Some($e)
        } else {
            None
        }
    };
}

struct AddOp;
impl Op for AddOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            need!(inputs, 0, g.sum_to(inputs[0].shape())),
            need!(inputs, 1, g.sum_to(inputs[1].shape())),
        ]
    }
}

struct SubOp;
impl Op for SubOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            need!(inputs, 0, g.sum_to(inputs[0].shape())),
            need!(inputs, 1, g.neg().sum_to(inputs[1].shape())),
        ]
    }
}

struct MulOp;
impl Op for MulOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            need!(inputs, 0, g.mul(&inputs[1]).sum_to(inputs[0].shape())),
            need!(inputs, 1, g.mul(&inputs[0]).sum_to(inputs[1].shape())),
        ]
    }
}

struct DivOp;
impl Op for DivOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            need!(inputs, 0, g.div(b).sum_to(a.shape())),
            need!(inputs, 1, g.mul(a).div(&b.mul(b)).neg().sum_to(b.shape())),
        ]
    }
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
}

struct AddScalarOp;
impl Op for AddScalarOp {
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

struct ExpOp;
impl Op for ExpOp {
    fn backward(&self, _inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(out))]
    }
}

struct LnOp;
impl Op for LnOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.div(&inputs[0]))]
    }
}

struct PowOp(f64);
impl Op for PowOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let p = self.0;
        vec![Some(g.mul(&inputs[0].powf(p - 1.0)).scale(p))]
    }
}

struct SinOp;
impl Op for SinOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&inputs[0].cos()))]
    }
}

struct CosOp;
impl Op for CosOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&inputs[0].sin()).neg())]
    }
}

struct SigmoidOp;
impl Op for SigmoidOp {
    fn backward(&self, _inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let one_minus = out.neg().add_scalar(1.0);
        vec![Some(g.mul(out).mul(&one_minus))]
    }
}

struct TanhOp;
impl Op for TanhOp {
    fn backward(&self, _inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let d = out.mul(out).neg().add_scalar(1.0);
        vec![Some(g.mul(&d))]
    }
}

struct SoftplusOp;
impl Op for SoftplusOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&inputs[0].sigmoid()))]
    }
}

/// Multiplies the incoming gradient by a constant mask (piecewise-linear ops).
struct MaskOp(Rc<Vec<f64>>);
impl Op for MaskOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mask = Tensor::from_vec(self.0.as_ref().clone(), inputs[0].shape());
        vec![Some(g.mul(&mask))]
    }
}

/// Elementwise op with a caller-supplied derivative. First order only: the
/// derivative enters the backward pass as a constant.
struct ConstDerivOp(Vec<f64>);
impl Op for ConstDerivOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let d = Tensor::from_vec(self.0.clone(), inputs[0].shape());
        vec![Some(g.mul(&d))]
    }
}

struct ReshapeOp;
impl Op for ReshapeOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(inputs[0].shape()))]
    }
}

struct PermuteOp(Vec<usize>);
impl Op for PermuteOp {
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        vec![Some(g.permute(&inv))]
    }
}

struct BroadcastOp;
impl Op for BroadcastOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_to(inputs[0].shape()))]
    }
}

struct SumToOp;
impl Op for SumToOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(inputs[0].shape()))]
    }
}

struct TakeOp(IndexMap);
impl Op for TakeOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.scatter_add(&self.0, inputs[0].shape()))]
    }
}

struct ScatterOp(IndexMap);
impl Op for ScatterOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.take(&self.0, inputs[0].shape()))]
    }
}

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}
impl Op for ConcatOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        self.sizes
            .iter()
            .zip(inputs)
            .map(|(&n, inp)| {
                let piece = inp.requires_grad().then(|| g.narrow(self.axis, start, n));
                start += n;
                piece
            })
            .collect()
    }
}

struct MatmulOp {
    ta: bool,
    tb: bool,
}
impl Op for MatmulOp {
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = need!(
            inputs,
            0,
            if self.ta {
                b.matmul_ex(g, self.tb, true)
            } else {
                g.matmul_ex(b, false, !self.tb)
            }
        );
        let gb = need!(
            inputs,
            1,
            if self.tb {
                g.matmul_ex(a, true, self.ta)
            } else {
                a.matmul_ex(g, !self.ta, false)
            }
        );
        vec![ga, gb]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |x, y| x + y);
        Tensor::from_op(d, &s, vec![self.clone(), other.clone()], AddOp)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |x, y| x - y);
        Tensor::from_op(d, &s, vec![self.clone(), other.clone()], SubOp)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |x, y| x * y);
        Tensor::from_op(d, &s, vec![self.clone(), other.clone()], MulOp)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |x, y| x / y);
        Tensor::from_op(d, &s, vec![self.clone(), other.clone()], DivOp)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(unary_kernel(self, |x| x * c), self.shape(), vec![self.clone()], ScaleOp(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(unary_kernel(self, |x| x + c), self.shape(), vec![self.clone()], AddScalarOp)
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(unary_kernel(self, f64::exp), self.shape(), vec![self.clone()], ExpOp)
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(unary_kernel(self, f64::ln), self.shape(), vec![self.clone()], LnOp)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        Tensor::from_op(unary_kernel(self, |x| x.powf(p)), self.shape(), vec![self.clone()], PowOp(p))
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sin(&self) -> Tensor {
        Tensor::from_op(unary_kernel(self, f64::sin), self.shape(), vec![self.clone()], SinOp)
    }

    pub fn cos(&self) -> Tensor {
        Tensor::from_op(unary_kernel(self, f64::cos), self.shape(), vec![self.clone()], CosOp)
    }

    pub fn sigmoid(&self) -> Tensor {
        let d = unary_kernel(self, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Tensor::from_op(d, self.shape(), vec![self.clone()], SigmoidOp)
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(unary_kernel(self, f64::tanh), self.shape(), vec![self.clone()], TanhOp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        let d = unary_kernel(self, |x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        Tensor::from_op(d, self.shape(), vec![self.clone()], SoftplusOp)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask: Vec<f64> = self.data().iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect();
        let d = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Tensor::from_op(d, self.shape(), vec![self.clone()], MaskOp(Rc::new(mask)))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let mask: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            .collect();
        let d = unary_kernel(self, |x| x.clamp(lo, hi));
        Tensor::from_op(d, self.shape(), vec![self.clone()], MaskOp(Rc::new(mask)))
    }

    /// Applies `f` elementwise with derivative `df`. The derivative is treated
    /// as a constant in the backward pass, so this op supports first-order
    /// gradients only.
    pub fn map_first_order(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Tensor {
        let d = unary_kernel(self, f);
        let deriv = unary_kernel(self, df);
        Tensor::from_op(d, self.shape(), vec![self.clone()], ConstDerivOp(deriv))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        Tensor::from_op(self.data().to_vec(), shape, vec![self.clone()], ReshapeOp)
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank());
        let in_shape = self.shape();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(in_shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; out_shape.len()];
        let src = self.data();
        let mut d = vec![0.0; self.numel()];
        for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| d[o] = src[i]);
        Tensor::from_op(d, &out_shape, vec![self.clone()], PermuteOp(axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Tensor {
        let r = self.rank();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let out = broadcast_shape(self.shape(), shape);
        assert_eq!(out, shape, "cannot broadcast {:?} to {:?}", self.shape(), shape);
        let sa = broadcast_strides(self.shape(), shape);
        let zero = vec![0; shape.len()];
        let src = self.data();
        let mut d = vec![0.0; numel(shape)];
        for_each_broadcast(shape, &sa, &zero, |o, i, _| d[o] = src[i]);
        Tensor::from_op(d, shape, vec![self.clone()], BroadcastOp)
    }

    /// Sums over the axes along which `shape` was broadcast to produce `self`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let full = self.shape().to_vec();
        let sa = broadcast_strides(shape, &full);
        let zero = vec![0; full.len()];
        let src = self.data();
        let mut d = vec![0.0; numel(shape)];
        if numel(shape) == 1 {
            d[0] = src.iter().sum();
        } else {
            for_each_broadcast(&full, &sa, &zero, |o, i, _| d[i] += src[o]);
        }
        Tensor::from_op(d, shape, vec![self.clone()], SumToOp)
    }

    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    /// `out[i] = self.flat[idx[i]]`, zero where the index is negative.
    pub fn take(&self, idx: &IndexMap, out_shape: &[usize]) -> Tensor {
        assert_eq!(idx.len(), numel(out_shape), "take index length vs output shape");
        let src = self.data();
        let d = if idx.prefers_runs() {
            let mut d = vec![0.0; idx.len()];
            for r in idx.runs() {
                if r.src >= 0 {
                    let s = r.src as usize;
                    d[r.out..r.out + r.len].copy_from_slice(&src[s..s + r.len]);
                }
            }
            d
        } else {
            idx.iter().map(|&i| if i >= 0 { src[i as usize] } else { 0.0 }).collect()
        };
        Tensor::from_op(d, out_shape, vec![self.clone()], TakeOp(idx.clone()))
    }

    /// Adjoint of `take`: accumulates `self.flat[i]` into `out[idx[i]]`.
    pub fn scatter_add(&self, idx: &IndexMap, out_shape: &[usize]) -> Tensor {
        assert_eq!(idx.len(), self.numel(), "scatter index length vs input");
        let src = self.data();
        let mut d = vec![0.0; numel(out_shape)];
        if idx.prefers_runs() {
            // same per-element accumulation order as the plain loop
            for r in idx.runs() {
                if r.src >= 0 {
                    let s = r.src as usize;
                    for (o, v) in d[s..s + r.len].iter_mut().zip(&src[r.out..r.out + r.len]) {
                        *o += v;
                    }
                }
            }
        } else {
            for (k, &i) in idx.iter().enumerate() {
                if i >= 0 {
                    d[i as usize] += src[k];
                }
            }
        }
        Tensor::from_op(d, out_shape, vec![self.clone()], ScatterOp(idx.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_ex(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes the last two
    /// axes. Both operands are rank 2, or both rank 3 with equal batch.
    pub fn matmul_ex(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (a, b) = (self, other);
        assert_eq!(a.rank(), b.rank(), "matmul rank mismatch {:?} {:?}", a.shape(), b.shape());
        assert!(a.rank() == 2 || a.rank() == 3, "matmul needs rank 2 or 3");
        let batched = a.rank() == 3;
        let batch = if batched { a.dim(0) } else { 1 };
        if batched {
            assert_eq!(b.dim(0), batch, "matmul batch mismatch");
        }
        let r = a.rank();
        let (ar, ac) = (a.dim(r - 2), a.dim(r - 1));
        let (br, bc) = (b.dim(r - 2), b.dim(r - 1));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape());
        let mut out = vec![0.0; batch * m * n];
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        if m > 0 && n > 0 && k > 0 {
            for bi in 0..batch {
                let pa = &a.data()[bi * ar * ac..];
                let pb = &b.data()[bi * br * bc..];
                let pc = &mut out[bi * m * n..];
                // SAFETY: the strides describe matrices fully contained in
                // the slices above, and `pc` has room for m*n values.
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        k,
                        n,
                        1.0,
                        pa.as_ptr(),
                        rsa,
                        csa,
                        pb.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        pc.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let shape: Vec<usize> = if batched { vec![batch, m, n] } else { vec![m, n] };
        Tensor::from_op(out, &shape, vec![a.clone(), b.clone()], MatmulOp { ta, tb })
    }

    /// Contiguous sub-range along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let idx = IndexMap::narrow(self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        self.take(&idx, &shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(&shape).enumerate() {
                assert!(d == axis || a == b, "concat extent mismatch on axis {d}");
            }
        }
        shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
        let outer: usize = shape[..axis].iter().product();
        let mut d = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.numel() / outer.max(1);
                d.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let sizes = parts.iter().map(|p| p.dim(axis)).collect();
        Tensor::from_op(d, &shape, parts.to_vec(), ConcatOp { axis, sizes })
    }

    /// Dot product of two tensors of equal shape, as a scalar tensor.
    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.mul(other).sum()
    }
}
