use std::cell::Cell;
use std::ops::Range;
use std::sync::Arc;

use super::kernels::{bilinear_taps, ConvGeom};
use super::{strides, Element, Tensor};
use crate::error::{dim_err, Error, Result};

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when enabled, the matmul backward rule emits the negated
/// gradient for its left operand on the current thread. Used by the
/// self-check suite to prove that gradient checks can fail.
pub fn set_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

fn backward_fault() -> bool {
    BACKWARD_FAULT.with(|f| f.get())
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, tb: bool, shared: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    AddBroadcast { x: Var, b: Var, len: usize, inner: usize },
    MulBroadcast { x: Var, g: Var, len: usize, inner: usize },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom, c_out: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, c: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, n: usize },
    GlobalAvgPool { x: Var, hw: usize },
    Upsample { x: Var, mode: UpsampleMode, h: usize, w: usize },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Reshape(Var),
    Concat { parts: Vec<Var>, lens: Vec<usize>, outer: usize, inner: usize },
    Sum(Var),
    SumLast { x: Var, n: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and replays them backwards.
///
/// A tape serves exactly one forward/backward pass: [`Tape::backward`]
/// may run once, after which [`Tape::reset`] must be called.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    /// Clears all recorded nodes and gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when
    /// `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(&shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&a| f(a)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, rg, op)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |a| a.sqrt())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A));
        let half = T::from_f64_lossy(0.5);
        self.unary(x, Op::Gelu(x), |a| half * a * (T::one() + (c * (a + k * a * a * a)).tanh()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |a| T::one() / (T::one() + (-a).exp()))
    }

    fn broadcast_geom(&self, name: &str, x: Var, v: Var, axes: Range<usize>) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        if axes.is_empty() || axes.end > shape.len() {
            return dim_err(format!("{name}: axes {axes:?} out of range for {shape:?}"));
        }
        let len = shape[axes.clone()].iter().product();
        if self.value(v).numel() != len {
            return dim_err(format!(
                "{name}: operand {:?} does not match axes {axes:?} of {shape:?}",
                self.shape(v)
            ));
        }
        Ok((len, shape[axes.end..].iter().product()))
    }

    /// `x + b` with `b` broadcast along `axis` of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.add_broadcast_axes(x, b, axis..axis + 1)
    }

    /// `x + b` where `b` spans the contiguous axis range `axes` of `x` and is
    /// repeated over all other axes.
    pub fn add_broadcast_axes(&mut self, x: Var, b: Var, axes: Range<usize>) -> Result<Var> {
        let (len, inner) = self.broadcast_geom("add_broadcast", x, b, axes)?;
        let (xv, bv) = (self.value(x), self.value(b).data());
        let data = xv.data().iter().enumerate().map(|(i, &a)| a + bv[(i / inner) % len]).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, rg, Op::AddBroadcast { x, b, len, inner }))
    }

    /// `x ⊙ g` with `g` broadcast along `axis` of `x`.
    pub fn mul_broadcast(&mut self, x: Var, g: Var, axis: usize) -> Result<Var> {
        let (len, inner) = self.broadcast_geom("mul_broadcast", x, g, axis..axis + 1)?;
        let (xv, gv) = (self.value(x), self.value(g).data());
        let data = xv.data().iter().enumerate().map(|(i, &a)| a * gv[(i / inner) % len]).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, rg, Op::MulBroadcast { x, g, len, inner }))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a shared `k×n` matrix (leading axes of `a` act as extra
    /// rows) or has the same leading axes as `a` (batched product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` where `b` has shape `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let shared = sb.len() == 2 && !tb;
        let (batch, m_eff) = if shared {
            (1, sa[..sa.len() - 1].iter().product::<usize>())
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            (sa[..sa.len() - 2].iter().product::<usize>(), m)
        };
        let mut out = vec![T::zero(); batch * m_eff * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let bs = if tb { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m_eff,
                    k,
                    n,
                    &av[i * m_eff * k..],
                    (k as isize, 1),
                    &bv[i * k * n..],
                    bs,
                    &mut out[i * m_eff * n..(i + 1) * m_eff * n],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMul { a, b, batch, m: m_eff, k, n, tb, shared }))
    }

    /// Cross-correlation of `x: C_in×H×W` with `kernel: C_out×C_in×k×k`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != sk[3] {
            return dim_err(format!("conv2d: input {sx:?} incompatible with kernel {sk:?}"));
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sk[2], stride, padding).ok_or_else(|| {
            Error::Dimension(format!(
                "conv2d: input {sx:?} with kernel {} stride {stride} padding {padding} gives a non-integral output extent",
                sk[2]
            ))
        })?;
        let c_out = sk[0];
        let cols = geom.im2col(self.value(x).data());
        let mut out = vec![T::zero(); c_out * geom.out_len()];
        T::gemm(
            c_out,
            geom.patch_len(),
            geom.out_len(),
            self.value(kernel).data(),
            (geom.patch_len() as isize, 1),
            &cols,
            (geom.out_len() as isize, 1),
            &mut out,
            false,
        );
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, rg, Op::Conv2d { x, kernel, geom, c_out }))
    }

    /// Normalizes over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last axis of {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm: eps must be positive".into()));
        }
        let eps = T::from_f64_lossy(eps);
        let ct = T::from_usize(c).unwrap();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / ct;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / ct;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, c, xhat, rstd }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                total = total + *a;
            }
            for a in row.iter_mut() {
                *a = *a / total;
            }
        }
        let value = Tensor::new(xv.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(value, rg, Op::Softmax { x, n })
    }

    /// Per-channel spatial mean of `C×H×W`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return dim_err(format!("global_avg_pool expects C×H×W, got {shape:?}"));
        }
        let hw = shape[1] * shape[2];
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(&shape[..1], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::GlobalAvgPool { x, hw }))
    }

    /// Doubles the spatial extents of `C×H×W`.
    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return dim_err(format!("upsample2x expects C×H×W, got {shape:?}"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * ho * wo];
        match mode {
            UpsampleMode::Nearest => {
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[(ch * ho + oy) * wo + ox] = xv[(ch * h + oy / 2) * w + ox / 2];
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                let ytaps: Vec<_> = (0..ho).map(|o| bilinear_taps(o, h)).collect();
                let xtaps: Vec<_> = (0..wo).map(|o| bilinear_taps(o, w)).collect();
                for ch in 0..c {
                    let plane = &xv[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                        let ty = T::from_f64_lossy(ty);
                        for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                            let tx = T::from_f64_lossy(tx);
                            let top = plane[y0 * w + x0] * (T::one() - tx) + plane[y0 * w + x1] * tx;
                            let bot = plane[y1 * w + x0] * (T::one() - tx) + plane[y1 * w + x1] * tx;
                            out[(ch * ho + oy) * wo + ox] = top * (T::one() - ty) + bot * ty;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Upsample { x, mode, h, w }))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatter-adds, so
    /// repeated indices broadcast.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return dim_err(format!("gather: index {bad} out of range for {} elements", xv.len()));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Gather { x, index }))
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("permute: {perm:?} is not a permutation of the axes of {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            index.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(x, Arc::new(index), &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return dim_err(format!("concat: axis {axis} out of range for {first:?}"));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!("concat: {s:?} incompatible with {first:?} along axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::Concat { parts: parts.to_vec(), lens, outer, inner }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sums over the last axis, dropping it (rank-1 inputs give `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let data = self.value(x).data().chunks(n).map(|r| r.iter().copied().sum::<T>()).collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let value = Tensor::new(&out_shape, data).unwrap();
        let rg = self.rg(x);
        self.push(value, rg, Op::SumLast { x, n })
    }

    /// Reverse pass from a one-element `loss`. Fills gradients for every
    /// node that requires them; may run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it before recording a new pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            if let Some(g) = grads[id].take() {
                self.propagate(id, &g, &mut grads);
                grads[id] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let out = nodes[id].value.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] / bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] - g[i] * out[i] / bv[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c)),
            Op::AddScalar(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)),
            Op::Sqrt(x) => {
                let half = T::from_f64_lossy(0.5);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * half / out[i];
                    }
                })
            }
            Op::Relu(x) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    if out[i] > T::zero() {
                        d[i] = d[i] + g[i];
                    }
                }
            }),
            Op::Gelu(x) => {
                let xv = val(*x);
                let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A));
                let (half, three) = (T::from_f64_lossy(0.5), T::from_f64_lossy(3.0));
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let a = xv[i];
                        let t = (c * (a + k * a * a * a)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * a * a);
                        d[i] = d[i] + g[i] * (half * (T::one() + t) + half * a * dt);
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * out[i] * (T::one() - out[i]);
                }
            }),
            Op::AddBroadcast { x, b, len, inner } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                acc(*b, &mut |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        let j = (i / inner) % len;
                        d[j] = d[j] + gi;
                    }
                });
            }
            Op::MulBroadcast { x, g: gate, len, inner } => {
                let (xv, gv) = (val(*x), val(*gate));
                acc(*x, &mut |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        d[i] = d[i] + gi * gv[(i / inner) % len];
                    }
                });
                acc(*gate, &mut |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        let j = (i / inner) % len;
                        d[j] = d[j] + gi * xv[i];
                    }
                });
            }
            Op::MatMul { a, b, batch, m, k, n, tb, shared } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                let flip = backward_fault();
                acc(*a, &mut |d| {
                    // dA = G · op(B)ᵀ
                    let bs = if *tb { (k as isize, 1) } else { (1, n as isize) };
                    let mut tmp = vec![T::zero(); m * k];
                    for i in 0..*batch {
                        T::gemm(m, n, k, &g[i * m * n..], (n as isize, 1), &bv[i * k * n..], bs, &mut tmp, false);
                        let dst = &mut d[i * m * k..(i + 1) * m * k];
                        for (dv, &t) in dst.iter_mut().zip(&tmp) {
                            *dv = if flip { *dv - t } else { *dv + t };
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..];
                        let ai = &av[i * m * k..];
                        let boff = if *shared { 0 } else { i * k * n };
                        if *tb {
                            // dB (n×k) = Gᵀ · A
                            T::gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), &mut d[boff..boff + n * k], true);
                        } else {
                            // dB (k×n) = Aᵀ · G
                            T::gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), &mut d[boff..boff + k * n], true);
                        }
                    }
                });
            }
            Op::Conv2d { x, kernel, geom, c_out } => {
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let kv = val(*kernel);
                let flip = backward_fault();
                acc(*kernel, &mut |d| {
                    let cols = geom.im2col(val(*x));
                    // dK = G · colsᵀ
                    T::gemm(*c_out, ol, pl, g, (ol as isize, 1), &cols, (1, ol as isize), d, true);
                });
                acc(*x, &mut |d| {
                    // dcols = Kᵀ · G
                    let mut dcols = vec![T::zero(); pl * ol];
                    T::gemm(pl, *c_out, ol, kv, (1, pl as isize), g, (ol as isize, 1), &mut dcols, false);
                    if flip {
                        dcols.iter_mut().for_each(|v| *v = -*v);
                    }
                    geom.col2im_add(&dcols, d);
                });
            }
            Op::LayerNorm { x, gamma, beta, c, xhat, rstd } => {
                let c = *c;
                let gv = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (r, gr) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            d[j] = d[j] + gr[j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            d[j] = d[j] + gr[j];
                        }
                    }
                });
                let ct = T::from_usize(c).unwrap();
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let gy = gr[j] * gv[j];
                            m1 = m1 + gy;
                            m2 = m2 + gy * xh[j];
                        }
                        m1 = m1 / ct;
                        m2 = m2 / ct;
                        for j in 0..c {
                            let gy = gr[j] * gv[j];
                            d[r * c + j] = d[r * c + j] + rstd[r] * (gy - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x, n } => acc(*x, &mut |d| {
                for ((dr, gr), yr) in d.chunks_mut(*n).zip(g.chunks(*n)).zip(out.chunks(*n)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..*n {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::GlobalAvgPool { x, hw } => {
                let denom = T::from_usize(*hw).unwrap();
                acc(*x, &mut |d| {
                    for (ch, dc) in d.chunks_mut(*hw).enumerate() {
                        let v = g[ch] / denom;
                        dc.iter_mut().for_each(|a| *a = *a + v);
                    }
                })
            }
            Op::Upsample { x, mode, h, w } => {
                let (h, w) = (*h, *w);
                let (ho, wo) = (2 * h, 2 * w);
                acc(*x, &mut |d| {
                    let c = d.len() / (h * w);
                    match mode {
                        UpsampleMode::Nearest => {
                            for ch in 0..c {
                                for oy in 0..ho {
                                    for ox in 0..wo {
                                        let s = (ch * h + oy / 2) * w + ox / 2;
                                        d[s] = d[s] + g[(ch * ho + oy) * wo + ox];
                                    }
                                }
                            }
                        }
                        UpsampleMode::Bilinear => {
                            let ytaps: Vec<_> = (0..ho).map(|o| bilinear_taps(o, h)).collect();
                            let xtaps: Vec<_> = (0..wo).map(|o| bilinear_taps(o, w)).collect();
                            for ch in 0..c {
                                let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                                    let ty = T::from_f64_lossy(ty);
                                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                                        let tx = T::from_f64_lossy(tx);
                                        let gv = g[(ch * ho + oy) * wo + ox];
                                        let top = gv * (T::one() - ty);
                                        let bot = gv * ty;
                                        plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - tx);
                                        plane[y0 * w + x1] = plane[y0 * w + x1] + top * tx;
                                        plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - tx);
                                        plane[y1 * w + x1] = plane[y1 * w + x1] + bot * tx;
                                    }
                                }
                            }
                        }
                    }
                })
            }
            Op::Gather { x, index } => acc(*x, &mut |d| {
                for (&src, &gi) in index.iter().zip(g) {
                    d[src] = d[src] + gi;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)),
            Op::Concat { parts, lens, outer, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    let chunk = len * inner;
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset..][..chunk];
                            for (dv, &gv) in d[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *dv = *dv + gv;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a = *a + g[0])),
            Op::SumLast { x, n } => acc(*x, &mut |d| {
                for (r, dr) in d.chunks_mut(*n).enumerate() {
                    dr.iter_mut().for_each(|a| *a = *a + g[r]);
                }
            }),
        }
    }
}
