use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::layout::{self, ZERO};
use super::param::{ParamId, ParamStore};
use super::{cst, gemm, Float, Tensor};
use crate::error::{dim_err, Error, Result};

/// Additive attention-mask value standing in for minus infinity.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
        b_batched: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather(Var, Arc<Vec<u32>>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    ConcatLast(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Scalar-valued fused op whose local gradient was computed in forward.
    FusedScalar(Var, Vec<T>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient of `v`, or zeros if `v` did not participate in the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return dim_err(format!("{what}: shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation, used identically in forward and backward
    let k = cst::<T>((2.0 / std::f64::consts::PI).sqrt());
    let c = cst::<T>(0.044715);
    let half = cst::<T>(0.5);
    let one = T::one();
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * k * (one + cst::<T>(3.0) * c * x * x);
    (y, dy)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Leaf input; gradients are tracked when `requires_grad` is set.
    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter as a gradient-tracking leaf (once per graph).
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push_arc(store.value_arc(id), Op::Leaf, true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Parameters bound on this graph and their leaf handles.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|(p, _)| p.index());
        out
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va.shape(), vb.shape(), "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add_suffix(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("add_suffix: {sb:?} is not a suffix of {sa:?}"));
        }
        let inner = vb.numel();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::AddSuffix(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va.shape(), vb.shape(), "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = cst::<T>(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), self.rg(a))
    }

    /// `[.., m, k] x [k, n]` (broadcast) or `[.., m, k] x [.., k, n]` (batched).
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] with the last two axes of `b` transposed.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let mismatch = || {
            Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}{}",
                if trans_b { " (b transposed)" } else { "" }
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];
        let batch: usize = a_batch.iter().product();
        let b_batched = if b_batch.is_empty() {
            false
        } else if b_batch == a_batch {
            true
        } else {
            return Err(mismatch());
        };
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        if b_batched {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        } else {
            gemm(batch * m, k, n, va.data(), false, vb.data(), trans_b, &mut out, false);
        }
        let out = Tensor::new(out_shape, out)?;
        let op = Op::Matmul {
            a,
            b,
            trans_b,
            b_batched,
            batch,
            m,
            k,
            n,
        };
        Ok(self.push(out, op, self.rg(a) || self.rg(b)))
    }

    /// Generic data movement: `out[i] = x[map[i]]` (zero for [`layout::ZERO`]).
    pub fn gather(&self, x: Var, map: Vec<u32>, shape: &[usize]) -> Result<Var> {
        self.gather_shared(x, Arc::new(map), shape)
    }

    pub fn gather_shared(&self, x: Var, map: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = map.iter().find(|&&i| i != ZERO && i as usize >= vx.numel()) {
            return dim_err(format!("gather index {bad} out of range for {:?}", vx.shape()));
        }
        let out = vx.gather(&map, shape)?;
        Ok(self.push(out, Op::Gather(x, map), self.rg(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::clone(&vx).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.rg(x)))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return dim_err(format!("permute axes {axes:?} invalid for {shape:?}"));
        }
        let (map, out_shape) = layout::permute(&shape, axes);
        self.gather(x, map, &out_shape)
    }

    /// Softmax over the last axis with max subtraction. `MASK_NEG` or `-inf`
    /// logits come out as exact zeros; NaN inputs propagate.
    pub fn softmax_lastdim(&self, x: Var) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().expect("rank >= 1");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x), self.rg(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *vx.shape().last().expect("rank >= 1");
        if vg.shape() != [c] || vb.shape() != [c] {
            return dim_err(format!(
                "layer_norm: affine shapes {:?}/{:?} for input {:?}",
                vg.shape(),
                vb.shape(),
                vx.shape()
            ));
        }
        let rows = vx.numel() / c;
        let eps = cst::<T>(eps);
        let inv_c = cst::<T>(1.0 / c as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), self.rg(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), self.rg(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), self.rg(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (cst::<T>(lo), cst::<T>(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi), self.rg(x))
    }

    /// 2-D cross-correlation on `[B, C_in, H, W]` with `[C_out, C_in, kH, kW]` weights.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return dim_err(format!("conv2d: input {sx:?} with weight {sw:?}, stride {stride}"));
        }
        let (bs, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return dim_err(format!(
                "conv2d: output size not integral for input {sx:?}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            ));
        }
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [cout] {
                return dim_err(format!("conv2d: bias {sb:?} for {cout} output channels"));
            }
        }
        let (ho, wo) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
        let ck = cin * kh * kw;
        let plane = ho * wo;
        let mut cols = vec![T::zero(); bs * ck * plane];
        for bi in 0..bs {
            let img = &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let col = &mut cols[bi * ck * plane..(bi + 1) * ck * plane];
            im2col(img, cin, h, wd, kh, kw, stride, pad, ho, wo, col);
        }
        let mut out = vec![T::zero(); bs * cout * plane];
        for bi in 0..bs {
            let o = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
            if let Some(b) = b {
                let vb = self.value(b);
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(vb.data()[co]);
                }
            }
            gemm(
                cout,
                ck,
                plane,
                vw.data(),
                false,
                &cols[bi * ck * plane..(bi + 1) * ck * plane],
                false,
                o,
                b.is_some(),
            );
        }
        let out = Tensor::new(vec![bs, cout, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return dim_err(format!("concat_last: shapes {sa:?} and {sb:?}"));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = va.numel() / ca;
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank") = ca + cb;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatLast(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>() / cst::<T>(vx.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), self.rg(x))
    }

    /// Penalty-reduced focal loss over a heatmap.
    ///
    /// Positives are cells where `target == 1` exactly and contribute
    /// `(1-p)^alpha log p`; every other cell contributes
    /// `(1-y)^gamma p^alpha log(1-p)`. The sum is negated and divided by
    /// `max(1, #positives)`. `pred` must lie strictly inside (0, 1).
    pub fn focal_loss(&self, pred: Var, target: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Var> {
        let vp = self.value(pred);
        same_shape(vp.shape(), target.shape(), "focal_loss")?;
        let (a, gm) = (cst::<T>(alpha), cst::<T>(gamma));
        let one = T::one();
        let npos = target.data().iter().filter(|&&y| y == one).count();
        let norm = one / cst::<T>(npos.max(1) as f64);
        let mut total = T::zero();
        let mut grad = vec![T::zero(); vp.numel()];
        for (i, (&p, &y)) in vp.data().iter().zip(target.data()).enumerate() {
            if y == one {
                let q = one - p;
                total += q.powf(a) * p.ln();
                let d = -a * q.powf(a - one) * p.ln() + q.powf(a) / p;
                grad[i] = -d * norm;
            } else {
                let wneg = (one - y).powf(gm);
                let lq = (one - p).ln();
                total += wneg * p.powf(a) * lq;
                let d = wneg * (a * p.powf(a - one) * lq - p.powf(a) / (one - p));
                grad[i] = -d * norm;
            }
        }
        let loss = -total * norm;
        Ok(self.push(Tensor::scalar(loss), Op::FusedScalar(pred, grad), self.rg(pred)))
    }

    /// Masked L1 loss: `sum(mask * |pred - target|) / (C * max(1, #mask cells))`
    /// for `pred, target: [C, H, W]` and `mask: [1, H, W]`.
    pub fn masked_l1(&self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let vp = self.value(pred);
        same_shape(vp.shape(), target.shape(), "masked_l1")?;
        let sp = vp.shape();
        if sp.len() != 3 || mask.shape() != [1, sp[1], sp[2]] {
            return dim_err(format!("masked_l1: pred {sp:?} with mask {:?}", mask.shape()));
        }
        let plane = sp[1] * sp[2];
        let npos = mask.data().iter().filter(|&&m| m > T::zero()).count();
        let norm = T::one() / cst::<T>((sp[0] * npos.max(1)) as f64);
        let mut total = T::zero();
        let mut grad = vec![T::zero(); vp.numel()];
        for (i, (&p, &t)) in vp.data().iter().zip(target.data()).enumerate() {
            let m = mask.data()[i % plane];
            if m > T::zero() {
                let d = p - t;
                total += m * d.abs();
                let s = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                grad[i] = m * s * norm;
            }
        }
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::FusedScalar(pred, grad),
            self.rg(pred),
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("unknown node {}", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            backward_node(&nodes, node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn acc<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    f(slot);
}

fn backward_node<T: Float>(nodes: &[Node<T>], node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                acc(nodes, grads, v, |g| {
                    for (x, &d) in g.iter_mut().zip(gout) {
                        *x += d;
                    }
                });
            }
        }
        Op::AddSuffix(a, b) => {
            acc(nodes, grads, *a, |g| {
                for (x, &d) in g.iter_mut().zip(gout) {
                    *x += d;
                }
            });
            acc(nodes, grads, *b, |g| {
                let inner = g.len();
                for chunk in gout.chunks(inner) {
                    for (x, &d) in g.iter_mut().zip(chunk) {
                        *x += d;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |g| {
                for ((x, &d), &y) in g.iter_mut().zip(gout).zip(vb.data()) {
                    *x += d * y;
                }
            });
            acc(nodes, grads, *b, |g| {
                for ((x, &d), &y) in g.iter_mut().zip(gout).zip(va.data()) {
                    *x += d * y;
                }
            });
        }
        Op::Scale(a, c) => {
            acc(nodes, grads, *a, |g| {
                for (x, &d) in g.iter_mut().zip(gout) {
                    *x += d * *c;
                }
            });
        }
        &Op::Matmul {
            a,
            b,
            trans_b,
            b_batched,
            batch,
            m,
            k,
            n,
        } => {
            let (va, vb) = (val(a), val(b));
            if b_batched {
                acc(nodes, grads, a, |g| {
                    for bi in 0..batch {
                        let dc = &gout[bi * m * n..(bi + 1) * m * n];
                        let bm = &vb.data()[bi * k * n..(bi + 1) * k * n];
                        gemm(m, n, k, dc, false, bm, !trans_b, &mut g[bi * m * k..(bi + 1) * m * k], true);
                    }
                });
                acc(nodes, grads, b, |g| {
                    for bi in 0..batch {
                        let dc = &gout[bi * m * n..(bi + 1) * m * n];
                        let am = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let gb = &mut g[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, dc, true, am, false, gb, true);
                        } else {
                            gemm(k, m, n, am, true, dc, false, gb, true);
                        }
                    }
                });
            } else {
                let mm = batch * m;
                acc(nodes, grads, a, |g| {
                    gemm(mm, n, k, gout, false, vb.data(), !trans_b, g, true);
                });
                acc(nodes, grads, b, |g| {
                    if trans_b {
                        gemm(n, mm, k, gout, true, va.data(), false, g, true);
                    } else {
                        gemm(k, mm, n, va.data(), true, gout, false, g, true);
                    }
                });
            }
        }
        Op::Gather(x, map) => {
            acc(nodes, grads, *x, |g| {
                for (&src, &d) in map.iter().zip(gout) {
                    if src != ZERO {
                        g[src as usize] += d;
                    }
                }
            });
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, |g| {
                for (x, &d) in g.iter_mut().zip(gout) {
                    *x += d;
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.clone();
            let c = *y.shape().last().expect("rank");
            acc(nodes, grads, *x, |g| {
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(gout.chunks(c)) {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let vg = val(*gamma);
            let c = vg.numel();
            let inv_c = cst::<T>(1.0 / c as f64);
            acc(nodes, grads, *x, |g| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let dy = &gout[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        let dxh = dy[j] * vg.data()[j];
                        mean_d += dxh;
                        mean_dx += dxh * xh[j];
                    }
                    mean_d *= inv_c;
                    mean_dx *= inv_c;
                    for j in 0..c {
                        let dxh = dy[j] * vg.data()[j];
                        g[r * c + j] += rs * (dxh - mean_d - xh[j] * mean_dx);
                    }
                }
            });
            acc(nodes, grads, *gamma, |g| {
                for (dy, xh) in gout.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        g[j] += dy[j] * xh[j];
                    }
                }
            });
            acc(nodes, grads, *beta, |g| {
                for dy in gout.chunks(c) {
                    for j in 0..c {
                        g[j] += dy[j];
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let vx = val(*x);
            acc(nodes, grads, *x, |g| {
                for ((gr, &d), &xv) in g.iter_mut().zip(gout).zip(vx.data()) {
                    *gr += d * gelu_parts(xv).1;
                }
            });
        }
        Op::Relu(x) => {
            let vx = val(*x);
            acc(nodes, grads, *x, |g| {
                for ((gr, &d), &xv) in g.iter_mut().zip(gout).zip(vx.data()) {
                    if xv > T::zero() {
                        *gr += d;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.clone();
            acc(nodes, grads, *x, |g| {
                for ((gr, &d), &yv) in g.iter_mut().zip(gout).zip(y.data()) {
                    *gr += d * yv * (T::one() - yv);
                }
            });
        }
        Op::Clamp(x, lo, hi) => {
            let vx = val(*x);
            acc(nodes, grads, *x, |g| {
                for ((gr, &d), &xv) in g.iter_mut().zip(gout).zip(vx.data()) {
                    if xv >= *lo && xv <= *hi {
                        *gr += d;
                    }
                }
            });
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            cols,
        } => {
            let (vx, vw) = (val(*x), val(*w));
            let (sx, sw) = (vx.shape(), vw.shape());
            let (bs, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
            let so = node.value.shape();
            let (ho, wo) = (so[2], so[3]);
            let plane = ho * wo;
            let ck = cin * kh * kw;
            if let Some(b) = b {
                acc(nodes, grads, *b, |g| {
                    for bi in 0..bs {
                        for co in 0..cout {
                            let off = (bi * cout + co) * plane;
                            g[co] += gout[off..off + plane].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            acc(nodes, grads, *w, |g| {
                for bi in 0..bs {
                    let dy = &gout[bi * cout * plane..(bi + 1) * cout * plane];
                    let col = &cols[bi * ck * plane..(bi + 1) * ck * plane];
                    gemm(cout, plane, ck, dy, false, col, true, g, true);
                }
            });
            acc(nodes, grads, *x, |g| {
                let mut dcol = vec![T::zero(); ck * plane];
                for bi in 0..bs {
                    let dy = &gout[bi * cout * plane..(bi + 1) * cout * plane];
                    gemm(ck, cout, plane, vw.data(), true, dy, false, &mut dcol, false);
                    let gi = &mut g[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    col2im(&dcol, cin, h, wd, kh, kw, *stride, *pad, ho, wo, gi);
                }
            });
        }
        Op::ConcatLast(a, b) => {
            let (ca, cb) = (
                *nodes[a.0].value.shape().last().expect("rank"),
                *nodes[b.0].value.shape().last().expect("rank"),
            );
            let ct = ca + cb;
            acc(nodes, grads, *a, |g| {
                for (gr, dr) in g.chunks_mut(ca).zip(gout.chunks(ct)) {
                    for (x, &d) in gr.iter_mut().zip(&dr[..ca]) {
                        *x += d;
                    }
                }
            });
            acc(nodes, grads, *b, |g| {
                for (gr, dr) in g.chunks_mut(cb).zip(gout.chunks(ct)) {
                    for (x, &d) in gr.iter_mut().zip(&dr[ca..]) {
                        *x += d;
                    }
                }
            });
        }
        Op::Sum(x) => {
            let d = gout[0];
            acc(nodes, grads, *x, |g| g.iter_mut().for_each(|v| *v += d));
        }
        Op::Mean(x) => {
            let n = cst::<T>(nodes[x.0].value.numel() as f64);
            let d = gout[0] / n;
            acc(nodes, grads, *x, |g| g.iter_mut().for_each(|v| *v += d));
        }
        Op::FusedScalar(x, local) => {
            let d = gout[0];
            acc(nodes, grads, *x, |g| {
                for (v, &l) in g.iter_mut().zip(local) {
                    *v += d * l;
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    img: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            img[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
