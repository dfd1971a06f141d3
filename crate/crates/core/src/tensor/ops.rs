use super::tape::{Op, Var};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn need_ndim(op: &'static str, t: &Tensor, n: usize) -> Result<()> {
    if t.ndim() != n {
        return shape_err(op, format!("expected {n}-D input, got {:?}", t.shape()));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(
        &self,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape().nodes();
            f(&nodes[self.id()].value)?
        };
        self.tape().push(op, value, name)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.same_tape(other, name)?;
        let value = {
            let nodes = self.tape().nodes();
            f(&nodes[self.id()].value, &nodes[other.id()].value)?
        };
        self.tape().push(op, value, name)
    }

    fn elementwise(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        self.unary(name, op, |a| Ok(a.map(f)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id(), other.id()), |a, b| {
            same_shape("add", a, b)?;
            Ok(zip(a, b, |x, y| x + y))
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id(), other.id()), |a, b| {
            same_shape("sub", a, b)?;
            Ok(zip(a, b, |x, y| x - y))
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id(), other.id()), |a, b| {
            same_shape("mul", a, b)?;
            Ok(zip(a, b, |x, y| x * y))
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.elementwise("scale", Op::Scale(self.id(), c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.elementwise("add_scalar", Op::AddConst(self.id()), |x| x + c)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "matmul", Op::MatMul(self.id(), other.id()), |a, b| {
            need_ndim("matmul", a, 2)?;
            need_ndim("matmul", b, 2)?;
            let (m, k, k2, n) = (a.shape()[0], a.shape()[1], b.shape()[0], b.shape()[1]);
            if k != k2 {
                return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
            }
            Ok(Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n)))
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'t>> {
        self.unary("transpose", Op::Transpose(self.id()), |a| {
            need_ndim("transpose", a, 2)?;
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Ok(Tensor::from_parts(vec![c, r], transpose(a.data(), r, c)))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary("reshape", Op::Reshape(self.id()), |a| a.clone().reshape(shape))
    }

    /// Same-padded, stride-1 convolution with central-difference blending:
    /// `theta = 0` is a vanilla convolution. Input `(B, C, H, W)`, kernel
    /// `(O, C, K, K)` with odd `K`, optional bias `(O)`.
    pub fn conv2d(&self, kernel: &Var<'t>, bias: Option<&Var<'t>>, theta: f64) -> Result<Var<'t>> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
        }
        self.same_tape(kernel, "conv2d")?;
        if let Some(b) = bias {
            self.same_tape(b, "conv2d")?;
        }
        let op = Op::Conv2d {
            x: self.id(),
            w: kernel.id(),
            bias: bias.map(|b| b.id()),
            theta,
        };
        let value = {
            let nodes = self.tape().nodes();
            let x = &nodes[self.id()].value;
            let w = &nodes[kernel.id()].value;
            need_ndim("conv2d", x, 4)?;
            need_ndim("conv2d", w, 4)?;
            if w.shape()[1] != x.shape()[1] || w.shape()[2] != w.shape()[3] || w.shape()[2] % 2 == 0
            {
                return shape_err(
                    "conv2d",
                    format!("input {:?} with kernel {:?}", x.shape(), w.shape()),
                );
            }
            let geom = ConvGeom::new(x.shape(), w.shape());
            let b = match bias {
                Some(b) => {
                    let bt = &nodes[b.id()].value;
                    if bt.numel() != geom.out_ch {
                        return shape_err("conv2d", format!("bias {:?}", bt.shape()));
                    }
                    Some(bt.data())
                }
                None => None,
            };
            Tensor::from_parts(
                vec![geom.batch, geom.out_ch, geom.h, geom.w],
                conv2d_forward(&geom, x.data(), w.data(), b, theta),
            )
        };
        self.tape().push(op, value, "conv2d")
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.elementwise("sigmoid", Op::Sigmoid(self.id()), sigmoid)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.elementwise("relu", Op::Relu(self.id()), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.elementwise("gelu", Op::Gelu(self.id()), gelu)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.elementwise("exp", Op::Exp(self.id()), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.elementwise("log", Op::Log(self.id()), f64::ln)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary("mean", Op::Mean(self.id()), |a| {
            Ok(Tensor::scalar(a.sum() / a.numel() as f64))
        })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id()), |a| Ok(Tensor::scalar(a.sum())))
    }

    /// Concatenation along axis 1 of two 4-D tensors.
    pub fn concat_channels(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "concat_channels", Op::ConcatChannels(self.id(), other.id()), |a, b| {
            need_ndim("concat_channels", a, 4)?;
            need_ndim("concat_channels", b, 4)?;
            let (sa, sb) = (a.shape(), b.shape());
            if sa[0] != sb[0] || sa[2..] != sb[2..] {
                return shape_err("concat_channels", format!("{sa:?} vs {sb:?}"));
            }
            let plane = sa[2] * sa[3];
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for bi in 0..sa[0] {
                data.extend_from_slice(&a.data()[bi * sa[1] * plane..(bi + 1) * sa[1] * plane]);
                data.extend_from_slice(&b.data()[bi * sb[1] * plane..(bi + 1) * sb[1] * plane]);
            }
            Ok(Tensor::from_parts(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data))
        })
    }

    /// Concatenation along axis 1 of two 2-D tensors.
    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "concat_cols", Op::ConcatCols(self.id(), other.id()), |a, b| {
            need_ndim("concat_cols", a, 2)?;
            need_ndim("concat_cols", b, 2)?;
            let (r, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != r {
                return shape_err("concat_cols", format!("{:?} vs {:?}", a.shape(), b.shape()));
            }
            let mut data = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
            }
            Ok(Tensor::from_parts(vec![r, ca + cb], data))
        })
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "concat_rows", Op::ConcatRows(self.id(), other.id()), |a, b| {
            if a.shape()[1..] != b.shape()[1..] {
                return shape_err("concat_rows", format!("{:?} vs {:?}", a.shape(), b.shape()));
            }
            let mut shape = a.shape().to_vec();
            shape[0] += b.shape()[0];
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Ok(Tensor::from_parts(shape, data))
        })
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary("slice_rows", Op::SliceRows(self.id(), start), |a| {
            if start >= end || end > a.shape()[0] {
                return shape_err("slice_rows", format!("{start}..{end} of {:?}", a.shape()));
            }
            let row: usize = a.shape()[1..].iter().product();
            let mut shape = a.shape().to_vec();
            shape[0] = end - start;
            Ok(Tensor::from_parts(shape, a.data()[start * row..end * row].to_vec()))
        })
    }

    /// Channels `start..end` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary("slice_channels", Op::SliceChannels(self.id(), start), |a| {
            need_ndim("slice_channels", a, 4)?;
            let s = a.shape();
            if start >= end || end > s[1] {
                return shape_err("slice_channels", format!("{start}..{end} of {s:?}"));
            }
            let plane = s[2] * s[3];
            let mut data = Vec::with_capacity(s[0] * (end - start) * plane);
            for b in 0..s[0] {
                let base = b * s[1] * plane;
                data.extend_from_slice(&a.data()[base + start * plane..base + end * plane]);
            }
            Ok(Tensor::from_parts(vec![s[0], end - start, s[2], s[3]], data))
        })
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&self) -> Result<Var<'t>> {
        self.unary("l2_norm", Op::L2Norm(self.id()), |a| {
            let n = a.norm();
            if n < NORM_FLOOR {
                return Err(Error::ZeroNorm { op: "l2_norm" });
            }
            Ok(Tensor::scalar(n))
        })
    }

    /// Cosine similarity of two equally shaped tensors, flattened.
    pub fn cosine(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "cosine", Op::Cosine(self.id(), other.id()), |a, b| {
            same_shape("cosine", a, b)?;
            let (na, nb) = (a.norm(), b.norm());
            if na < NORM_FLOOR || nb < NORM_FLOOR {
                return Err(Error::ZeroNorm { op: "cosine" });
            }
            Ok(Tensor::scalar(a.dot(b)? / (na * nb)))
        })
    }

    /// Each row of a 2-D tensor scaled to unit Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        self.unary("normalize_rows", Op::NormalizeRows(self.id()), |a| {
            need_ndim("normalize_rows", a, 2)?;
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(cols) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORM_FLOOR {
                    return Err(Error::ZeroNorm { op: "normalize_rows" });
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.unary("softmax_rows", Op::SoftmaxRows(self.id()), |a| {
            need_ndim("softmax_rows", a, 2)?;
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(cols) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        self.unary("log_softmax_rows", Op::LogSoftmaxRows(self.id()), |a| {
            need_ndim("log_softmax_rows", a, 2)?;
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(cols) {
                let (arg, m) = row
                    .iter()
                    .cloned()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
                // ln(1 + rest) keeps full precision when the max dominates
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != arg)
                    .map(|(_, v)| (v - m).exp())
                    .sum();
                let tail = rest.ln_1p();
                row.iter_mut().for_each(|v| *v = (*v - m) - tail);
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    /// Zero-mean, unit-variance rows of a 2-D tensor (no affine part).
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Var<'t>> {
        self.unary("layer_norm_rows", Op::LayerNormRows(self.id(), eps), |a| {
            need_ndim("layer_norm_rows", a, 2)?;
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(cols) {
                let (mu, inv) = row_stats(row, eps);
                row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    /// Stacks a vector `(d)` into `n` identical rows `(n, d)`.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var<'t>> {
        self.unary("broadcast_rows", Op::BroadcastRows(self.id()), |a| {
            if n == 0 {
                return shape_err("broadcast_rows", "zero rows");
            }
            let d = a.numel();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Ok(Tensor::from_parts(vec![n, d], data))
        })
    }

    /// `(B, 1, H, W) -> (B, c, H, W)` by repetition.
    pub fn repeat_channels(&self, c: usize) -> Result<Var<'t>> {
        self.unary("repeat_channels", Op::RepeatChannels(self.id()), |a| {
            need_ndim("repeat_channels", a, 4)?;
            let s = a.shape();
            if s[1] != 1 || c == 0 {
                return shape_err("repeat_channels", format!("{s:?} to {c} channels"));
            }
            let plane = s[2] * s[3];
            let mut data = Vec::with_capacity(s[0] * c * plane);
            for b in 0..s[0] {
                for _ in 0..c {
                    data.extend_from_slice(&a.data()[b * plane..(b + 1) * plane]);
                }
            }
            Ok(Tensor::from_parts(vec![s[0], c, s[2], s[3]], data))
        })
    }

    /// Output row `i` is input row `perm[i]` (axis 0).
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Var<'t>> {
        self.unary("permute_rows", Op::PermuteRows(self.id(), perm.to_vec()), |a| {
            let n = a.shape()[0];
            let mut seen = vec![false; n];
            if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
            {
                return shape_err("permute_rows", format!("invalid permutation for {n} rows"));
            }
            let row = a.numel() / n;
            let mut data = Vec::with_capacity(a.numel());
            for &p in perm {
                data.extend_from_slice(&a.data()[p * row..(p + 1) * row]);
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    /// Flat-index gather into a 1-D tensor of `idx.len()` elements.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary("gather", Op::Gather(self.id(), idx.to_vec()), |a| {
            if idx.is_empty() || idx.iter().any(|&i| i >= a.numel()) {
                return shape_err("gather", format!("index out of range for {:?}", a.shape()));
            }
            Ok(Tensor::vector(idx.iter().map(|&i| a.data()[i]).collect()))
        })
    }

    // Composite helpers.

    /// `x W + b` for `x (n, in)`, `W (in, out)`, `b (out)`.
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let n = self.shape()[0];
        self.matmul(weight)?.add(&bias.broadcast_rows(n)?)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let cols = x.shape()[1];
    let n = cols as f64;
    let mut out = vec![0.0; x.numel()];
    for ((xr, gr), dst) in x
        .data()
        .chunks(cols)
        .zip(g.data().chunks(cols))
        .zip(out.chunks_mut(cols))
    {
        let (mu, inv) = row_stats(xr, eps);
        let gmean = gr.iter().sum::<f64>() / n;
        let gxhat = xr
            .iter()
            .zip(gr)
            .map(|(x, g)| (x - mu) * inv * g)
            .sum::<f64>()
            / n;
        for ((d, x), g) in dst.iter_mut().zip(xr).zip(gr) {
            *d = inv * (g - gmean - (x - mu) * inv * gxhat);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn normalize_rows_backward(x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let cols = x.shape()[1];
    let mut out = vec![0.0; x.numel()];
    for (((xr, yr), gr), dst) in x
        .data()
        .chunks(cols)
        .zip(y.data().chunks(cols))
        .zip(g.data().chunks(cols))
        .zip(out.chunks_mut(cols))
    {
        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
        for ((d, g), y) in dst.iter_mut().zip(gr).zip(yr) {
            *d = (g - y * gy) / n;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (row, ar) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        axpy_rows(row, ar, b, n);
    }
    out
}

/// `row += sum_p coef[p] * b[p, :]`, four rows of `b` per pass over `row`.
fn axpy_rows(row: &mut [f64], coef: &[f64], b: &[f64], n: usize) {
    let mut quads = coef.chunks_exact(4);
    let mut p = 0;
    for c in quads.by_ref() {
        let (b0, rest) = b[p * n..(p + 4) * n].split_at(n);
        let (b1, rest) = rest.split_at(n);
        let (b2, b3) = rest.split_at(n);
        for j in 0..n {
            row[j] += c[0] * b0[j] + c[1] * b1[j] + c[2] * b2[j] + c[3] * b3[j];
        }
        p += 4;
    }
    for &c in quads.remainder() {
        for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *o += c * bv;
        }
        p += 1;
    }
}

/// `g (m, n) * b^T` where `b` is `(k, n)`: result `(m, k)`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    matmul(g, &transpose(b, k, n), m, n, k)
}

/// `a^T * g` where `a` is `(m, k)` and `g` is `(m, n)`: result `(k, n)`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(&transpose(a, m, k), g, k, m, n)
}

pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn split_channels(g: &[f64], sa: &[usize], sb: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let plane = sa[2] * sa[3];
    let (ca, cb) = (sa[1] * plane, sb[1] * plane);
    let mut ga = Vec::with_capacity(sa[0] * ca);
    let mut gb = Vec::with_capacity(sb[0] * cb);
    for chunk in g.chunks(ca + cb) {
        ga.extend_from_slice(&chunk[..ca]);
        gb.extend_from_slice(&chunk[ca..]);
    }
    (ga, gb)
}

pub(crate) fn split_cols(g: &[f64], r: usize, ca: usize, cb: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ga = Vec::with_capacity(r * ca);
    let mut gb = Vec::with_capacity(r * cb);
    for row in g.chunks(ca + cb) {
        ga.extend_from_slice(&row[..ca]);
        gb.extend_from_slice(&row[ca..]);
    }
    (ga, gb)
}

pub(crate) fn unslice_channels(g: &[f64], src: &[usize], width: usize, start: usize) -> Vec<f64> {
    let plane = src[2] * src[3];
    let mut out = vec![0.0; src.iter().product()];
    for b in 0..src[0] {
        let dst = b * src[1] * plane + start * plane;
        let from = b * width * plane;
        out[dst..dst + width * plane].copy_from_slice(&g[from..from + width * plane]);
    }
    out
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize]) -> Self {
        Self {
            batch: x[0],
            in_ch: x[1],
            out_ch: kernel[0],
            h: x[2],
            w: x[3],
            k: kernel[2],
        }
    }

    /// Output index range along one axis for kernel offset `d` (padding k/2):
    /// positions `p` with `0 <= p + d - pad < len`.
    fn range(&self, d: usize, len: usize) -> (usize, usize) {
        let pad = self.k / 2;
        let lo = pad.saturating_sub(d);
        let hi = (len + pad).saturating_sub(d).min(len);
        (lo, hi)
    }
}

// y[b,o,i,j] = bias[o] + sum_{c,di,dj in-bounds} w[o,c,di,dj] * (x[b,c,i+di-p,j+dj-p] - theta * x[b,c,i,j])
//
// Both passes go through the column matrix `cols[(c,di,dj), (i,j)]` of
// blended inputs, zero where the tap falls outside the image.

/// Column matrix `(C*K*K, H*W)` for one batch item.
fn im2col(g: &ConvGeom, x: &[f64], theta: f64) -> Vec<f64> {
    let plane = g.h * g.w;
    let pad = g.k / 2;
    let mut cols = vec![0.0; g.in_ch * g.k * g.k * plane];
    for c in 0..g.in_ch {
        let xc = &x[c * plane..(c + 1) * plane];
        for di in 0..g.k {
            let (i0, i1) = g.range(di, g.h);
            for dj in 0..g.k {
                let (j0, j1) = g.range(dj, g.w);
                let row = &mut cols[((c * g.k + di) * g.k + dj) * plane..][..plane];
                for i in i0..i1 {
                    let si = i + di - pad;
                    let dst = &mut row[i * g.w + j0..i * g.w + j1];
                    let src = &xc[si * g.w + j0 + dj - pad..si * g.w + j1 + dj - pad];
                    if theta == 0.0 {
                        dst.copy_from_slice(src);
                    } else {
                        let cen = &xc[i * g.w + j0..i * g.w + j1];
                        for ((d, s), c0) in dst.iter_mut().zip(src).zip(cen) {
                            *d = s - theta * c0;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients into `gx`.
fn col2im(g: &ConvGeom, gcols: &[f64], theta: f64, gx: &mut [f64]) {
    let plane = g.h * g.w;
    let pad = g.k / 2;
    for c in 0..g.in_ch {
        let gxc = &mut gx[c * plane..(c + 1) * plane];
        for di in 0..g.k {
            let (i0, i1) = g.range(di, g.h);
            for dj in 0..g.k {
                let (j0, j1) = g.range(dj, g.w);
                let row = &gcols[((c * g.k + di) * g.k + dj) * plane..][..plane];
                for i in i0..i1 {
                    let si = i + di - pad;
                    for j in j0..j1 {
                        let v = row[i * g.w + j];
                        gxc[si * g.w + j + dj - pad] += v;
                        if theta != 0.0 {
                            gxc[i * g.w + j] -= theta * v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    theta: f64,
) -> Vec<f64> {
    let plane = g.h * g.w;
    let taps = g.in_ch * g.k * g.k;
    let mut out = Vec::with_capacity(g.batch * g.out_ch * plane);
    for b in 0..g.batch {
        let cols = im2col(g, &x[b * g.in_ch * plane..(b + 1) * g.in_ch * plane], theta);
        let mut y = matmul(w, &cols, g.out_ch, taps, plane);
        if let Some(bias) = bias {
            for (yo, &bo) in y.chunks_mut(plane).zip(bias) {
                yo.iter_mut().for_each(|v| *v += bo);
            }
        }
        out.extend_from_slice(&y);
    }
    out
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    theta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.h * g.w;
    let taps = g.in_ch * g.k * g.k;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..g.batch {
        let xb = b * g.in_ch * plane..(b + 1) * g.in_ch * plane;
        let gyb = &gy[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        let cols = im2col(g, &x[xb.clone()], theta);
        for (acc, v) in gw.iter_mut().zip(matmul_nt(gyb, &cols, g.out_ch, plane, taps)) {
            *acc += v;
        }
        let gcols = matmul_tn(w, gyb, g.out_ch, taps, plane);
        col2im(g, &gcols, theta, &mut gx[xb]);
    }
    (gx, gw)
}

pub(crate) fn conv2d_bias_backward(g: &ConvGeom, gy: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for (o, acc) in gb.iter_mut().enumerate() {
            let off = (b * g.out_ch + o) * plane;
            *acc += gy[off..off + plane].iter().sum::<f64>();
        }
    }
    gb
}
