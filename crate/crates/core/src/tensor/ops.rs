//! Differentiable operations. Each forward lives on [`Tape`]; the matching
//! adjoint rule lives in [`backward`].

use super::gemm::{cgemm, dgemm, Trans};
use super::tape::{Node, Tape, Var};
use super::{mat_dims, Data, Tensor, C64};
use crate::error::{Error, Result};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, C64),
    Conj(usize),
    Abs2(usize),
    ExpJ(usize),
    Relu(usize),
    Tanh(usize),
    Re(usize),
    Im(usize),
    Sum(usize),
    Reshape(usize),
    ScaleRows(usize, usize),
    Linear(usize, usize, usize),
    Conv2d(usize, usize, usize),
    MaxPool2 { x: usize, argmax: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Mse { x: usize, target: Tensor },
    PowerNormalize { x: usize, p_max: f64, norms: Vec<f64> },
    PairsToComplex(usize),
    ComplexToPairs(usize),
    SliceCols { x: usize, start: usize },
}

impl Op {
    pub fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Hadamard(a, b) | ScaleRows(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Conj(a) | Abs2(a) | ExpJ(a) | Relu(a) | Tanh(a) | Re(a) | Im(a)
            | Sum(a) | Reshape(a) | PairsToComplex(a) | ComplexToPairs(a) => vec![*a],
            Linear(x, w, b) | Conv2d(x, w, b) => vec![*x, *w, *b],
            MaxPool2 { x, .. }
            | Mse { x, .. }
            | PowerNormalize { x, .. }
            | SliceCols { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

fn conj_vec(v: &[C64]) -> Vec<C64> {
    v.iter().map(|z| z.conj()).collect()
}

fn real_of(d: &Data) -> Vec<f64> {
    match d {
        Data::Real(v) => v.clone(),
        Data::Complex(v) => v.iter().map(|z| z.re).collect(),
    }
}

fn complex_of(d: &Data) -> Vec<C64> {
    d.to_complex()
}

/// Broadcast-aware batch sizes for a binary batched operation.
fn broadcast_batch(op: &'static str, ba: usize, bb: usize, sa: &[usize], sb: &[usize]) -> Result<usize> {
    if ba == bb || bb == 1 {
        Ok(ba)
    } else if ba == 1 {
        Ok(bb)
    } else {
        Err(Error::shape(op, sa, sb))
    }
}

impl Tape {
    /// Batched matrix product. Operands are `[m,k]` or `[b,m,k]`; a batch of
    /// one broadcasts against the other operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ba, m, k) = mat_dims("matmul", ta.shape())?;
        let (bb, k2, n) = mat_dims("matmul", tb.shape())?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let batch = broadcast_batch("matmul", ba, bb, ta.shape(), tb.shape())?;
        let shape = if ta.shape().len() == 3 || tb.shape().len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let value = match (ta.data(), tb.data()) {
            (Data::Real(x), Data::Real(y)) => {
                let mut out = vec![0.0; batch * m * n];
                for i in 0..batch {
                    let xa = &x[(i % ba) * m * k..][..m * k];
                    let yb = &y[(i % bb) * k * n..][..k * n];
                    dgemm(Trans::No, Trans::No, m, k, n, 1.0, xa, yb, 0.0, &mut out[i * m * n..][..m * n]);
                }
                Tensor::real(&shape, out)?
            }
            (da, db) => {
                let x = complex_of(da);
                let y = complex_of(db);
                let mut out = vec![ZERO; batch * m * n];
                for i in 0..batch {
                    let xa = &x[(i % ba) * m * k..][..m * k];
                    let yb = &y[(i % bb) * k * n..][..k * n];
                    cgemm(Trans::No, Trans::No, m, k, n, ONE, xa, yb, ZERO, &mut out[i * m * n..][..m * n]);
                }
                Tensor::complex(&shape, out)?
            }
        };
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(
        &self,
        a: Var,
        b: Var,
        fr: impl Fn(f64, f64) -> f64,
        fc: impl Fn(C64, C64) -> C64,
    ) -> Result<Tensor> {
        let ta = self.value(a);
        let tb = self.value(b);
        match (ta.data(), tb.data()) {
            (Data::Real(x), Data::Real(y)) => {
                Tensor::real(ta.shape(), x.iter().zip(y).map(|(&p, &q)| fr(p, q)).collect())
            }
            (da, db) => {
                let x = complex_of(da);
                let y = complex_of(db);
                Tensor::complex(ta.shape(), x.iter().zip(&y).map(|(&p, &q)| fc(p, q)).collect())
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Entrywise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("hadamard", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y, |x, y| x * y)?;
        Ok(self.push(v, Op::Hadamard(a.0, b.0)))
    }

    /// Multiplies every entry by a real constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.scale_complex(a, C64::new(s, 0.0))
    }

    /// Multiplies every entry by a complex constant.
    pub fn scale_complex(&mut self, a: Var, s: C64) -> Result<Var> {
        let t = self.value(a);
        let v = match t.data() {
            Data::Real(x) if s.im == 0.0 => Tensor::real(t.shape(), x.iter().map(|v| v * s.re).collect())?,
            d => Tensor::complex(t.shape(), complex_of(d).into_iter().map(|z| z * s).collect())?,
        };
        Ok(self.push(v, Op::Scale(a.0, s)))
    }

    pub fn conj(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = match t.data() {
            Data::Real(x) => Tensor::real(t.shape(), x.clone())?,
            Data::Complex(x) => Tensor::complex(t.shape(), conj_vec(x))?,
        };
        Ok(self.push(v, Op::Conj(a.0)))
    }

    /// `|a|²` entrywise; the result is real.
    pub fn abs2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = match t.data() {
            Data::Real(x) => x.iter().map(|v| v * v).collect(),
            Data::Complex(x) => x.iter().map(|z| z.norm_sqr()).collect(),
        };
        let v = Tensor::real(t.shape(), out)?;
        Ok(self.push(v, Op::Abs2(a.0)))
    }

    /// Maps real phases θ to unit-modulus responses `e^{jθ}`.
    pub fn exp_j(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let x = t.real_values("exp_j_theta")?;
        let v = Tensor::complex(t.shape(), x.iter().map(|&th| C64::from_polar(1.0, th)).collect())?;
        Ok(self.push(v, Op::ExpJ(a.0)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let x = t.real_values("relu_real")?;
        let v = Tensor::real(t.shape(), x.iter().map(|&v| v.max(0.0)).collect())?;
        Ok(self.push(v, Op::Relu(a.0)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let x = t.real_values("tanh_real")?;
        let v = Tensor::real(t.shape(), x.iter().map(|v| v.tanh()).collect())?;
        Ok(self.push(v, Op::Tanh(a.0)))
    }

    pub fn re(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::real(t.shape(), real_of(t.data()))?;
        Ok(self.push(v, Op::Re(a.0)))
    }

    pub fn im(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = match t.data() {
            Data::Real(x) => vec![0.0; x.len()],
            Data::Complex(x) => x.iter().map(|z| z.im).collect(),
        };
        let v = Tensor::real(t.shape(), out)?;
        Ok(self.push(v, Op::Im(a.0)))
    }

    /// Sum of all entries, as a scalar of the same kind.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = match t.data() {
            Data::Real(x) => Tensor::real(&[], vec![x.iter().sum()])?,
            Data::Complex(x) => Tensor::complex(&[], vec![x.iter().sum()])?,
        };
        Ok(self.push(v, Op::Sum(a.0)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    /// `diag(v[b])·x[b]` for a batch of matrices. `v` is `[g, m]` (or `[m]`)
    /// with `g` either 1 or the batch size of `x`.
    pub fn scale_rows(&mut self, v: Var, x: Var) -> Result<Var> {
        let tv = self.value(v);
        let tx = self.value(x);
        let (g, m) = match *tv.shape() {
            [m] => (1, m),
            [g, m] => (g, m),
            _ => return Err(Error::shape("scale_rows", tv.shape(), tx.shape())),
        };
        let (b, rows, cols) = mat_dims("scale_rows", tx.shape())?;
        if rows != m || !(g == 1 || g == b) {
            return Err(Error::shape("scale_rows", tv.shape(), tx.shape()));
        }
        let value = match (tv.data(), tx.data()) {
            (Data::Real(vv), Data::Real(xx)) => {
                let mut out = xx.clone();
                for (i, chunk) in out.chunks_mut(rows * cols).enumerate() {
                    let row_scale = &vv[(i % g) * m..][..m];
                    for (r, row) in chunk.chunks_mut(cols).enumerate() {
                        row.iter_mut().for_each(|e| *e *= row_scale[r]);
                    }
                }
                Tensor::real(tx.shape(), out)?
            }
            (dv, dx) => {
                let vv = complex_of(dv);
                let mut out = complex_of(dx);
                for (i, chunk) in out.chunks_mut(rows * cols).enumerate() {
                    let row_scale = &vv[(i % g) * m..][..m];
                    for (r, row) in chunk.chunks_mut(cols).enumerate() {
                        row.iter_mut().for_each(|e| *e *= row_scale[r]);
                    }
                }
                Tensor::complex(tx.shape(), out)?
            }
        };
        Ok(self.push(value, Op::ScaleRows(v.0, x.0)))
    }

    /// Dense layer `x·w + b` with `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        let xs = tx.real_values("linear")?;
        let ws = tw.real_values("linear")?;
        let bs = tb.real_values("linear")?;
        let (batch, inp) = match *tx.shape() {
            [b, i] => (b, i),
            _ => return Err(Error::shape("linear", tx.shape(), tw.shape())),
        };
        let out = match *tw.shape() {
            [i, o] if i == inp => o,
            _ => return Err(Error::shape("linear", tx.shape(), tw.shape())),
        };
        if tb.shape() != [out] {
            return Err(Error::shape("linear", tw.shape(), tb.shape()));
        }
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(bs);
        }
        dgemm(Trans::No, Trans::No, batch, inp, out, 1.0, xs, ws, 1.0, &mut y);
        let v = Tensor::real(&[batch, out], y)?;
        Ok(self.push(v, Op::Linear(x.0, w.0, b.0)))
    }

    /// Valid (unpadded), stride-1 2-D convolution.
    /// `x: [batch, cin, h, w]`, `w: [cout, cin, kh, kw]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        let geo = ConvGeometry::new(tx.shape(), tw.shape())?;
        if tb.shape() != [geo.cout] {
            return Err(Error::shape("conv2d", tw.shape(), tb.shape()));
        }
        let xs = tx.real_values("conv2d")?;
        let ws = tw.real_values("conv2d")?;
        let bs = tb.real_values("conv2d")?;
        let plane = geo.ho * geo.wo;
        let mut out = vec![0.0; geo.batch * geo.cout * plane];
        let mut cols = vec![0.0; geo.patch() * plane];
        for s in 0..geo.batch {
            geo.im2col(&xs[s * geo.in_len()..][..geo.in_len()], &mut cols);
            let o = &mut out[s * geo.cout * plane..][..geo.cout * plane];
            for (c, row) in o.chunks_mut(plane).enumerate() {
                row.fill(bs[c]);
            }
            dgemm(Trans::No, Trans::No, geo.cout, geo.patch(), plane, 1.0, ws, &cols, 1.0, o);
        }
        let v = Tensor::real(&[geo.batch, geo.cout, geo.ho, geo.wo], out)?;
        Ok(self.push(v, Op::Conv2d(x.0, w.0, b.0)))
    }

    /// 2×2 max pooling with stride 2 over `[batch, c, h, w]`; odd edges are
    /// dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.real_values("max_pool2")?;
        let (b, c, h, w) = match *tx.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("max_pool2", tx.shape(), &[])),
        };
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::real(&[b, c, ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool2 { x: x.0, argmax }))
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]` against
    /// integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let xs = t.real_values("cross_entropy")?;
        let (b, c) = match *t.shape() {
            [b, c] => (b, c),
            _ => return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()])),
        };
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Range(format!("class index {bad} outside 0..{c}")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &xs[i * c..][..c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs[i * c..][..c].iter_mut().zip(row) {
                *p = (l - mx).exp();
                z += *p;
            }
            probs[i * c..][..c].iter_mut().for_each(|p| *p /= z);
            loss += mx + z.ln() - row[y];
        }
        let v = Tensor::real(&[], vec![loss / b as f64])?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of `|x − target|²` over all entries.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() {
            return Err(Error::shape("mse", t.shape(), target.shape()));
        }
        let a = t.to_complex_vec();
        let y = target.to_complex_vec();
        let n = a.len().max(1) as f64;
        let loss = a.iter().zip(&y).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>() / n;
        let v = Tensor::real(&[], vec![loss])?;
        Ok(self.push(
            v,
            Op::Mse {
                x: x.0,
                target: target.clone(),
            },
        ))
    }

    /// Rescales each sample (leading axis) to energy `p_max`. All-zero
    /// samples pass through unchanged.
    pub fn power_normalize(&mut self, x: Var, p_max: f64) -> Result<Var> {
        if !(p_max > 0.0) {
            return Err(Error::Config(format!("power budget must be positive, got {p_max}")));
        }
        let t = self.value(x);
        let b = *t.shape().first().ok_or_else(|| Error::shape("power_normalize", t.shape(), &[]))?;
        let per = t.len() / b.max(1);
        let mut z = t.to_complex_vec();
        let mut norms = Vec::with_capacity(b);
        for chunk in z.chunks_mut(per.max(1)) {
            let e: f64 = chunk.iter().map(|v| v.norm_sqr()).sum();
            let norm = e.sqrt();
            norms.push(norm);
            if norm > 0.0 {
                let s = p_max.sqrt() / norm;
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        let v = if t.is_real() {
            Tensor::real(t.shape(), z.iter().map(|c| c.re).collect())?
        } else {
            Tensor::complex(t.shape(), z)?
        };
        Ok(self.push(v, Op::PowerNormalize { x: x.0, p_max, norms }))
    }

    /// `[batch, 2n]` reals → `[batch, n]` complex: first half real parts,
    /// second half imaginary parts.
    pub fn pairs_to_complex(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let xs = t.real_values("pairs_to_complex")?;
        let (b, w) = match *t.shape() {
            [b, w] if w % 2 == 0 => (b, w),
            _ => return Err(Error::shape("pairs_to_complex", t.shape(), &[])),
        };
        let n = w / 2;
        let out = (0..b)
            .flat_map(|i| (0..n).map(move |j| C64::new(xs[i * w + j], xs[i * w + n + j])))
            .collect();
        let v = Tensor::complex(&[b, n], out)?;
        Ok(self.push(v, Op::PairsToComplex(x.0)))
    }

    /// `[batch, ...]` complex → `[batch, 2n]` reals (real parts, then
    /// imaginary parts of the flattened sample).
    pub fn complex_to_pairs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = *t.shape().first().ok_or_else(|| Error::shape("complex_to_pairs", t.shape(), &[]))?;
        let n = t.len() / b.max(1);
        let z = t.to_complex_vec();
        let mut out = Vec::with_capacity(2 * t.len());
        for chunk in z.chunks(n.max(1)) {
            out.extend(chunk.iter().map(|c| c.re));
            out.extend(chunk.iter().map(|c| c.im));
        }
        let v = Tensor::real(&[b, 2 * n], out)?;
        Ok(self.push(v, Op::ComplexToPairs(x.0)))
    }

    /// Columns `start..start+len` of a `[batch, n]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, n) = match *t.shape() {
            [b, n] if start + len <= n => (b, n),
            _ => return Err(Error::shape("slice_cols", t.shape(), &[start, len])),
        };
        let v = match t.data() {
            Data::Real(xs) => Tensor::real(
                &[b, len],
                (0..b).flat_map(|i| xs[i * n + start..][..len].iter().copied()).collect(),
            )?,
            Data::Complex(xs) => Tensor::complex(
                &[b, len],
                (0..b).flat_map(|i| xs[i * n + start..][..len].iter().copied()).collect(),
            )?,
        };
        Ok(self.push(v, Op::SliceCols { x: x.0, start }))
    }
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Result<Self> {
        match (xs, ws) {
            (&[batch, cin, h, w], &[cout, cin2, kh, kw]) if cin == cin2 && kh <= h && kw <= w => {
                Ok(ConvGeometry {
                    batch,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    ho: h - kh + 1,
                    wo: w - kw + 1,
                })
            }
            _ => Err(Error::shape("conv2d", xs, ws)),
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let r = (c * self.kh + p) * self.kw + q;
                    let dst = &mut cols[r * plane..][..plane];
                    for oy in 0..self.ho {
                        let src = &x[c * self.h * self.w + (oy + p) * self.w + q..][..self.wo];
                        dst[oy * self.wo..][..self.wo].copy_from_slice(src);
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let r = (c * self.kh + p) * self.kw + q;
                    let src = &cols[r * plane..][..plane];
                    for oy in 0..self.ho {
                        let dst = &mut dx[c * self.h * self.w + (oy + p) * self.w + q..][..self.wo];
                        dst.iter_mut()
                            .zip(&src[oy * self.wo..][..self.wo])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

/// Adjoint contributions of node `i` given its adjoint `g`.
pub(crate) fn backward(nodes: &[Node], i: usize, g: &Data) -> Result<Vec<(usize, Data)>> {
    let node = &nodes[i];
    let val = |j: usize| &nodes[j].value;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => matmul_backward(val(*a), val(*b), g, *a, *b)?,
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => {
            let neg = match g {
                Data::Real(v) => Data::Real(v.iter().map(|x| -x).collect()),
                Data::Complex(v) => Data::Complex(v.iter().map(|x| -x).collect()),
            };
            vec![(*a, g.clone()), (*b, neg)]
        }
        Op::Hadamard(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            match (g, ta.data(), tb.data()) {
                (Data::Real(gv), Data::Real(x), Data::Real(y)) => vec![
                    (*a, Data::Real(gv.iter().zip(y).map(|(g, y)| g * y).collect())),
                    (*b, Data::Real(gv.iter().zip(x).map(|(g, x)| g * x).collect())),
                ],
                _ => {
                    let gv = complex_of(g);
                    let x = ta.to_complex_vec();
                    let y = tb.to_complex_vec();
                    vec![
                        (*a, Data::Complex(gv.iter().zip(&y).map(|(g, y)| g * y.conj()).collect())),
                        (*b, Data::Complex(gv.iter().zip(&x).map(|(g, x)| g * x.conj()).collect())),
                    ]
                }
            }
        }
        Op::Scale(a, s) => {
            let d = match g {
                Data::Real(v) if s.im == 0.0 => Data::Real(v.iter().map(|x| x * s.re).collect()),
                d => Data::Complex(complex_of(d).into_iter().map(|z| z * s.conj()).collect()),
            };
            vec![(*a, d)]
        }
        Op::Conj(a) => {
            let d = match g {
                Data::Real(v) => Data::Real(v.clone()),
                Data::Complex(v) => Data::Complex(conj_vec(v)),
            };
            vec![(*a, d)]
        }
        Op::Abs2(a) => {
            let gv = real_of(g);
            let d = match val(*a).data() {
                Data::Real(x) => Data::Real(x.iter().zip(&gv).map(|(x, g)| 2.0 * g * x).collect()),
                Data::Complex(x) => {
                    Data::Complex(x.iter().zip(&gv).map(|(x, g)| x * (2.0 * g)).collect())
                }
            };
            vec![(*a, d)]
        }
        Op::ExpJ(a) => {
            // z = e^{jθ}: dz/dθ = j·z, so dL/dθ = Re(conj(ḡ)·j·z).
            let z = node.value.as_complex().expect("exp_j output is complex");
            let gv = complex_of(g);
            let d = gv
                .iter()
                .zip(z)
                .map(|(g, z)| (g.conj() * C64::new(0.0, 1.0) * z).re)
                .collect();
            vec![(*a, Data::Real(d))]
        }
        Op::Relu(a) => {
            let x = val(*a).as_real().expect("relu input is real");
            let gv = real_of(g);
            vec![(*a, Data::Real(x.iter().zip(&gv).map(|(x, g)| if *x > 0.0 { *g } else { 0.0 }).collect()))]
        }
        Op::Tanh(a) => {
            let y = node.value.as_real().expect("tanh output is real");
            let gv = real_of(g);
            vec![(*a, Data::Real(y.iter().zip(&gv).map(|(y, g)| g * (1.0 - y * y)).collect()))]
        }
        Op::Re(a) => vec![(*a, Data::Real(real_of(g)))],
        Op::Im(a) => {
            let gv = real_of(g);
            vec![(*a, Data::Complex(gv.iter().map(|&g| C64::new(0.0, g)).collect()))]
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            let d = match g {
                Data::Real(v) => Data::Real(vec![v[0]; n]),
                Data::Complex(v) => Data::Complex(vec![v[0]; n]),
            };
            vec![(*a, d)]
        }
        Op::Reshape(a) => vec![(*a, g.clone())],
        Op::ScaleRows(v, x) => scale_rows_backward(val(*v), val(*x), g, *v, *x)?,
        Op::Linear(x, w, b) => {
            let tx = val(*x);
            let tw = val(*w);
            let (batch, inp) = (tx.shape()[0], tx.shape()[1]);
            let out = tw.shape()[1];
            let gv = real_of(g);
            let xs = tx.as_real().expect("linear input is real");
            let ws = tw.as_real().expect("linear weight is real");
            let mut dx = vec![0.0; batch * inp];
            dgemm(Trans::No, Trans::Yes, batch, out, inp, 1.0, &gv, ws, 0.0, &mut dx);
            let mut dw = vec![0.0; inp * out];
            dgemm(Trans::Yes, Trans::No, inp, batch, out, 1.0, xs, &gv, 0.0, &mut dw);
            let mut db = vec![0.0; out];
            for row in gv.chunks(out) {
                db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
            }
            vec![(*x, Data::Real(dx)), (*w, Data::Real(dw)), (*b, Data::Real(db))]
        }
        Op::Conv2d(x, w, b) => {
            let tx = val(*x);
            let tw = val(*w);
            let geo = ConvGeometry::new(tx.shape(), tw.shape())?;
            let xs = tx.as_real().expect("conv input is real");
            let ws = tw.as_real().expect("conv weight is real");
            let gv = real_of(g);
            let plane = geo.ho * geo.wo;
            let mut dx = vec![0.0; xs.len()];
            let mut dw = vec![0.0; ws.len()];
            let mut db = vec![0.0; geo.cout];
            let mut cols = vec![0.0; geo.patch() * plane];
            let mut dcols = vec![0.0; geo.patch() * plane];
            let need_dx = nodes[*x].requires_grad;
            for s in 0..geo.batch {
                let gs = &gv[s * geo.cout * plane..][..geo.cout * plane];
                geo.im2col(&xs[s * geo.in_len()..][..geo.in_len()], &mut cols);
                dgemm(Trans::No, Trans::Yes, geo.cout, plane, geo.patch(), 1.0, gs, &cols, 1.0, &mut dw);
                for (c, row) in gs.chunks(plane).enumerate() {
                    db[c] += row.iter().sum::<f64>();
                }
                if need_dx {
                    dgemm(Trans::Yes, Trans::No, geo.patch(), geo.cout, plane, 1.0, ws, gs, 0.0, &mut dcols);
                    geo.col2im_add(&dcols, &mut dx[s * geo.in_len()..][..geo.in_len()]);
                }
            }
            vec![(*x, Data::Real(dx)), (*w, Data::Real(dw)), (*b, Data::Real(db))]
        }
        Op::MaxPool2 { x, argmax } => {
            let gv = real_of(g);
            let mut dx = vec![0.0; val(*x).len()];
            for (&idx, &gg) in argmax.iter().zip(&gv) {
                dx[idx] += gg;
            }
            vec![(*x, Data::Real(dx))]
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let scale = real_of(g)[0] / targets.len() as f64;
            let c = probs.len() / targets.len();
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &y) in targets.iter().enumerate() {
                d[i * c + y] -= scale;
            }
            vec![(*logits, Data::Real(d))]
        }
        Op::Mse { x, target } => {
            let gg = real_of(g)[0];
            let tx = val(*x);
            let n = tx.len().max(1) as f64;
            let k = 2.0 * gg / n;
            let d = match (tx.data(), target.data()) {
                (Data::Real(a), Data::Real(y)) => {
                    Data::Real(a.iter().zip(y).map(|(a, y)| k * (a - y)).collect())
                }
                _ => {
                    let a = tx.to_complex_vec();
                    let y = target.to_complex_vec();
                    Data::Complex(a.iter().zip(&y).map(|(a, y)| (a - y) * k).collect())
                }
            };
            vec![(*x, d)]
        }
        Op::PowerNormalize { x, p_max, norms } => {
            // y = c·x/‖x‖ ⇒ ḡ_x = c/‖x‖·(ḡ_y − x·Re⟨x, ḡ_y⟩/‖x‖²)
            let tx = val(*x);
            let xs = tx.to_complex_vec();
            let gv = complex_of(g);
            let per = xs.len() / norms.len().max(1);
            let c = p_max.sqrt();
            let mut d = vec![ZERO; xs.len()];
            for (s, &norm) in norms.iter().enumerate() {
                let xr = &xs[s * per..][..per];
                let gr = &gv[s * per..][..per];
                let dr = &mut d[s * per..][..per];
                if norm == 0.0 {
                    dr.copy_from_slice(gr);
                    continue;
                }
                let inner: f64 = xr.iter().zip(gr).map(|(x, g)| (x.conj() * g).re).sum();
                let n2 = norm * norm;
                for ((dv, x), g) in dr.iter_mut().zip(xr).zip(gr) {
                    *dv = (g - x * (inner / n2)) * (c / norm);
                }
            }
            vec![(*x, Data::Complex(d))]
        }
        Op::PairsToComplex(x) => {
            let gv = complex_of(g);
            let (b, n) = (node.value.shape()[0], node.value.shape()[1]);
            let mut d = vec![0.0; b * 2 * n];
            for i in 0..b {
                for j in 0..n {
                    d[i * 2 * n + j] = gv[i * n + j].re;
                    d[i * 2 * n + n + j] = gv[i * n + j].im;
                }
            }
            vec![(*x, Data::Real(d))]
        }
        Op::ComplexToPairs(x) => {
            let gv = real_of(g);
            let b = node.value.shape()[0];
            let n = node.value.shape()[1] / 2;
            let mut d = Vec::with_capacity(b * n);
            for i in 0..b {
                for j in 0..n {
                    d.push(C64::new(gv[i * 2 * n + j], gv[i * 2 * n + n + j]));
                }
            }
            vec![(*x, Data::Complex(d))]
        }
        Op::SliceCols { x, start } => {
            let tx = val(*x);
            let (b, n) = (tx.shape()[0], tx.shape()[1]);
            let len = node.value.shape()[1];
            let d = match g {
                Data::Real(gv) => {
                    let mut d = vec![0.0; b * n];
                    for i in 0..b {
                        d[i * n + start..][..len].copy_from_slice(&gv[i * len..][..len]);
                    }
                    Data::Real(d)
                }
                Data::Complex(gv) => {
                    let mut d = vec![ZERO; b * n];
                    for i in 0..b {
                        d[i * n + start..][..len].copy_from_slice(&gv[i * len..][..len]);
                    }
                    Data::Complex(d)
                }
            };
            vec![(*x, d)]
        }
    };
    Ok(out)
}

fn matmul_backward(ta: &Tensor, tb: &Tensor, g: &Data, ia: usize, ib: usize) -> Result<Vec<(usize, Data)>> {
    let (ba, m, k) = mat_dims("matmul", ta.shape())?;
    let (bb, _, n) = mat_dims("matmul", tb.shape())?;
    let batch = ba.max(bb);
    match (ta.data(), tb.data(), g) {
        (Data::Real(x), Data::Real(y), Data::Real(gv)) => {
            let mut da = vec![0.0; ba * m * k];
            let mut db = vec![0.0; bb * k * n];
            for i in 0..batch {
                let gi = &gv[i * m * n..][..m * n];
                let xa = &x[(i % ba) * m * k..][..m * k];
                let yb = &y[(i % bb) * k * n..][..k * n];
                dgemm(Trans::No, Trans::Yes, m, n, k, 1.0, gi, yb, 1.0, &mut da[(i % ba) * m * k..][..m * k]);
                dgemm(Trans::Yes, Trans::No, k, m, n, 1.0, xa, gi, 1.0, &mut db[(i % bb) * k * n..][..k * n]);
            }
            Ok(vec![(ia, Data::Real(da)), (ib, Data::Real(db))])
        }
        _ => {
            // ḡ_a = ḡ·b^H, ḡ_b = a^H·ḡ
            let xc = conj_vec(&ta.to_complex_vec());
            let yc = conj_vec(&tb.to_complex_vec());
            let gv = complex_of(g);
            let mut da = vec![ZERO; ba * m * k];
            let mut db = vec![ZERO; bb * k * n];
            for i in 0..batch {
                let gi = &gv[i * m * n..][..m * n];
                let xa = &xc[(i % ba) * m * k..][..m * k];
                let yb = &yc[(i % bb) * k * n..][..k * n];
                cgemm(Trans::No, Trans::Yes, m, n, k, ONE, gi, yb, ONE, &mut da[(i % ba) * m * k..][..m * k]);
                cgemm(Trans::Yes, Trans::No, k, m, n, ONE, xa, gi, ONE, &mut db[(i % bb) * k * n..][..k * n]);
            }
            Ok(vec![(ia, Data::Complex(da)), (ib, Data::Complex(db))])
        }
    }
}

fn scale_rows_backward(tv: &Tensor, tx: &Tensor, g: &Data, iv: usize, ix: usize) -> Result<Vec<(usize, Data)>> {
    let m = *tv.shape().last().expect("scale_rows vector has a length");
    let gcount = tv.len() / m;
    let (_, rows, cols) = mat_dims("scale_rows", tx.shape())?;
    let block = rows * cols;
    match (tv.data(), tx.data(), g) {
        (Data::Real(v), Data::Real(x), Data::Real(gv)) => {
            let mut dv = vec![0.0; v.len()];
            let mut dx = vec![0.0; x.len()];
            for (bi, (gb, xb)) in gv.chunks(block).zip(x.chunks(block)).enumerate() {
                let off = (bi % gcount) * m;
                for r in 0..rows {
                    let s = v[off + r];
                    for c in 0..cols {
                        dv[off + r] += gb[r * cols + c] * xb[r * cols + c];
                        dx[bi * block + r * cols + c] = gb[r * cols + c] * s;
                    }
                }
            }
            Ok(vec![(iv, Data::Real(dv)), (ix, Data::Real(dx))])
        }
        _ => {
            let v = tv.to_complex_vec();
            let x = tx.to_complex_vec();
            let gv = complex_of(g);
            let mut dv = vec![ZERO; v.len()];
            let mut dx = vec![ZERO; x.len()];
            for (bi, (gb, xb)) in gv.chunks(block).zip(x.chunks(block)).enumerate() {
                let off = (bi % gcount) * m;
                for r in 0..rows {
                    let sc = v[off + r].conj();
                    let mut acc = ZERO;
                    for c in 0..cols {
                        let gg = gb[r * cols + c];
                        acc += gg * xb[r * cols + c].conj();
                        dx[bi * block + r * cols + c] = gg * sc;
                    }
                    dv[off + r] += acc;
                }
            }
            Ok(vec![(iv, Data::Complex(dv)), (ix, Data::Complex(dx))])
        }
    }
}
