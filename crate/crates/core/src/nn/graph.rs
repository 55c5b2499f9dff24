use super::kernels::{self, ConvGeom, GroupNormCache};
use super::tensor::{LayerParams, ParamId, Tensor};
use crate::error::{shape, Error, Result};
use crate::scalar::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-sample constants for decoding scale-invariant translations:
/// crop center and extent, zoom ratio, focal lengths and principal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteConsts<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    pub ratio: T,
    pub fx: T,
    pub fy: T,
    pub px: T,
    pub py: T,
}

enum Op<T: Real> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    SumLast(Var),
    MulRows(Var, Var),
    AddRows(Var, Var),
    Reshape(Var),
    TransposeLast2(Var),
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    MatMul { a: Var, b: Var, shared: bool },
    NormalizeLast(Var),
    CrossLast(Var, Var),
    QuatToMat(Var),
    ExpQuat(Var),
    AcosClamped(Var),
    MinOf { parts: Vec<Var>, argmin: Vec<u32> },
    SiteDecode { x: Var, consts: Vec<SiteConsts<T>> },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    GroupNorm { x: Var, scale: Var, shift: Var, groups: usize, cache: GroupNormCache<T> },
    Linear { x: Var, w: Var, b: Var },
    MaskedL1 { a: Var, b: Var, mask: Vec<T>, count: usize },
    SoftmaxCe { logits: Var, labels: Vec<usize>, mask: Vec<bool>, count: usize },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// operand index is smaller than the index of the node using it.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn split_last(s: &[usize]) -> Result<(&[usize], usize)> {
    s.split_last().map(|(l, rest)| (rest, *l)).ok_or_else(|| shape("tensor has no axes"))
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn out(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs = self.needs(parents);
        let value = Tensor::new(shape, data).expect("op output shape");
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Copies a trainable parameter onto the tape.
    pub fn param(&mut self, params: &LayerParams<T>, id: ParamId) -> Var {
        let t = params.get(id);
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("parameter shape");
        self.push(value, Op::Param(id), true)
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let s = self.shape(a).to_vec();
        Ok(self.out(&s, data, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let s = self.shape(a).to_vec();
        self.out(&s, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.out(&[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (rest, n) = split_last(self.shape(a))?;
        let rest = if rest.is_empty() { vec![1] } else { rest.to_vec() };
        let data = self.data(a).chunks_exact(n).map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x)).collect();
        Ok(self.out(&rest, data, Op::SumLast(a), &[a]))
    }

    fn rows_check(&self, a: Var, s: Var, name: &str) -> Result<usize> {
        let (rest, n) = split_last(self.shape(a))?;
        if self.value(s).len() * n != self.value(a).len() || (self.shape(s) != rest && !rest.is_empty()) {
            return Err(mismatch(name, self.shape(a), self.shape(s)));
        }
        Ok(n)
    }

    /// `a[..., n] * s[...]`, broadcasting `s` along the last axis.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let n = self.rows_check(a, s, "mul_rows")?;
        let sd = self.data(s);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * sd[i / n]).collect();
        let sh = self.shape(a).to_vec();
        Ok(self.out(&sh, data, Op::MulRows(a, s), &[a, s]))
    }

    /// `a[..., n] + s[...]`, broadcasting `s` along the last axis.
    pub fn add_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let n = self.rows_check(a, s, "add_rows")?;
        let sd = self.data(s);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + sd[i / n]).collect();
        let sh = self.shape(a).to_vec();
        Ok(self.out(&sh, data, Op::AddRows(a, s), &[a, s]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.out(shape, data, Op::Reshape(a), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape("transpose needs two axes"));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.data(a);
        let mut data = vec![T::zero(); src.len()];
        for (b, blk) in src.chunks_exact(m * n).enumerate() {
            for i in 0..m {
                for j in 0..n {
                    data[b * m * n + j * m + i] = blk[i * n + j];
                }
            }
        }
        let mut out = s.clone();
        out.swap(s.len() - 2, s.len() - 1);
        Ok(self.out(&out, data, Op::TransposeLast2(a), &[a]))
    }

    /// Elements `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rest, n) = split_last(self.shape(a))?;
        if start + len > n || len == 0 {
            return Err(shape(format!("slice {start}..{} of axis with {n} elements", start + len)));
        }
        let mut out = rest.to_vec();
        out.push(len);
        let data = self.data(a).chunks_exact(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.out(&out, data, Op::SliceLast { x: a, start }, &[a]))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape("concat of nothing"))?;
        let (rest, _) = split_last(self.shape(first))?;
        let rest = rest.to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, n) = split_last(self.shape(p))?;
            if r != rest.as_slice() {
                return Err(mismatch("concat_last", self.shape(first), self.shape(p)));
            }
            widths.push(n);
        }
        let rows: usize = rest.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &n) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * n..(r + 1) * n]);
            }
        }
        let mut out = rest;
        out.push(total);
        Ok(self.out(&out, data, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Batched product `a[..., m, k] · b[..., k, n]`; `b` may also be a single shared `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let shared = sb.len() == 2 && !batch_a.is_empty();
        if k != k2 || (!shared && batch_a != &sb[..sb.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batches: usize = batch_a.iter().product();
        let mut data = vec![T::zero(); batches * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batches {
            let bs = if shared { 0 } else { i * k * n };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..],
                (k, 1),
                &bd[bs..],
                (n, 1),
                T::zero(),
                &mut data[i * m * n..],
                (n, 1),
            );
        }
        let mut out = batch_a.to_vec();
        out.extend([m, n]);
        Ok(self.out(&out, data, Op::MatMul { a, b, shared }, &[a, b]))
    }

    /// Scales each vector along the last axis to unit length.
    pub fn normalize_last(&mut self, a: Var) -> Result<Var> {
        let (_, n) = split_last(self.shape(a))?;
        let mut data = self.data(a).to_vec();
        for r in data.chunks_exact_mut(n) {
            let norm = safe_norm(r);
            r.iter_mut().for_each(|x| *x /= norm);
        }
        let s = self.shape(a).to_vec();
        Ok(self.out(&s, data, Op::NormalizeLast(a), &[a]))
    }

    /// Cross product of 3-vectors along the last axis.
    pub fn cross_last(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || split_last(self.shape(a))?.1 != 3 {
            return Err(mismatch("cross", self.shape(a), self.shape(b)));
        }
        let data =
            self.data(a).chunks_exact(3).zip(self.data(b).chunks_exact(3)).flat_map(|(u, v)| cross(u, v)).collect();
        let s = self.shape(a).to_vec();
        Ok(self.out(&s, data, Op::CrossLast(a, b), &[a, b]))
    }

    /// Rotation matrices `[..., 3, 3]` from unit quaternions `[..., 4]` ordered `(w, x, y, z)`.
    pub fn quat_to_mat(&mut self, q: Var) -> Result<Var> {
        let (rest, n) = split_last(self.shape(q))?;
        if n != 4 {
            return Err(shape("quaternions need 4 components"));
        }
        let mut out = rest.to_vec();
        out.extend([3, 3]);
        let data = self.data(q).chunks_exact(4).flat_map(quat_matrix).collect();
        Ok(self.out(&out, data, Op::QuatToMat(q), &[q]))
    }

    /// Unit quaternion `(cos|v|, sinc|v| v)` from a log-quaternion `v[..., 3]`.
    pub fn exp_quat(&mut self, v: Var) -> Result<Var> {
        let (rest, n) = split_last(self.shape(v))?;
        if n != 3 {
            return Err(shape("exp map needs 3-vectors"));
        }
        let mut out = rest.to_vec();
        out.push(4);
        let data = self
            .data(v)
            .chunks_exact(3)
            .flat_map(|r| {
                let th = safe_norm_zero(r);
                let s = sinc(th);
                [th.cos(), s * r[0], s * r[1], s * r[2]]
            })
            .collect();
        Ok(self.out(&out, data, Op::ExpQuat(v), &[v]))
    }

    /// `acos` of the input clamped to `[-1, 1]`; the slope is zero outside.
    pub fn acos_clamped(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(-T::one()).min(T::one()).acos(), Op::AcosClamped(a))
    }

    /// Elementwise minimum; the gradient follows the first minimal part.
    pub fn min_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape("min of nothing"))?;
        for &p in parts {
            if self.shape(p) != self.shape(first) {
                return Err(mismatch("min_of", self.shape(first), self.shape(p)));
            }
        }
        let len = self.value(first).len();
        let mut data = self.data(first).to_vec();
        let mut argmin = vec![0u32; len];
        for (pi, &p) in parts.iter().enumerate().skip(1) {
            for (i, &x) in self.data(p).iter().enumerate() {
                if x < data[i] {
                    data[i] = x;
                    argmin[i] = pi as u32;
                }
            }
        }
        let s = self.shape(first).to_vec();
        Ok(self.out(&s, data, Op::MinOf { parts: parts.to_vec(), argmin }, parts))
    }

    /// Decodes `[B, 3]` scale-invariant offsets `(δx, δy, δz)` into camera translations.
    pub fn site_decode(&mut self, x: Var, consts: &[SiteConsts<T>]) -> Result<Var> {
        if self.shape(x) != [consts.len(), 3] {
            return Err(shape(format!("site decode of {:?} with {} crops", self.shape(x), consts.len())));
        }
        let data = self
            .data(x)
            .chunks_exact(3)
            .zip(consts)
            .flat_map(|(d, c)| {
                let tz = d[2] * c.ratio;
                let ox = c.cx + d[0] * c.w;
                let oy = c.cy + d[1] * c.h;
                [(ox - c.px) / c.fx * tz, (oy - c.py) / c.fy * tz, tz]
            })
            .collect();
        Ok(self.out(&[consts.len(), 3], data, Op::SiteDecode { x, consts: consts.to_vec() }, &[x]))
    }

    /// 2D cross-correlation of `x[N, C, H, W]` with `k[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        let geom = ConvGeom { n: sx[0], c: sx[1], h: sx[2], w: sx[3], o: sk[0], kh: sk[2], kw: sk[3], stride, pad };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        let (y, cols) = kernels::conv2d_forward(&geom, self.data(x), self.data(k));
        let cols = if self.needs(&[x, k]) { cols } else { Vec::new() };
        let out = [geom.n, geom.o, geom.out_h(), geom.out_w()];
        Ok(self.out(&out, y, Op::Conv2d { x, k, geom, cols }, &[x, k]))
    }

    /// Group normalization of `x[N, C, ...]` with per-channel `scale` and `shift`.
    pub fn group_norm(&mut self, x: Var, scale: Var, shift: Var, groups: usize, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || sx[1] % groups != 0 {
            return Err(shape(format!("group norm of {sx:?} with {groups} groups")));
        }
        let (n, c) = (sx[0], sx[1]);
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(mismatch("group_norm", &sx, self.shape(scale)));
        }
        let spatial: usize = sx[2..].iter().product();
        let (y, cache) =
            kernels::group_norm_forward(self.data(x), n, c, spatial, groups, self.data(scale), self.data(shift), eps);
        Ok(self.out(&sx, y, Op::GroupNorm { x, scale, shift, groups, cache }, &[x, scale, shift]))
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || self.shape(b) != [sw[0]] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let y = kernels::linear_forward(self.data(x), self.data(w), self.data(b), sx[0], sx[1], sw[0]);
        Ok(self.out(&[sx[0], sw[0]], y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Mean of `|a - b|` over the elements where `mask` is set.
    pub fn masked_l1(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        if self.shape(a) != self.shape(b) || mask.len() != self.value(a).len() {
            return Err(mismatch("masked_l1", self.shape(a), self.shape(b)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask("L1 loss over an empty mask".into()));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold(T::zero(), |acc, ((&x, &y), _)| acc + (x - y).abs());
        let mask = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Ok(self.out(&[1], vec![s / T::lit(count as f64)], Op::MaskedL1 { a, b, mask, count }, &[a, b]))
    }

    /// Mean cross-entropy of `logits[N, C, ...]` against class `labels[N, ...]` over masked positions.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(shape("cross-entropy needs a class axis"));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if labels.len() != n * spatial || mask.len() != n * spatial || labels.iter().any(|&l| l >= c) {
            return Err(mismatch("softmax_ce", &s, &[labels.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask("cross-entropy over an empty mask".into()));
        }
        let d = self.data(logits);
        let mut total = T::zero();
        for (pos, (&l, &m)) in labels.iter().zip(mask).enumerate() {
            if m {
                let (b, p) = (pos / spatial, pos % spatial);
                let at = |ch: usize| d[(b * c + ch) * spatial + p];
                let mx = (0..c).map(at).fold(at(0), |a, v| a.max(v));
                let lse = (0..c).fold(T::zero(), |a, ch| a + (at(ch) - mx).exp()).ln() + mx;
                total += lse - at(l);
            }
        }
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), mask: mask.to_vec(), count };
        Ok(self.out(&[1], vec![total / T::lit(count as f64)], op, &[logits]))
    }

    /// Gradients of the one-element node `loss` with respect to every node on its path.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape(format!("backward from a tensor of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, g, lo);
        }
        Ok(Gradients { grads })
    }

    /// Adds the parameter gradients of `grads` into `params`.
    pub fn accumulate(&self, grads: &Gradients<T>, params: &mut LayerParams<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_deref()) {
                let t = params.get_mut(*id);
                if let Some(dst) = t.grad_mut() {
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }

    fn backprop(&self, i: usize, g: &[T], lo: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(&self.nodes, lo, $v)
            };
        }
        // Each arm fetches one operand slot at a time, so aliased operands accumulate correctly.
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).zip(bd).for_each(|((d, &g), &y)| *d += g * y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).zip(ad).for_each(|((d, &g), &x)| *d += g * x);
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).zip(bd).for_each(|((d, &g), &y)| *d += g / y);
                }
                if let Some(gb) = slot!(*b) {
                    // d(x/y)/dy = -(x/y)/y
                    for (j, d) in gb.iter_mut().enumerate() {
                        *d -= g[j] * val[j] / bd[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, T::one());
                }
            }
            Op::Abs(a) => {
                let ad = self.data(*a);
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d += g[j] * sign(ad[j]);
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        if val[j] > T::zero() {
                            *d += g[j] * T::lit(0.5) / val[j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        if ad[j] > T::zero() {
                            *d += g[j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumLast(a) => {
                let n = *self.shape(*a).last().expect("axis");
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d += g[j / n];
                    }
                }
            }
            Op::MulRows(a, s) => {
                let n = *self.shape(*a).last().expect("axis");
                let (ad, sd) = (self.data(*a), self.data(*s));
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d += g[j] * sd[j / n];
                    }
                }
                if let Some(gs) = slot!(*s) {
                    for (j, (&gj, &x)) in g.iter().zip(ad).enumerate() {
                        gs[j / n] += gj * x;
                    }
                }
            }
            Op::AddRows(a, s) => {
                let n = *self.shape(*a).last().expect("axis");
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gs) = slot!(*s) {
                    for (j, &gj) in g.iter().enumerate() {
                        gs[j / n] += gj;
                    }
                }
            }
            Op::TransposeLast2(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = slot!(*a) {
                    for (b, blk) in ga.chunks_exact_mut(m * n).enumerate() {
                        for ii in 0..m {
                            for jj in 0..n {
                                blk[ii * n + jj] += g[b * m * n + jj * m + ii];
                            }
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let n = *self.shape(*x).last().expect("axis");
                let len = *node.value.shape().last().expect("axis");
                if let Some(gx) = slot!(*x) {
                    for (r, row) in gx.chunks_exact_mut(n).enumerate() {
                        axpy(&mut row[*start..start + len], &g[r * len..(r + 1) * len], T::one());
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().expect("axis");
                let mut offset = 0;
                for &p in parts {
                    let n = *self.shape(p).last().expect("axis");
                    if let Some(gp) = slot!(p) {
                        for (r, row) in gp.chunks_exact_mut(n).enumerate() {
                            axpy(row, &g[r * total + offset..r * total + offset + n], T::one());
                        }
                    }
                    offset += n;
                }
            }
            Op::MatMul { a, b, shared } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batches = self.value(*a).len() / (m * k);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    for i in 0..batches {
                        let bs = if *shared { 0 } else { i * k * n };
                        // dA = G · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..],
                            (n, 1),
                            &bd[bs..],
                            (1, n),
                            T::one(),
                            &mut ga[i * m * k..],
                            (k, 1),
                        );
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..batches {
                        let bs = if *shared { 0 } else { i * k * n };
                        // dB = Aᵀ · G
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &ad[i * m * k..],
                            (1, k),
                            &g[i * m * n..],
                            (n, 1),
                            T::one(),
                            &mut gb[bs..],
                            (n, 1),
                        );
                    }
                }
            }
            Op::NormalizeLast(a) => {
                let n = *self.shape(*a).last().expect("axis");
                let ad = self.data(*a);
                if let Some(ga) = slot!(*a) {
                    for r in 0..ad.len() / n {
                        let rng = r * n..(r + 1) * n;
                        let norm = safe_norm(&ad[rng.clone()]);
                        let y = &val[rng.clone()];
                        let gr = &g[rng.clone()];
                        let dot = y.iter().zip(gr).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                        for (j, d) in ga[rng].iter_mut().enumerate() {
                            *d += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::CrossLast(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    for (r, d) in ga.chunks_exact_mut(3).enumerate() {
                        let c = cross(&bd[3 * r..3 * r + 3], &g[3 * r..3 * r + 3]);
                        axpy(d, &c, T::one());
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (r, d) in gb.chunks_exact_mut(3).enumerate() {
                        let c = cross(&g[3 * r..3 * r + 3], &ad[3 * r..3 * r + 3]);
                        axpy(d, &c, T::one());
                    }
                }
            }
            Op::QuatToMat(q) => {
                let qd = self.data(*q);
                if let Some(gq) = slot!(*q) {
                    for (r, d) in gq.chunks_exact_mut(4).enumerate() {
                        let dq = quat_matrix_vjp(&qd[4 * r..4 * r + 4], &g[9 * r..9 * r + 9]);
                        axpy(d, &dq, T::one());
                    }
                }
            }
            Op::ExpQuat(v) => {
                let vd = self.data(*v);
                if let Some(gv) = slot!(*v) {
                    for (r, d) in gv.chunks_exact_mut(3).enumerate() {
                        let x = &vd[3 * r..3 * r + 3];
                        let gr = &g[4 * r..4 * r + 4];
                        let th = safe_norm_zero(x);
                        let s = sinc(th);
                        let c = sinc_slope_over_x(th);
                        let gx = gr[1] * x[0] + gr[2] * x[1] + gr[3] * x[2];
                        for j in 0..3 {
                            // ∂cos|v|/∂v = -sinc|v| v; ∂(sinc|v| v)/∂v = sinc I + (sinc'/|v|) v vᵀ
                            d[j] += -gr[0] * s * x[j] + s * gr[j + 1] + c * x[j] * gx;
                        }
                    }
                }
            }
            Op::AcosClamped(a) => {
                let ad = self.data(*a);
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        let x = ad[j];
                        if x > -T::one() && x < T::one() {
                            let den = (T::one() - x * x).max(T::lit(1e-12)).sqrt();
                            *d -= g[j] / den;
                        }
                    }
                }
            }
            Op::MinOf { parts, argmin } => {
                for (pi, &p) in parts.iter().enumerate() {
                    if let Some(gp) = slot!(p) {
                        for (j, d) in gp.iter_mut().enumerate() {
                            if argmin[j] as usize == pi {
                                *d += g[j];
                            }
                        }
                    }
                }
            }
            Op::SiteDecode { x, consts } => {
                let xd = self.data(*x);
                if let Some(gx) = slot!(*x) {
                    for (r, c) in consts.iter().enumerate() {
                        let d = &xd[3 * r..3 * r + 3];
                        let gr = &g[3 * r..3 * r + 3];
                        let tz = d[2] * c.ratio;
                        let ox = c.cx + d[0] * c.w;
                        let oy = c.cy + d[1] * c.h;
                        gx[3 * r] += gr[0] * c.w / c.fx * tz;
                        gx[3 * r + 1] += gr[1] * c.h / c.fy * tz;
                        gx[3 * r + 2] += c.ratio * (gr[2] + gr[0] * (ox - c.px) / c.fx + gr[1] * (oy - c.py) / c.fy);
                    }
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let kd = self.data(*k);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![T::zero(); kd.len()]);
                kernels::conv2d_backward(geom, kd, cols, g, dk.as_deref_mut(), slot!(*x));
                if let (Some(gk), Some(dk)) = (slot!(*k), dk) {
                    axpy(gk, &dk, T::one());
                }
            }
            Op::GroupNorm { x, scale, shift, groups, cache } => {
                let sx = self.shape(*x);
                let (c, spatial) = (sx[1], sx[2..].iter().product());
                let sd = self.data(*scale);
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                kernels::group_norm_backward(
                    cache,
                    g,
                    c,
                    spatial,
                    *groups,
                    sd,
                    slot!(*x),
                    Some(&mut dscale),
                    Some(&mut dshift),
                );
                if let Some(gs) = slot!(*scale) {
                    axpy(gs, &dscale, T::one());
                }
                if let Some(gt) = slot!(*shift) {
                    axpy(gt, &dshift, T::one());
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, inp, out) = (sx[0], sx[1], sw[0]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = slot!(*x) {
                    kernels::linear_backward(xd, wd, g, n, inp, out, Some(gx), None, None);
                }
                if let Some(gw) = slot!(*w) {
                    kernels::linear_backward(xd, wd, g, n, inp, out, None, Some(gw), None);
                }
                if let Some(gb) = slot!(*b) {
                    kernels::linear_backward(xd, wd, g, n, inp, out, None, None, Some(gb));
                }
            }
            Op::MaskedL1 { a, b, mask, count } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let w = g[0] / T::lit(*count as f64);
                if let Some(ga) = slot!(*a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d += w * mask[j] * sign(ad[j] - bd[j]);
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (j, d) in gb.iter_mut().enumerate() {
                        *d -= w * mask[j] * sign(ad[j] - bd[j]);
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, mask, count } => {
                let s = self.shape(*logits);
                let (c, spatial) = (s[1], s[2..].iter().product::<usize>());
                let d = self.data(*logits);
                let w = g[0] / T::lit(*count as f64);
                if let Some(gl) = slot!(*logits) {
                    for (pos, (&l, &m)) in labels.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let (b, p) = (pos / spatial, pos % spatial);
                        let idx = |ch: usize| (b * c + ch) * spatial + p;
                        let mx = (0..c).map(|ch| d[idx(ch)]).fold(d[idx(0)], |a, v| a.max(v));
                        let z = (0..c).fold(T::zero(), |a, ch| a + (d[idx(ch)] - mx).exp());
                        for ch in 0..c {
                            let p = (d[idx(ch)] - mx).exp() / z;
                            let t = if ch == l { T::one() } else { T::zero() };
                            gl[idx(ch)] += w * (p - t);
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Real>(nodes: &[Node<T>], lo: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(lo[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]).as_mut_slice())
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += c * s);
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn safe_norm_zero<T: Real>(r: &[T]) -> T {
    r.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

fn safe_norm<T: Real>(r: &[T]) -> T {
    safe_norm_zero(r).max(T::lit(1e-12))
}

fn cross<T: Real>(u: &[T], v: &[T]) -> [T; 3] {
    [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
}

fn sinc<T: Real>(x: T) -> T {
    if x.abs() < T::lit(1e-4) {
        T::one() - x * x / T::lit(6.0)
    } else {
        x.sin() / x
    }
}

/// `sinc'(x) / x`, with its series near zero.
fn sinc_slope_over_x<T: Real>(x: T) -> T {
    if x.abs() < T::lit(1e-2) {
        let x2 = x * x;
        -T::one() / T::lit(3.0) + x2 / T::lit(30.0) - x2 * x2 / T::lit(840.0)
    } else {
        (x * x.cos() - x.sin()) / (x * x * x)
    }
}

fn quat_matrix<T: Real>(q: &[T]) -> [T; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::lit(2.0);
    let one = T::one();
    [
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    ]
}

fn quat_matrix_vjp<T: Real>(q: &[T], g: &[T]) -> [T; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    [
        two * (-z * g[1] + y * g[2] + z * g[3] - x * g[5] - y * g[6] + x * g[7]),
        two * (y * g[1] + z * g[2] + y * g[3] - w * g[5] + z * g[6] + w * g[7]) - four * x * (g[4] + g[8]),
        two * (x * g[1] + w * g[2] + x * g[3] + z * g[5] - w * g[6] + z * g[7]) - four * y * (g[0] + g[8]),
        two * (-w * g[1] + x * g[2] + w * g[3] + y * g[5] + x * g[6] + y * g[7]) - four * z * (g[0] + g[4]),
    ]
}
