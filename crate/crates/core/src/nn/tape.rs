//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of a
//! scalar output with respect to every node that was created from a
//! gradient-requiring leaf.

use std::ops::Range;
use std::rc::Rc;

use super::tensor::{gemm, Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix used as a constant operator (normalized
/// adjacency, block-diagonal batches).
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                t.data[r * self.n_cols + self.indices[p]] += self.values[p];
            }
        }
        t
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.indptr[r]..self.indptr[r + 1])
            .find(|&p| self.indices[p] == c)
            .map_or(0.0, |p| self.values[p])
    }

    /// Block-diagonal concatenation.
    pub fn block_diag(blocks: &[&Csr]) -> Self {
        let mut trip = Vec::new();
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            for r in 0..b.n_rows {
                for p in b.indptr[r]..b.indptr[r + 1] {
                    trip.push((r0 + r, c0 + b.indices[p], b.values[p]));
                }
            }
            r0 += b.n_rows;
            c0 += b.n_cols;
        }
        Self::from_triplets(r0, c0, trip)
    }

    /// `self · x` for a row-major `[n_cols, d]` tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.n_cols, "sparse product row count");
        let d = x.cols();
        let mut out = Tensor::zeros(&[self.n_rows, d]);
        self.spmm(&x.data, d, &mut out.data);
        out
    }

    fn spmm(&self, x: &[f64], d: usize, out: &mut [f64]) {
        for r in 0..self.n_rows {
            let o = &mut out[r * d..(r + 1) * d];
            for p in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[p];
                let xr = &x[self.indices[p] * d..(self.indices[p] + 1) * d];
                for (a, b) in o.iter_mut().zip(xr) {
                    *a += v * b;
                }
            }
        }
    }

    fn spmm_t(&self, g: &[f64], d: usize, out: &mut [f64]) {
        for r in 0..self.n_rows {
            let gr = &g[r * d..(r + 1) * d];
            for p in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[p];
                let c = self.indices[p];
                for (a, b) in out[c * d..(c + 1) * d].iter_mut().zip(gr) {
                    *a += v * b;
                }
            }
        }
    }
}

/// Query rows attend only to key rows of the same segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Sum,
    Max,
}

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    SpMM(Rc<Csr>, Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SliceChannels { x: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    Upsample { x: Var, factor: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Rc<Vec<AttnSegment>>,
        /// Per segment, per head, row-major `nq×nk` softmax weights.
        probs: Vec<Vec<Vec<f64>>>,
    },
    SegmentPool { x: Var, segs: Rc<Vec<Range<usize>>>, mode: PoolMode, argmax: Vec<usize> },
    SoftmaxPool { x: Var, scores: Var, segs: Rc<Vec<Range<usize>>>, weights: Vec<f64> },
    Sum(Var),
    Mse(Var, Var),
    Kl { mu: Var, logvar: Var, n_entities: usize },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>> },
    Cox { risks: Var, times: Rc<Vec<f64>>, events: Rc<Vec<bool>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation
    const K: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044_715;
    let u = K * (x + C * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * K * (1.0 + 3.0 * C * x * x);
    (y, dy)
}

pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x).0
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(n: usize, k: usize, spec: &ConvSpec) -> usize {
    (n + 2 * spec.pad - k) / spec.stride + 1
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn assert_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let v = self.value(a).matmul(self.value(b)).expect("checked shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Var {
        self.assert_same(a, b, what);
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let v = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `a[n, d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(b).len();
        assert_eq!(self.value(a).cols(), d, "add_row width");
        let mut v = self.value(a).clone();
        let bd = &self.value(b).data;
        for row in v.data.chunks_mut(d.max(1)) {
            for (x, y) in row.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    /// `a[n, d] * b[d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(b).len();
        assert_eq!(self.value(a).cols(), d, "mul_row width");
        let mut v = self.value(a).clone();
        let bd = &self.value(b).data;
        for row in v.data.chunks_mut(d.max(1)) {
            for (x, y) in row.iter_mut().zip(bd) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = f(*x));
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| gelu(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Constant sparse operator applied on the left: `m · x`.
    pub fn spmm(&mut self, m: Rc<Csr>, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 2, "spmm expects a matrix");
        assert_eq!(m.n_cols, xv.shape[0], "spmm: operator has {} columns, input {} rows", m.n_cols, xv.shape[0]);
        let d = xv.shape[1];
        let mut out = Tensor::zeros(&[m.n_rows, d]);
        m.spmm(&xv.data, d, &mut out.data);
        let ng = self.ng(x);
        self.push(out, Op::SpMM(m, x), ng)
    }

    /// Row-wise normalization to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(n);
        for row in out.data.chunks_mut(d.max(1)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// Channels `start..start+len` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, len, h, w]);
        for bi in 0..b {
            let src = &xv.data[(bi * c + start) * hw..(bi * c + start + len) * hw];
            out.data[bi * len * hw..(bi + 1) * len * hw].copy_from_slice(src);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceChannels { x, start }, ng)
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, c, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (o, k) = (wv.shape[0], wv.shape[2]);
        assert_eq!(wv.shape[1], c, "conv2d channel mismatch");
        let ho = conv_out(h, k, &spec);
        let wo = conv_out(wd, k, &spec);
        let ckk = c * k * k;
        let mut out = Tensor::zeros(&[bs, o, ho, wo]);
        let mut cols = vec![0.0; ckk * ho * wo];
        let bias = &self.value(b).data;
        for bi in 0..bs {
            im2col(
                &xv.data[bi * c * h * wd..(bi + 1) * c * h * wd],
                c,
                h,
                wd,
                k,
                &spec,
                ho,
                wo,
                &mut cols,
            );
            let dst = &mut out.data[bi * o * ho * wo..(bi + 1) * o * ho * wo];
            for (oi, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oi]);
            }
            gemm(o, ckk, ho * wo, &wv.data, Layout::Row(ckk), &cols, Layout::Row(ho * wo), dst, 1.0);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv2d { x, w, b, spec }, ng)
    }

    /// Nearest-neighbour spatial upsampling of `[B, C, H, W]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (h2, w2) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[b, c, h2, w2]);
        for p in 0..b * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out.data[(p * h2 + y) * w2 + xx] = xv.data[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    /// Multi-head scaled dot-product attention restricted to segments.
    /// Query rows outside every segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: Rc<Vec<AttnSegment>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(kv.rows(), vv.rows());
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[qv.rows(), d]);
        let mut probs = Vec::with_capacity(segs.len());
        for seg in segs.iter() {
            let nk = seg.keys.len();
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let off = hd * dh;
                let mut p = vec![0.0; seg.queries.len() * nk];
                for (qi, qr) in seg.queries.clone().enumerate() {
                    let qrow = &qv.data[qr * d + off..qr * d + off + dh];
                    let prow = &mut p[qi * nk..(qi + 1) * nk];
                    for (ki, kr) in seg.keys.clone().enumerate() {
                        let krow = &kv.data[kr * d + off..kr * d + off + dh];
                        prow[ki] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    if nk > 0 {
                        softmax_in_place(prow);
                    }
                    let orow = &mut out.data[qr * d + off..qr * d + off + dh];
                    for (ki, kr) in seg.keys.clone().enumerate() {
                        let vrow = &vv.data[kr * d + off..kr * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += prow[ki] * x;
                        }
                    }
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            },
            ng,
        )
    }

    /// Attention weights recorded by an [`Tape::attention`] node:
    /// `[segment][head][query * n_keys + key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&Vec<Vec<Vec<f64>>>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Pools the rows of each segment into one output row.
    pub fn segment_pool(&mut self, x: Var, segs: Rc<Vec<Range<usize>>>, mode: PoolMode) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(&[segs.len(), d]);
        let mut argmax = Vec::new();
        for (si, seg) in segs.iter().enumerate() {
            assert!(!seg.is_empty(), "empty pooling segment");
            let o = &mut out.data[si * d..(si + 1) * d];
            match mode {
                PoolMode::Mean | PoolMode::Sum => {
                    for r in seg.clone() {
                        for (a, b) in o.iter_mut().zip(xv.row(r)) {
                            *a += b;
                        }
                    }
                    if mode == PoolMode::Mean {
                        let n = seg.len() as f64;
                        o.iter_mut().for_each(|v| *v /= n);
                    }
                }
                PoolMode::Max => {
                    for j in 0..d {
                        let mut best = seg.start;
                        for r in seg.clone() {
                            if xv.data[r * d + j] > xv.data[best * d + j] {
                                best = r;
                            }
                        }
                        o[j] = xv.data[best * d + j];
                        argmax.push(best);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentPool { x, segs, mode, argmax }, ng)
    }

    /// Softmax-weighted pooling: weights are the per-segment softmax of
    /// `scores` (`[n, 1]`).
    pub fn softmax_pool(&mut self, x: Var, scores: Var, segs: Rc<Vec<Range<usize>>>) -> Var {
        let xv = self.value(x);
        let sv = self.value(scores);
        assert_eq!(sv.len(), xv.rows());
        let d = xv.cols();
        let mut weights = sv.data.clone();
        let mut out = Tensor::zeros(&[segs.len(), d]);
        for (si, seg) in segs.iter().enumerate() {
            assert!(!seg.is_empty(), "empty pooling segment");
            softmax_in_place(&mut weights[seg.clone()]);
            let o = &mut out.data[si * d..(si + 1) * d];
            for r in seg.clone() {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += weights[r] * b;
                }
            }
        }
        let ng = self.ng(x) || self.ng(scores);
        self.push(
            out,
            Op::SoftmaxPool {
                x,
                scores,
                segs,
                weights,
            },
            ng,
        )
    }

    /// Softmax weights recorded by a [`Tape::softmax_pool`] node.
    pub fn pool_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxPool { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean squared difference; 0 for empty operands.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "mse");
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len();
        let s = if n == 0 {
            0.0
        } else {
            va.data.iter().zip(&vb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), ng)
    }

    /// `0.5·Σ(μ² + e^{logvar} − logvar − 1) / n_entities`.
    pub fn kl(&mut self, mu: Var, logvar: Var, n_entities: usize) -> Var {
        self.assert_same(mu, logvar, "kl");
        let s = self
            .value(mu)
            .data
            .iter()
            .zip(&self.value(logvar).data)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
            * 0.5
            / n_entities as f64;
        let ng = self.ng(mu) || self.ng(logvar);
        self.push(
            Tensor::scalar(s),
            Op::Kl {
                mu,
                logvar,
                n_entities,
            },
            ng,
        )
    }

    /// Softmax cross-entropy averaged over rows of `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), b);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            assert!(y < c);
            total += lse - row[y];
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(total / b as f64), Op::CrossEntropy { logits, labels }, ng)
    }

    /// Negative Cox partial log-likelihood, averaged over events. The risk
    /// set of subject `i` is `{j : t_j ≥ t_i}`.
    pub fn cox(&mut self, risks: Var, times: Rc<Vec<f64>>, events: Rc<Vec<bool>>) -> Var {
        let h = &self.value(risks).data;
        let loss = cox_value(h, &times, &events);
        let ng = self.ng(risks);
        self.push(Tensor::scalar(loss), Op::Cox { risks, times, events }, ng)
    }

    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(&self.nodes[out.0].value.shape, 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.nodes[v.0].value.shape));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                self.acc(grads, *a, |ga| {
                    gemm(m, n, k, &g.data, Layout::Row(n), &vb.data, Layout::Trans(n), &mut ga.data, 1.0)
                });
                self.acc(grads, *b, |gb| {
                    gemm(k, m, n, &va.data, Layout::Trans(k), &g.data, Layout::Row(n), &mut gb.data, 1.0)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |t| t.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |t| t.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |t| t.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |t| {
                    for ((x, gg), o) in t.data.iter_mut().zip(&g.data).zip(&vb.data) {
                        *x += gg * o;
                    }
                });
                self.acc(grads, *b, |t| {
                    for ((x, gg), o) in t.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *x += gg * o;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = self.value(*b).len();
                self.acc(grads, *a, |t| t.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |t| {
                    for row in g.data.chunks(d.max(1)) {
                        t.data.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = vb.len();
                self.acc(grads, *a, |t| {
                    for (trow, grow) in t.data.chunks_mut(d.max(1)).zip(g.data.chunks(d.max(1))) {
                        for ((x, gg), w) in trow.iter_mut().zip(grow).zip(&vb.data) {
                            *x += gg * w;
                        }
                    }
                });
                self.acc(grads, *b, |t| {
                    for (arow, grow) in va.data.chunks(d.max(1)).zip(g.data.chunks(d.max(1))) {
                        for ((x, gg), av) in t.data.iter_mut().zip(grow).zip(arow) {
                            *x += gg * av;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |t| t.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += c * y));
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, |t| {
                    for ((x, gg), xin) in t.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *x += gg * gelu(*xin).1;
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |t| {
                    for ((x, gg), s) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += gg * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |t| {
                    for ((x, gg), e) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += gg * e;
                    }
                });
            }
            Op::SpMM(m, x) => {
                let d = y.cols();
                self.acc(grads, *x, |t| m.spmm_t(&g.data, d, &mut t.data));
            }
            Op::LayerNorm { x, rstd } => {
                let d = y.cols();
                self.acc(grads, *x, |t| {
                    for (r, ((trow, grow), yrow)) in t
                        .data
                        .chunks_mut(d.max(1))
                        .zip(g.data.chunks(d.max(1)))
                        .zip(y.data.chunks(d.max(1)))
                        .enumerate()
                    {
                        let mg = grow.iter().sum::<f64>() / d as f64;
                        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((tx, gg), yy) in trow.iter_mut().zip(grow).zip(yrow) {
                            *tx += rstd[r] * (gg - mg - yy * mgy);
                        }
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let len = y.shape[1];
                let hw = h * w;
                self.acc(grads, *x, |t| {
                    for bi in 0..b {
                        let dst = &mut t.data[(bi * c + start) * hw..(bi * c + start + len) * hw];
                        let src = &g.data[bi * len * hw..(bi + 1) * len * hw];
                        dst.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bs, c, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
                let (o, k) = (wv.shape[0], wv.shape[2]);
                let (ho, wo) = (y.shape[2], y.shape[3]);
                let ckk = c * k * k;
                let hw = ho * wo;
                let mut cols = vec![0.0; ckk * hw];
                let mut gcols = vec![0.0; ckk * hw];
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                for bi in 0..bs {
                    let gb = &g.data[bi * o * hw..(bi + 1) * o * hw];
                    self.acc(grads, *b, |t| {
                        for (oi, chunk) in gb.chunks(hw).enumerate() {
                            t.data[oi] += chunk.iter().sum::<f64>();
                        }
                    });
                    if need_w {
                        im2col(&xv.data[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, spec, ho, wo, &mut cols);
                        self.acc(grads, *w, |t| {
                            gemm(o, hw, ckk, gb, Layout::Row(hw), &cols, Layout::Trans(hw), &mut t.data, 1.0)
                        });
                    }
                    if need_x {
                        gemm(ckk, o, hw, &wv.data, Layout::Trans(ckk), gb, Layout::Row(hw), &mut gcols, 0.0);
                        self.acc(grads, *x, |t| {
                            col2im(&gcols, c, h, wd, k, spec, ho, wo, &mut t.data[bi * c * h * wd..(bi + 1) * c * h * wd])
                        });
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let xs = self.shape(*x);
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (h2, w2) = (h * factor, w * factor);
                self.acc(grads, *x, |t| {
                    for p in 0..b * c {
                        for yy in 0..h2 {
                            for xx in 0..w2 {
                                t.data[(p * h + yy / factor) * w + xx / factor] += g.data[(p * h2 + yy) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                for (seg, per_head) in segs.iter().zip(probs) {
                    let nk = seg.keys.len();
                    if nk == 0 {
                        continue;
                    }
                    for (hd, p) in per_head.iter().enumerate() {
                        let off = hd * dh;
                        for (qi, qr) in seg.queries.clone().enumerate() {
                            let prow = &p[qi * nk..(qi + 1) * nk];
                            let grow = &g.data[qr * d + off..qr * d + off + dh];
                            // dP = gO · Vᵀ ; dV += Pᵀ gO
                            let mut dp = vec![0.0; nk];
                            for (ki, kr) in seg.keys.clone().enumerate() {
                                let vrow = &vv.data[kr * d + off..kr * d + off + dh];
                                dp[ki] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                for (gvv, gg) in gv[kr * d + off..kr * d + off + dh].iter_mut().zip(grow) {
                                    *gvv += prow[ki] * gg;
                                }
                            }
                            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (ki, kr) in seg.keys.clone().enumerate() {
                                let ds = prow[ki] * (dp[ki] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for j in 0..dh {
                                    gq[qr * d + off + j] += ds * kv.data[kr * d + off + j];
                                    gk[kr * d + off + j] += ds * qv.data[qr * d + off + j];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, |t| t.data.iter_mut().zip(&gq).for_each(|(a, b)| *a += b));
                self.acc(grads, *k, |t| t.data.iter_mut().zip(&gk).for_each(|(a, b)| *a += b));
                self.acc(grads, *v, |t| t.data.iter_mut().zip(&gv).for_each(|(a, b)| *a += b));
            }
            Op::SegmentPool { x, segs, mode, argmax } => {
                let d = y.cols();
                self.acc(grads, *x, |t| {
                    for (si, seg) in segs.iter().enumerate() {
                        let grow = &g.data[si * d..(si + 1) * d];
                        match mode {
                            PoolMode::Mean | PoolMode::Sum => {
                                let f = if *mode == PoolMode::Mean { 1.0 / seg.len() as f64 } else { 1.0 };
                                for r in seg.clone() {
                                    for (a, b) in t.data[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                        *a += f * b;
                                    }
                                }
                            }
                            PoolMode::Max => {
                                for j in 0..d {
                                    let r = argmax[si * d + j];
                                    t.data[r * d + j] += grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxPool {
                x,
                scores,
                segs,
                weights,
            } => {
                let xv = self.value(*x);
                let d = xv.cols();
                self.acc(grads, *x, |t| {
                    for (si, seg) in segs.iter().enumerate() {
                        let grow = &g.data[si * d..(si + 1) * d];
                        for r in seg.clone() {
                            for (a, b) in t.data[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                *a += weights[r] * b;
                            }
                        }
                    }
                });
                self.acc(grads, *scores, |t| {
                    for (si, seg) in segs.iter().enumerate() {
                        let grow = &g.data[si * d..(si + 1) * d];
                        let gw: Vec<f64> = seg
                            .clone()
                            .map(|r| xv.row(r).iter().zip(grow).map(|(a, b)| a * b).sum())
                            .collect();
                        let dot: f64 = seg.clone().zip(&gw).map(|(r, gwr)| weights[r] * gwr).sum();
                        for (r, gwr) in seg.clone().zip(&gw) {
                            t.data[r] += weights[r] * (gwr - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gg = g.item();
                self.acc(grads, *a, |t| t.data.iter_mut().for_each(|x| *x += gg));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.len();
                if n == 0 {
                    return;
                }
                let f = 2.0 * g.item() / n as f64;
                self.acc(grads, *a, |t| {
                    for ((x, p), q) in t.data.iter_mut().zip(&va.data).zip(&vb.data) {
                        *x += f * (p - q);
                    }
                });
                self.acc(grads, *b, |t| {
                    for ((x, p), q) in t.data.iter_mut().zip(&va.data).zip(&vb.data) {
                        *x -= f * (p - q);
                    }
                });
            }
            Op::Kl { mu, logvar, n_entities } => {
                let f = g.item() / *n_entities as f64;
                let (vm, vl) = (self.value(*mu), self.value(*logvar));
                self.acc(grads, *mu, |t| t.data.iter_mut().zip(&vm.data).for_each(|(x, m)| *x += f * m));
                self.acc(grads, *logvar, |t| {
                    t.data.iter_mut().zip(&vl.data).for_each(|(x, l)| *x += f * 0.5 * (l.exp() - 1.0))
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (b, c) = (lv.rows(), lv.cols());
                let f = g.item() / b as f64;
                self.acc(grads, *logits, |t| {
                    for (i, &lab) in labels.iter().enumerate() {
                        let mut p = lv.row(i).to_vec();
                        softmax_in_place(&mut p);
                        for j in 0..c {
                            t.data[i * c + j] += f * (p[j] - if j == lab { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::Cox { risks, times, events } => {
                let h = &self.value(*risks).data;
                let gr = cox_grad(h, times, events);
                let f = g.item();
                self.acc(grads, *risks, |t| t.data.iter_mut().zip(&gr).for_each(|(x, d)| *x += f * d));
            }
        }
    }
}

fn cox_value(h: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let n_events = events.iter().filter(|e| **e).count();
    let mut total = 0.0;
    for i in 0..h.len() {
        if !events[i] {
            continue;
        }
        let m = (0..h.len())
            .filter(|&j| times[j] >= times[i])
            .map(|j| h[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..h.len()).filter(|&j| times[j] >= times[i]).map(|j| (h[j] - m).exp()).sum();
        total += m + s.ln() - h[i];
    }
    total / n_events as f64
}

fn cox_grad(h: &[f64], times: &[f64], events: &[bool]) -> Vec<f64> {
    let n_events = events.iter().filter(|e| **e).count() as f64;
    let mut g = vec![0.0; h.len()];
    for i in 0..h.len() {
        if !events[i] {
            continue;
        }
        g[i] -= 1.0;
        let set: Vec<usize> = (0..h.len()).filter(|&j| times[j] >= times[i]).collect();
        let m = set.iter().map(|&j| h[j]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = set.iter().map(|&j| (h[j] - m).exp()).sum();
        for &j in &set {
            g[j] += (h[j] - m).exp() / s;
        }
    }
    g.iter_mut().for_each(|v| *v /= n_events);
    g
}
