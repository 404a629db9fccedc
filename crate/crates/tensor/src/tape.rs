use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        kh: usize,
        kw: usize,
        seg: usize,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanHeight(Var),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Nll {
        logp: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
    },
    External {
        x: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
///
/// A tape is single-use: build it, call [`Tape::backward`], drop it.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, s, &[0, 0])),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_err(op, s, &[0, 0, 0])),
    }
}

impl Tape {
    /// `training` turns dropout on; `seed` fixes its masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Evaluation-mode tape (dropout disabled).
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that does not need a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (see [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    /// `a · b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2("matmul", self.value(a))?;
        let (k2, m) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2("matmul_nt", self.value(a))?;
        let (m, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds `bias: [m]` to every row of `a: [n, m]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, m) = dims2("add_bias", self.value(a))?;
        if self.shape(bias) != [m] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= s;
        }
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Normalises each row of `x: [n, d]`, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = dims2("layer_norm", self.value(x))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Row lookup into `table: [V, D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embed", self.value(table))?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stride-1 "same" convolution of `x: [Ci, H, W]` with `w: [Co, Ci, kh, kw]`
    /// (odd kernel sizes) and `b: [Co]`. Out-of-image taps read zero.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wd = dims3("conv2d", self.value(x))?.2;
        self.conv2d_segmented(x, w, b, wd)
    }

    /// Like [`Tape::conv2d`], with the width split into independent images
    /// of `seg` columns each: no tap crosses a segment boundary, so a batch
    /// laid side by side convolves exactly like its members one at a time.
    pub fn conv2d_segmented(&mut self, x: Var, w: Var, b: Var, seg: usize) -> Result<Var> {
        let (ci, h, wd) = dims3("conv2d", self.value(x))?;
        if seg == 0 || wd % seg != 0 {
            return Err(shape_err("conv2d", self.shape(x), &[seg]));
        }
        let (co, ci2, kh, kw) = match self.shape(w) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(shape_err("conv2d", self.shape(x), s)),
        };
        if ci != ci2 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [co] {
            return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
        }
        let cols = im2col(self.value(x).data(), ci, h, wd, seg, kh, kw);
        let k = ci * kh * kw;
        let hw = h * wd;
        let mut out = vec![0.0; co * hw];
        let bias = self.value(b).data();
        for (o, row) in out.chunks_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        gemm(co, k, hw, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![co, h, wd], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                kh,
                kw,
                seg,
            },
            rg,
        ))
    }

    /// Per-channel normalisation of `x: [C, H, W]` followed by `gain`, `bias`
    /// (both `[C]`). With `stats == None` each channel is normalised by its
    /// own mean and variance over all `H × W` positions (batch statistics);
    /// otherwise by the given `(mean, var)`, which makes the op a fixed
    /// per-channel affine map. Returns the output and the statistics used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (c, h, w) = dims3("batch_norm", self.value(x))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(gain)));
        }
        if let Some((m, v)) = stats {
            if m.len() != c || v.len() != c {
                return Err(shape_err("batch_norm", self.shape(x), &[m.len(), v.len()]));
            }
        }
        let m = h * w;
        let xs = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * m];
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            let row = &xs[ch * m..(ch + 1) * m];
            let (mean, var) = match stats {
                Some((ms, vs)) => (ms[ch], vs[ch]),
                None => {
                    let mean = row.iter().sum::<f64>() / m as f64;
                    (mean, row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64)
                }
            };
            let is = 1.0 / (var + eps).sqrt();
            means[ch] = mean;
            vars[ch] = var;
            inv_std[ch] = is;
            for j in 0..m {
                let hv = (row[j] - mean) * is;
                xhat[ch * m + j] = hv;
                out[ch * m + j] = hv * gv[ch] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let v = self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
            rg,
        );
        Ok((v, means, vars))
    }

    /// Non-overlapping max pooling of `x: [C, H, W]` with window `kh × kw`.
    pub fn maxpool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let (c, h, w) = dims3("maxpool2d", self.value(x))?;
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(shape_err("maxpool2d", self.shape(x), &[kh, kw]));
        }
        let (oh, ow) = (h / kh, w / kw);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let idx = ch * h * w + (i * kh + di) * w + j * kw + dj;
                            if xs[idx] > best {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = ch * oh * ow + i * ow + j;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Same data under a new shape with the same number of elements.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[n, m] -> [m, n]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, m) = dims2("transpose", self.value(x))?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xs[i * m + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(x), rg))
    }

    /// `[C, H, W] -> [W, C]`, averaging over height.
    pub fn mean_height(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3("mean_height", self.value(x))?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; w * c];
        let inv = 1.0 / h as f64;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[j * c + ch] += xs[ch * h * w + i * w + j] * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![w, c], out)?, Op::MeanHeight(x), rg))
    }

    /// Row-wise softmax of `x + mask` over the last axis of `x: [n, m]`.
    ///
    /// `mask` is additive (`0` or `-inf`) and has shape `[n, m]` or `[m]`.
    /// A row with no finite entry is an error unless `zero_empty_rows`, in
    /// which case it comes out all zeros.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        mask: Option<&Tensor>,
        zero_empty_rows: bool,
    ) -> Result<Var> {
        let (n, m) = dims2("masked_softmax", self.value(x))?;
        if let Some(mk) = mask {
            if mk.shape() != [n, m] && mk.shape() != [m] {
                return Err(shape_err("masked_softmax", self.shape(x), mk.shape()));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                let add = match mask {
                    Some(mk) if mk.len() == m => mk.data()[j],
                    Some(mk) => mk.data()[i * m + j],
                    None => 0.0,
                };
                row[j] = xs[i * m + j] + add;
            }
            let max = row
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                if zero_empty_rows {
                    row.fill(0.0);
                    continue;
                }
                return Err(TensorError::AllMaskedRow { row: i });
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Softmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None, false)
    }

    /// Row-wise log-softmax of `x: [n, m]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = dims2("log_softmax", self.value(x))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        debug_assert_eq!(out.len(), n * m);
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Columns `start..end` of `x: [n, m]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = dims2("slice_cols", self.value(x))?;
        if start > end || end > m {
            return Err(shape_err("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&xs[i * m + start..i * m + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, w], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Horizontal concatenation of `[n, m_i]` blocks.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = match xs.first() {
            Some(&v) => dims2("concat_cols", self.value(v))?.0,
            None => return Err(shape_err("concat_cols", &[], &[])),
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = dims2("concat_cols", self.value(v))?;
            if r != n {
                return Err(shape_err("concat_cols", self.shape(xs[0]), self.shape(v)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let d = self.value(v).data();
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `scale · Σ_i −logp[i, targets[i]]` over rows whose target is `Some`.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>], scale: f64) -> Result<Var> {
        let (n, m) = dims2("nll", self.value(logp))?;
        if targets.len() != n {
            return Err(shape_err("nll", self.shape(logp), &[targets.len()]));
        }
        let lp = self.value(logp).data();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= m {
                    return Err(TensorError::IndexOutOfRange {
                        op: "nll",
                        index: t,
                        size: m,
                    });
                }
                total -= lp[i * m + t];
            }
        }
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// elsewhere (for example a dynamic-programming loss).
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(shape_err("external_scalar", self.shape(x), grad.shape()));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(value),
            Op::External {
                x,
                grad: grad.into_data(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (n, k) = self.value(*a).dims2();
                let m = node.value.dims2().1;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ  (or dC · B when b was used transposed)
                    gemm(n, m, k, g, false, bv, !trans_b, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // B: [m, k], dB = dCᵀ · A
                        gemm(m, n, k, g, true, av, false, 1.0, gb);
                    } else {
                        // B: [k, m], dB = Aᵀ · dC
                        gemm(k, n, m, av, true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), o) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * o;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                let m = node.value.dims2().1;
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(m) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y * s;
                    }
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = node.value.dims2();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let df = d as f64;
                    for i in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = g[i * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dh = g[i * d + j] * gv[j];
                            gx[i * d + j] +=
                                inv_std[i] / df * (df * dh - s1 - xhat[i * d + j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = node.value.dims2().1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                kh,
                kw,
                seg,
            } => {
                let (ci, h, wd) = match self.shape(*x) {
                    [a, b, c] => (*a, *b, *c),
                    _ => unreachable!(),
                };
                let co = node.value.shape()[0];
                let hw = h * wd;
                let k = ci * kh * kw;
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, row) in g.chunks(hw).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(co, hw, k, g, false, cols, true, 1.0, gw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; k * hw];
                    gemm(k, co, hw, self.value(*w).data(), true, g, false, 0.0, &mut dcols);
                    let gx = self.acc(grads, *x).expect("requires grad");
                    col2im_add(&dcols, gx, ci, h, wd, *seg, *kh, *kw);
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = g.len() / c.max(1);
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for ch in 0..c {
                        gg[ch] += (0..m).map(|j| g[ch * m + j] * xhat[ch * m + j]).sum::<f64>();
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for ch in 0..c {
                        gb[ch] += g[ch * m..(ch + 1) * m].iter().sum::<f64>();
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mf = m as f64;
                    for ch in 0..c {
                        let r = ch * m..(ch + 1) * m;
                        let k = gv[ch] * inv_std[ch];
                        if *batch_stats {
                            let s1: f64 = g[r.clone()].iter().sum();
                            let s2: f64 = g[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                            for j in r {
                                gx[j] += k / mf * (mf * g[j] - s1 - xhat[j] * s2);
                            }
                        } else {
                            for j in r {
                                gx[j] += k * g[j];
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::MeanHeight(x) => {
                let (c, h, w) = match self.shape(*x) {
                    [a, b, c] => (*a, *b, *c),
                    _ => unreachable!(),
                };
                if let Some(gx) = self.acc(grads, *x) {
                    let inv = 1.0 / h as f64;
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[ch * h * w + i * w + j] += g[j * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (_, m) = node.value.dims2();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (_, m) = node.value.dims2();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..m {
                            gxr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (n, w) = node.value.dims2();
                let m = self.value(*x).dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        for j in 0..w {
                            gx[i * m + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let (n, total) = node.value.dims2();
                let mut off = 0;
                for &v in xs {
                    let w = self.value(v).dims2().1;
                    if let Some(gv) = self.acc(grads, v) {
                        for i in 0..n {
                            for j in 0..w {
                                gv[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Transpose(x) => {
                let (n, m) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        for j in 0..m {
                            gx[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Nll {
                logp,
                targets,
                scale,
            } => {
                let m = self.value(*logp).dims2().1;
                if let Some(gl) = self.acc(grads, *logp) {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            gl[i * m + t] -= scale * g[0];
                        }
                    }
                }
            }
            Op::External { x, grad } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(grad) {
                        *a += b * g[0];
                    }
                }
            }
        }
    }
}

/// Column range `lo..hi` of a `seg`-wide segment whose tap at offset `off` stays inside it.
fn tap_range(seg: usize, off: isize) -> (usize, usize) {
    if off < 0 {
        (((-off) as usize).min(seg), seg)
    } else {
        (0, seg.saturating_sub(off as usize))
    }
}

fn im2col(x: &[f64], ci: usize, h: usize, w: usize, seg: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0; ci * kh * kw * hw];
    for c in 0..ci {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let off = dj as isize - pw as isize;
                let (lo, hi) = tap_range(seg, off);
                for i in 0..h {
                    let si = i as isize + di as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &x[c * hw + si as usize * w..c * hw + (si as usize + 1) * w];
                    let d = &mut dst[i * w..(i + 1) * w];
                    for s0 in (0..w).step_by(seg) {
                        for j in s0 + lo..s0 + hi {
                            d[j] = src[(j as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], gx: &mut [f64], ci: usize, h: usize, w: usize, seg: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for c in 0..ci {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                let src = &cols[row * hw..(row + 1) * hw];
                let off = dj as isize - pw as isize;
                let (lo, hi) = tap_range(seg, off);
                for i in 0..h {
                    let si = i as isize + di as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = c * hw + si as usize * w;
                    for s0 in (0..w).step_by(seg) {
                        for j in s0 + lo..s0 + hi {
                            gx[base + (j as isize + off) as usize] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` took part in it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Add every parameter-leaf gradient into the store. Frozen parameters are skipped.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g.data());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::eval();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul_is_identity() {
        let mut tape = Tape::eval();
        let x = random(&[3, 4], 1);
        let i = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::eval();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn uniform_softmax_is_quarter() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(vec![1, 4]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_survivor_takes_all_mass() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        let mask = t(&[2], &[0.0, f64::NEG_INFINITY]);
        let y = tape.masked_softmax(x, Some(&mask), false).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error_unless_zeroed() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        let mask = t(&[2, 2], &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let err = tape.masked_softmax(x, Some(&mask), false).unwrap_err();
        assert!(matches!(err, TensorError::AllMaskedRow { row: 1 }));
        let y = tape.masked_softmax(x, Some(&mask), true).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::full(vec![64], 1.0));
        assert_eq!(tape.dropout(x, 0.5), x);

        let run = |seed| {
            let mut tape = Tape::new(true, seed);
            let x = tape.constant(Tensor::full(vec![64], 1.0));
            let y = tape.dropout(x, 0.5);
            tape.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        let kept = run(3).data().iter().filter(|v| **v > 0.0).count();
        assert!(kept > 10 && kept < 54);
        assert!(run(3).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn maxpool_rejects_ragged_windows() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4]));
        assert!(tape.maxpool2d(x, 2, 2).is_err());
    }

    // Every differentiable op against central finite differences, read out
    // through a quadratic so the upstream gradient is not constant.
    fn readout(tape: &mut Tape, y: Var) -> Var {
        let w = tape.constant(random(tape.shape(y), 99));
        let s = tape.add(y, w).unwrap();
        let sq = tape.mul(s, s).unwrap();
        tape.sum(sq)
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let worst = check_gradients(&inputs, 1e-3, |tape, vars| {
            let y = f(tape, vars);
            Ok(readout(tape, y))
        })
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn grad_matmul() {
        check(vec![random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        });
        check(vec![random(&[3, 4], 3), random(&[2, 4], 4)], |t, v| {
            t.matmul_nt(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn grad_add_bias_scale_relu() {
        check(vec![random(&[3, 4], 5), random(&[3, 4], 6)], |t, v| t.add(v[0], v[1]).unwrap());
        check(vec![random(&[3, 4], 7), random(&[4], 8)], |t, v| {
            t.add_bias(v[0], v[1]).unwrap()
        });
        check(vec![random(&[3, 4], 9)], |t, v| t.scale(v[0], -1.7));
        check(vec![random(&[3, 4], 10)], |t, v| t.relu(v[0]));
        check(vec![random(&[3, 4], 27), random(&[3, 4], 28)], |t, v| t.mul(v[0], v[1]).unwrap());
    }

    #[test]
    fn grad_layer_norm() {
        check(
            vec![random(&[3, 4], 11), random(&[4], 12), random(&[4], 13)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
    }

    #[test]
    fn grad_dropout_embed() {
        check(vec![random(&[3, 4], 14)], |t, v| t.dropout(v[0], 0.3));
        check(vec![random(&[5, 4], 15)], |t, v| t.embed(v[0], &[0, 3, 3, 1]).unwrap());
    }

    #[test]
    fn grad_conv_pool_mean() {
        check(
            vec![random(&[2, 3, 4], 16), random(&[3, 2, 3, 3], 17), random(&[3], 18)],
            |t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
        );
        check(vec![random(&[2, 4, 4], 19)], |t, v| t.maxpool2d(v[0], 2, 2).unwrap());
        check(vec![random(&[2, 3, 4], 20)], |t, v| t.mean_height(v[0]).unwrap());
        check(vec![random(&[2, 3, 4], 21)], |t, v| {
            let r = t.reshape(v[0], &[4, 6]).unwrap();
            t.slice_cols(r, 1, 4).unwrap()
        });
        check(vec![random(&[3, 5], 22)], |t, v| t.transpose(v[0]).unwrap());
    }

    #[test]
    fn grad_segmented_conv_and_batch_norm() {
        check(
            vec![random(&[2, 3, 6], 30), random(&[2, 2, 3, 3], 31), random(&[2], 32)],
            |t, v| t.conv2d_segmented(v[0], v[1], v[2], 3).unwrap(),
        );
        check(vec![random(&[2, 3, 4], 33), random(&[2], 34), random(&[2], 35)], |t, v| {
            t.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap().0
        });
        check(vec![random(&[2, 3, 4], 36), random(&[2], 37), random(&[2], 38)], |t, v| {
            t.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5).unwrap().0
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (ci, h, w, co, kh, kw) = (2, 4, 5, 3, 3, 5);
        let x = random(&[ci, h, w], 40);
        let wt = random(&[co, ci, kh, kw], 41);
        let b = random(&[co], 42);
        let mut tape = Tape::eval();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        let out = tape.value(y).data();
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (si, sj) = (i + di, j + dj);
                                if si < kh / 2 || sj < kw / 2 || si - kh / 2 >= h || sj - kw / 2 >= w {
                                    continue;
                                }
                                acc += wt.data()[((o * ci + c) * kh + di) * kw + dj]
                                    * x.data()[(c * h + si - kh / 2) * w + sj - kw / 2];
                            }
                        }
                    }
                    assert!((out[(o * h + i) * w + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn segments_do_not_interact() {
        let (a, b) = (random(&[2, 3, 4], 50), random(&[2, 3, 4], 51));
        let wt = random(&[3, 2, 3, 3], 52);
        let bias = random(&[3], 53);
        let single = |x: &Tensor| {
            let mut tape = Tape::eval();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
            let y = tape.conv2d(xv, wv, bv).unwrap();
            tape.value(y).clone()
        };
        let (ya, yb) = (single(&a), single(&b));
        let mut joined = Vec::new();
        for r in 0..6 {
            joined.extend_from_slice(&a.data()[r * 4..(r + 1) * 4]);
            joined.extend_from_slice(&b.data()[r * 4..(r + 1) * 4]);
        }
        let mut tape = Tape::eval();
        let xv = tape.constant(Tensor::new(vec![2, 3, 8], joined).unwrap());
        let (wv, bv) = (tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d_segmented(xv, wv, bv, 4).unwrap();
        let out = tape.value(y).data();
        for r in 0..9 {
            assert_eq!(&out[r * 8..r * 8 + 4], &ya.data()[r * 4..(r + 1) * 4]);
            assert_eq!(&out[r * 8 + 4..r * 8 + 8], &yb.data()[r * 4..(r + 1) * 4]);
        }
    }

    #[test]
    fn grad_softmaxes() {
        let mask = t(
            &[3, 4],
            &[
                0.0,
                f64::NEG_INFINITY,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                f64::NEG_INFINITY,
                0.0,
                f64::NEG_INFINITY,
                0.0,
            ],
        );
        check(vec![random(&[3, 4], 21)], move |t, v| {
            t.masked_softmax(v[0], Some(&mask), false).unwrap()
        });
        check(vec![random(&[3, 4], 22)], |t, v| t.log_softmax(v[0]).unwrap());
    }

    #[test]
    fn grad_slice_concat_nll() {
        check(vec![random(&[3, 4], 23)], |t, v| t.slice_cols(v[0], 1, 3).unwrap());
        check(vec![random(&[3, 2], 24), random(&[3, 3], 25)], |t, v| {
            t.concat_cols(&[v[0], v[1]]).unwrap()
        });
        let worst = check_gradients(&[random(&[3, 4], 26)], 1e-3, |t, v| {
            let lp = t.log_softmax(v[0])?;
            t.nll(lp, &[Some(1), None, Some(3)], 0.5)
        })
        .unwrap();
        assert!(worst < 1e-4);
    }
}
