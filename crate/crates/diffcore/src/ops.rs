//! Forward operators. Each method validates shapes, computes a fresh value and
//! records the op on the tape.

use ndarray::{Array2, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;

use crate::error::{shape_err, DiffError, Result};
use crate::tape::{Array, Mode, Op, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tape {
    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        broadcast_shape(self.shape(a), self.shape(b))
            .map(|_| ())
            .ok_or_else(|| shape_err(op, format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).mapv(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).mapv(|x| x * c);
        self.push("mul_scalar", v, Op::MulScalar(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    /// `x^p` for non-negative inputs (any real `p`), `0^0 = 1`.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(DiffError::Invalid {
                op: "pow_scalar",
                detail: "negative base".into(),
            });
        }
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push("pow_scalar", v, Op::PowScalar(a, p), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).clone();
        self.record_kinks(&x);
        let v = x.mapv(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let v = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => {
                let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
                let y = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
                x.dot(&y).into_dyn()
            }
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                let mut out = Array::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
                for k in 0..sa[0] {
                    let x = self.value(a).index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    let y = self.value(b).index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    out.index_axis_mut(Axis(0), k).assign(&x.dot(&y));
                }
                out
            }
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// NCHW convolution with a `[out, in, kh, kw]` kernel, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {si:?}, kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(DiffError::Invalid {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;

        let x = self.value(input);
        let xs = x.as_slice().expect("standard layout");
        let ckk = c * kh * kw;
        let mut cols = Array2::<f64>::zeros((n * ho * wo, ckk));
        {
            let cs = cols.as_slice_mut().unwrap();
            for ni in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let row = ((ni * ho + oy) * wo + ox) * ckk;
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    cs[row + (ci * kh + ky) * kw + kx] =
                                        xs[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let wmat = self
            .value(weight)
            .view()
            .into_shape_with_order((o, ckk))
            .map_err(|e| shape_err("conv2d", e.to_string()))?;
        let out2 = cols.dot(&wmat.t());
        let v = out2
            .into_shape_with_order((n, ho, wo, o))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                cols,
            },
            &[input, weight],
        )
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_last(self.value(a));
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| shape_err("log_softmax", "scalar input"))?;
        let mut v = x.as_standard_layout().into_owned();
        for row in v.as_slice_mut().unwrap().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&r| (r - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|r| *r -= lse);
        }
        self.push("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    /// Normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        let mut v = x.as_standard_layout().into_owned();
        let mut inv_std = Vec::with_capacity(v.len() / d.max(1));
        for row in v.as_slice_mut().unwrap().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|r| *r = (*r - mean) * is);
            inv_std.push(is);
        }
        self.push("layer_norm", v, Op::LayerNorm { input: a, inv_std }, &[a])
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::Invalid {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let shape = self.value(a).raw_dim();
        let mut mask = Array::zeros(shape);
        for m in mask.iter_mut() {
            if self.rng.random::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        let v = self.value(a) * &mask;
        self.push("dropout", v, Op::Dropout { input: a, mask }, &[a])
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 4 {
            return Err(shape_err("global_average_pool", format!("expected 4-d input, got {:?}", x.shape())));
        }
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let v = x4.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap().into_dyn();
        self.push("global_average_pool", v, Op::GlobalAvgPool(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
        }
        let views: Vec<_> = inputs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).map_err(|e| shape_err("concat", e.to_string()))?;
        self.push(
            "concat",
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.len() != shape.iter().product::<usize>() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let v = x.as_standard_layout().into_owned().into_shape_with_order(IxDyn(shape)).unwrap();
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim() || axes.iter().any(|&k| k >= seen.len() || std::mem::replace(&mut seen[k], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {:?}", x.shape())));
        }
        let v = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        self.push(
            "permute",
            v,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(shape_err("transpose", "needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(a, &axes)
    }

    /// Row lookup into a `[V, D]` table, giving `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-d, got {:?}", t.shape())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(shape_err("embedding", format!("index {bad} out of range {}", t.shape()[0])));
        }
        let t2 = t.view().into_dimensionality::<Ix2>().unwrap();
        let v = t2.select(Axis(0), indices).into_dyn();
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Array::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let v = Array::from_elem(IxDyn(&[]), x.sum() / x.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(shape_err("sum_axis", format!("axis {axis} for {:?}", x.shape())));
        }
        let v = x.sum_axis(Axis(axis));
        self.push("sum_axis", v, Op::SumAxis { input: a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() || x.shape()[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} for {:?}", x.shape())));
        }
        let v = x.mean_axis(Axis(axis)).unwrap();
        self.push("mean_axis", v, Op::MeanAxis { input: a, axis }, &[a])
    }

    /// `x·W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_err("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, sw[0]])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        if sx.len() != 2 {
            let mut out = sx.clone();
            *out.last_mut().unwrap() = sw[1];
            y = self.reshape(y, &out)?;
        }
        Ok(y)
    }
}

pub(crate) fn softmax_last(x: &Array) -> Array {
    let d = *x.shape().last().unwrap_or(&1);
    let mut v = x.as_standard_layout().into_owned();
    for row in v.as_slice_mut().unwrap().chunks_mut(d.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            s += *r;
        }
        row.iter_mut().for_each(|r| *r /= s);
    }
    v
}

pub(crate) fn softmax_backward(y: &Array, g: &Array) -> Array {
    let d = *y.shape().last().unwrap();
    let g = g.as_standard_layout();
    let mut out = Array::zeros(y.raw_dim());
    let (ys, gs) = (y.as_slice().unwrap(), g.as_slice().unwrap());
    for ((o, yr), gr) in out.as_slice_mut().unwrap().chunks_mut(d).zip(ys.chunks(d)).zip(gs.chunks(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..d {
            o[k] = yr[k] * (gr[k] - dot);
        }
    }
    out
}

pub(crate) fn log_softmax_backward(y: &Array, g: &Array) -> Array {
    let d = *y.shape().last().unwrap();
    let g = g.as_standard_layout();
    let mut out = Array::zeros(y.raw_dim());
    let (ys, gs) = (y.as_slice().unwrap(), g.as_slice().unwrap());
    for ((o, yr), gr) in out.as_slice_mut().unwrap().chunks_mut(d).zip(ys.chunks(d)).zip(gs.chunks(d)) {
        let total: f64 = gr.iter().sum();
        for k in 0..d {
            o[k] = gr[k] - yr[k].exp() * total;
        }
    }
    out
}

pub(crate) fn layer_norm_backward(y: &Array, inv_std: &[f64], g: &Array) -> Array {
    let d = *y.shape().last().unwrap();
    let g = g.as_standard_layout();
    let mut out = Array::zeros(y.raw_dim());
    let (ys, gs) = (y.as_slice().unwrap(), g.as_slice().unwrap());
    let rows = out.as_slice_mut().unwrap().chunks_mut(d).zip(ys.chunks(d)).zip(gs.chunks(d));
    for (((o, yr), gr), &is) in rows.zip(inv_std) {
        let mg = gr.iter().sum::<f64>() / d as f64;
        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for k in 0..d {
            o[k] = is * (gr[k] - mg - yr[k] * mgy);
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    in_shape: &[usize],
    weight: &Array,
    cols: &Array2<f64>,
    stride: usize,
    padding: usize,
    g: &Array,
) -> (Array, Array) {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ws = weight.shape();
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let ckk = c * kh * kw;

    let g2 = g
        .view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * ho * wo, o))
        .unwrap();
    let wmat = weight.view().into_shape_with_order((o, ckk)).unwrap();
    let gw = g2.t().dot(cols).into_shape_with_order(IxDyn(ws)).unwrap();
    let gcols = g2.dot(&wmat);

    let mut gi = Array::zeros(IxDyn(in_shape));
    let gis = gi.as_slice_mut().unwrap();
    let gcs = gcols.as_slice().unwrap();
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((ni * ho + oy) * wo + ox) * ckk;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gis[((ni * c + ci) * h + iy as usize) * w + ix as usize] +=
                                gcs[row + (ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    (gi, gw)
}
