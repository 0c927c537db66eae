//! Dense layer primitives and their reverse rules.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Op, Tape, Var};
use crate::tensor::value::Tensor;

type Grads<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation (no kernel flip) over `[N, C, H, W]` input with an
    /// `[O, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err!("conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"));
        }
        if xs[1] != ks[1] {
            return Err(dim_err!("conv2d: input has {} channels, kernel expects {}", xs[1], ks[1]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(dim_err!("conv2d stride must be at least 1"));
        }
        let (h, w) = (xs[2] + 2 * pad.0, xs[3] + 2 * pad.1);
        if ks[2] > h || ks[3] > w {
            return Err(dim_err!("conv2d kernel {}x{} larger than padded input {h}x{w}", ks[2], ks[3]));
        }
        let geo = ConvGeom::new(&xs, &ks, stride, pad);
        let x = self.value(input).values();
        let k = self.value(kernel).values();
        let mut out = vec![T::zero(); geo.n * geo.o * geo.oh * geo.ow];
        for n in 0..geo.n {
            for o in 0..geo.o {
                let obase = (n * geo.o + o) * geo.oh * geo.ow;
                for c in 0..geo.c {
                    let xbase = (n * geo.c + c) * geo.h * geo.w;
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            let kv = k[((o * geo.c + c) * geo.kh + ky) * geo.kw + kx];
                            geo.for_each_tap(ky, kx, |oi, xi| out[obase + oi] += kv * x[xbase + xi]);
                        }
                    }
                }
            }
        }
        drop((x, k));
        let value = Tensor::from_parts(vec![geo.n, geo.o, geo.oh, geo.ow], out);
        self.push(value, Op::Conv2d { input, kernel, stride, pad }, &[input, kernel], "conv2d")
    }

    /// Affine map over the trailing axis: `input · weightᵀ + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let din = *xs.last().ok_or_else(|| dim_err!("linear on a scalar"))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(dim_err!("linear: input trailing extent {din} vs weight {ws:?}"));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(dim_err!("linear: bias {:?} vs output width {dout}", self.shape(b)));
            }
        }
        let m = self.value(input).numel() / din;
        let x = self.value(input).values();
        let wv = self.value(weight).values();
        let bv = bias.map(|b| self.value(b).values());
        let mut out = Vec::with_capacity(m * dout);
        for r in 0..m {
            let row = &x[r * din..(r + 1) * din];
            for o in 0..dout {
                let wrow = &wv[o * din..(o + 1) * din];
                let mut acc = bv.as_ref().map_or(T::zero(), |b| b[o]);
                for (a, b) in row.iter().zip(wrow) {
                    acc += *a * *b;
                }
                out.push(acc);
            }
        }
        drop((x, wv, bv));
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_parts(shape, out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(value, Op::Linear { input, weight, bias }, &inputs, "linear")
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with identical batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = asz.len();
        if r < 2 || bsz.len() != r || asz[..r - 2] != bsz[..r - 2] || asz[r - 1] != bsz[r - 2] {
            return Err(dim_err!("matmul: incompatible shapes {asz:?} and {bsz:?}"));
        }
        let (m, k, n) = (asz[r - 2], asz[r - 1], bsz[r - 1]);
        let batch: usize = asz[..r - 2].iter().product();
        let (x, y) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![T::zero(); batch * m * n];
        for bt in 0..batch {
            let (xa, yb, o) = (bt * m * k, bt * k * n, bt * m * n);
            for i in 0..m {
                for p in 0..k {
                    let aip = x[xa + i * k + p];
                    let yrow = &y[yb + p * n..yb + (p + 1) * n];
                    let orow = &mut out[o + i * n..o + (i + 1) * n];
                    for (ov, &yv) in orow.iter_mut().zip(yrow) {
                        *ov += aip * yv;
                    }
                }
            }
        }
        drop((x, y));
        let mut shape = asz;
        shape[r - 1] = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Normalizes over the trailing axis (population variance) then applies
    /// `gain` and `shift`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let d = *xs.last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(dim_err!(
                "layer_norm over extent {d}: gain {:?}, shift {:?}",
                self.shape(gain),
                self.shape(shift)
            ));
        }
        if eps <= T::zero() {
            return Err(dim_err!("layer_norm eps must be positive"));
        }
        let rows = self.value(input).numel() / d;
        let x = self.value(input).values();
        let (gv, sv) = (self.value(gain).values(), self.value(shift).values());
        let dn = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * rstd * gv[j] + sv[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        drop((x, gv, sv));
        let op = Op::LayerNorm { input, gain, shift, mean: means, rstd: rstds };
        self.push(Tensor::from_parts(xs, out), op, &[input, gain, shift], "layer_norm")
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis);
        let x = self.value(input).values();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * ext + j) * inner + i;
                let max = (0..ext).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..ext {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..ext {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        drop(x);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { input, axis }, &[input], "softmax")
    }

    /// Valid-mode moving average over a `[D, H, W]` array with a
    /// `window = [wd, wh, ww]` box.
    pub fn box_filter(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("box_filter expects [D, H, W], got {s:?}"));
        }
        if (0..3).any(|a| window[a] == 0 || window[a] > s[a]) {
            return Err(dim_err!("box window {window:?} does not fit {s:?}"));
        }
        let os = [s[0] - window[0] + 1, s[1] - window[1] + 1, s[2] - window[2] + 1];
        let inv = T::one() / T::from_usize(window.iter().product()).unwrap();
        let x = self.value(input).values();
        // Separable running sums along W, then H, then D.
        let along_w = running_sum(&x, [s[0] * s[1], s[2], 1], window[2]);
        let along_h = running_sum(&along_w, [s[0], s[1], os[2]], window[1]);
        let along_d = running_sum(&along_h, [1, s[0], os[1] * os[2]], window[0]);
        drop(x);
        let out = along_d.into_iter().map(|v| v * inv).collect();
        self.push(
            Tensor::from_parts(os.to_vec(), out),
            Op::BoxFilter { input, window },
            &[input],
            "box_filter",
        )
    }
}

/// Sums windows of length `win` along the middle axis of an
/// `[outer, len, inner]` array.
fn running_sum<T: Scalar>(x: &[T], dims: [usize; 3], win: usize) -> Vec<T> {
    let [outer, len, inner] = dims;
    let olen = len - win + 1;
    let mut out = vec![T::zero(); outer * olen * inner];
    for o in 0..outer {
        for j in 0..olen {
            let dst = (o * olen + j) * inner;
            for t in 0..win {
                let src = (o * len + j + t) * inner;
                for i in 0..inner {
                    out[dst + i] += x[src + i];
                }
            }
        }
    }
    out
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Self {
        let oh = (xs[2] + 2 * pad.0 - ks[2]) / stride.0 + 1;
        let ow = (xs[3] + 2 * pad.1 - ks[3]) / stride.1 + 1;
        ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ks[0], kh: ks[2], kw: ks[3], oh, ow, stride, pad }
    }

    /// Calls `f(output offset, input offset)` within one (n, o, c) plane for
    /// every output position whose tap (ky, kx) lands inside the input.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.oh {
            let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for ox in 0..self.ow {
                let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.ow + ox, iy as usize * self.w + ix as usize);
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    kernel: Var,
    stride: (usize, usize),
    pad: (usize, usize),
    g: &[T],
) -> Grads<T> {
    let geo = ConvGeom::new(tape.shape(input), tape.shape(kernel), stride, pad);
    let x = tape.value(input).values();
    let k = tape.value(kernel).values();
    let (want_x, want_k) = (tape.requires_grad(input), tape.requires_grad(kernel));
    let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
    let mut gk = vec![T::zero(); if want_k { k.len() } else { 0 }];
    for n in 0..geo.n {
        for o in 0..geo.o {
            let obase = (n * geo.o + o) * geo.oh * geo.ow;
            for c in 0..geo.c {
                let xbase = (n * geo.c + c) * geo.h * geo.w;
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let ki = ((o * geo.c + c) * geo.kh + ky) * geo.kw + kx;
                        let kv = k[ki];
                        let mut acc = T::zero();
                        geo.for_each_tap(ky, kx, |oi, xi| {
                            let gv = g[obase + oi];
                            if want_x {
                                gx[xbase + xi] += gv * kv;
                            }
                            acc += gv * x[xbase + xi];
                        });
                        if want_k {
                            gk[ki] += acc;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    if want_x {
        out.push((input, gx));
    }
    if want_k {
        out.push((kernel, gk));
    }
    out
}

pub(crate) fn linear_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    g: &[T],
) -> Grads<T> {
    let ws = tape.shape(weight);
    let (dout, din) = (ws[0], ws[1]);
    let x = tape.value(input).values();
    let w = tape.value(weight).values();
    let m = x.len() / din;
    let mut out = Vec::new();
    if tape.requires_grad(input) {
        let mut gx = vec![T::zero(); x.len()];
        for r in 0..m {
            let grow = &g[r * dout..(r + 1) * dout];
            let gxrow = &mut gx[r * din..(r + 1) * din];
            for (o, &gv) in grow.iter().enumerate() {
                for (a, &wv) in gxrow.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *a += gv * wv;
                }
            }
        }
        out.push((input, gx));
    }
    if tape.requires_grad(weight) {
        let mut gw = vec![T::zero(); w.len()];
        for r in 0..m {
            let xrow = &x[r * din..(r + 1) * din];
            for o in 0..dout {
                let gv = g[r * dout + o];
                for (a, &xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                    *a += gv * xv;
                }
            }
        }
        out.push((weight, gw));
    }
    if let Some(b) = bias {
        if tape.requires_grad(b) {
            let mut gb = vec![T::zero(); dout];
            for r in 0..m {
                for o in 0..dout {
                    gb[o] += g[r * dout + o];
                }
            }
            out.push((b, gb));
        }
    }
    out
}

pub(crate) fn matmul_backward<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, g: &[T]) -> Grads<T> {
    let asz = tape.shape(a);
    let r = asz.len();
    let (m, k) = (asz[r - 2], asz[r - 1]);
    let n = tape.shape(b)[r - 1];
    let batch: usize = asz[..r - 2].iter().product();
    let (x, y) = (tape.value(a).values(), tape.value(b).values());
    let mut out = Vec::new();
    if tape.requires_grad(a) {
        let mut ga = vec![T::zero(); x.len()];
        for bt in 0..batch {
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += g[bt * m * n + i * n + j] * y[bt * k * n + p * n + j];
                    }
                    ga[bt * m * k + i * k + p] = acc;
                }
            }
        }
        out.push((a, ga));
    }
    if tape.requires_grad(b) {
        let mut gb = vec![T::zero(); y.len()];
        for bt in 0..batch {
            for i in 0..m {
                for p in 0..k {
                    let aip = x[bt * m * k + i * k + p];
                    for j in 0..n {
                        gb[bt * k * n + p * n + j] += aip * g[bt * m * n + i * n + j];
                    }
                }
            }
        }
        out.push((b, gb));
    }
    out
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    gain: Var,
    shift: Var,
    mean: &[T],
    rstd: &[T],
    g: &[T],
) -> Grads<T> {
    let d = tape.shape(gain)[0];
    let dn = T::from_usize(d).unwrap();
    let x = tape.value(input).values();
    let gv = tape.value(gain).values();
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); d];
    let mut gs = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut gxhat = vec![T::zero(); d];
    for (r, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
        let row = r * d..(r + 1) * d;
        for (j, (&xv, &gy)) in x[row.clone()].iter().zip(&g[row.clone()]).enumerate() {
            xhat[j] = (xv - mu) * rs;
            gxhat[j] = gy * gv[j];
            gg[j] += gy * xhat[j];
            gs[j] += gy;
        }
        let m1 = gxhat.iter().copied().sum::<T>() / dn;
        let m2 = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
        for (j, out) in gx[row].iter_mut().enumerate() {
            *out = rs * (gxhat[j] - m1 - xhat[j] * m2);
        }
    }
    vec![(input, gx), (gain, gg), (shift, gs)]
}

pub(crate) fn softmax_backward<T: Scalar>(out: &Tensor<T>, input: Var, axis: usize, g: &[T]) -> Grads<T> {
    let (outer, ext, inner) = split_axis(out.shape(), axis);
    let y = out.values();
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * ext + j) * inner + i;
            let dot: T = (0..ext).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..ext {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    vec![(input, gx)]
}

pub(crate) fn box_filter_backward<T: Scalar>(tape: &Tape<T>, input: Var, window: [usize; 3], g: &[T]) -> Grads<T> {
    let s = tape.shape(input);
    let os = [s[0] - window[0] + 1, s[1] - window[1] + 1, s[2] - window[2] + 1];
    let inv = T::one() / T::from_usize(window.iter().product()).unwrap();
    let mut gx = vec![T::zero(); s.iter().product()];
    for d in 0..os[0] {
        for h in 0..os[1] {
            for w in 0..os[2] {
                let gv = g[(d * os[1] + h) * os[2] + w] * inv;
                for a in 0..window[0] {
                    for b in 0..window[1] {
                        let base = ((d + a) * s[1] + h + b) * s[2] + w;
                        for v in &mut gx[base..base + window[2]] {
                            *v += gv;
                        }
                    }
                }
            }
        }
    }
    vec![(input, gx)]
}
