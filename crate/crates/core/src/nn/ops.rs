//! Layer kernels. Convolutions lower to GEMM through im2col, one sample at a time.

use rand::Rng;

use super::scalar::gemm;
use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Output length of a convolution along one axis, if the kernel fits.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    (span >= kernel && stride >= 1).then(|| (span - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let out_h = conv_out_len(in_h, kernel, stride, pad);
        let out_w = conv_out_len(in_w, kernel, stride, pad);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if kernel >= 1 => Ok(Self {
                in_c,
                in_h,
                in_w,
                kernel,
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(Error::Contract(format!(
                "kernel {kernel} (stride {stride}, pad {pad}) does not fit a {in_h}x{in_w} input"
            ))),
        }
    }

    /// Rows of the im2col matrix, `C * K * K`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C x H x W` sample into a `(C*K*K) x (OH*OW)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for c in 0..g.in_c {
        let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `grad_x` (accumulating).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, grad_x: &mut [T]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for c in 0..g.in_c {
        let dst = &mut grad_x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T], stride: usize, pad: usize) -> Result<ConvGeometry> {
    let [_, in_c, in_h, in_w] = x.dims();
    let [out_c, w_c, kh, kw] = w.dims();
    if w_c != in_c || kh != kw || b.len() != out_c {
        return Err(Error::Contract(format!(
            "conv weights {:?} / bias {} incompatible with input {:?}",
            w.dims(),
            b.len(),
            x.dims()
        )));
    }
    ConvGeometry::new(in_c, in_h, in_w, kh, stride, pad)
}

/// Cross-correlation plus bias; weights are `O x C x K x K`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T], stride: usize, pad: usize) -> Result<Tensor4<T>> {
    let g = conv_geometry(x, w, b, stride, pad)?;
    let out_c = w.dims()[0];
    let mut out = Tensor4::zeros([x.batch(), out_c, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    for i in 0..x.batch() {
        conv_sample_forward(x.sample(i), w.data(), b, &g, &mut cols, out.sample_mut(i));
    }
    Ok(out)
}

pub(crate) fn conv_sample_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry, cols: &mut [T], out: &mut [T]) {
    let plane = g.out_plane();
    im2col(x, g, cols);
    for (o, &bias) in out.chunks_exact_mut(plane).zip(b) {
        o.fill(bias);
    }
    gemm(b.len(), g.patch_len(), plane, T::one(), w, false, cols, false, T::one(), out);
}

/// Accumulates one sample's weight/bias gradients, and writes its input
/// gradient when `grad_x` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_sample_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    cols: &mut [T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    grad_x: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let out_c = grad_b.len();
    for (gb, go) in grad_b.iter_mut().zip(grad_out.chunks_exact(plane)) {
        *gb += go.iter().copied().sum::<T>();
    }
    im2col(x, g, cols);
    gemm(out_c, plane, g.patch_len(), T::one(), grad_out, false, cols, true, T::one(), grad_w);
    if let Some(gx) = grad_x {
        gemm(g.patch_len(), out_c, plane, T::one(), w, true, grad_out, false, T::zero(), cols);
        gx.fill(T::zero());
        col2im(cols, g, gx);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub grad_x: Option<Tensor4<T>>,
    pub grad_w: Tensor4<T>,
    pub grad_b: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    pad: usize,
    need_grad_x: bool,
) -> Result<ConvGrads<T>> {
    let out_c = w.dims()[0];
    let zeros_b = vec![T::zero(); out_c];
    let g = conv_geometry(x, w, &zeros_b, stride, pad)?;
    if grad_out.dims() != [x.batch(), out_c, g.out_h, g.out_w] {
        return Err(Error::Contract(format!(
            "output gradient {:?} does not match forward output",
            grad_out.dims()
        )));
    }
    let mut grad_w = Tensor4::zeros(w.dims());
    let mut grad_b = zeros_b;
    let mut grad_x = need_grad_x.then(|| Tensor4::zeros(x.dims()));
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    for i in 0..x.batch() {
        conv_sample_backward(
            x.sample(i),
            w.data(),
            grad_out.sample(i),
            &g,
            &mut cols,
            grad_w.data_mut(),
            &mut grad_b,
            grad_x.as_mut().map(|t| t.sample_mut(i)),
        );
    }
    Ok(ConvGrads { grad_x, grad_w, grad_b })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ceil_mode: bool,
}

impl PoolParams {
    /// Pooled length along one axis. Ceil mode clips the last window to the
    /// input and drops a window that would start entirely in the padding.
    pub fn out_len(&self, input: usize) -> Option<usize> {
        let span = (input + 2 * self.pad) as isize - self.kernel as isize;
        let s = self.stride as isize;
        if self.stride == 0 || self.kernel == 0 || input == 0 {
            return None;
        }
        if self.ceil_mode {
            let mut out = span.div_euclid(s) + (span.rem_euclid(s) != 0) as isize + 1;
            if self.pad > 0 && (out - 1) * s >= (input + self.pad) as isize {
                out -= 1;
            }
            (out >= 1).then_some(out as usize)
        } else {
            (span >= 0).then(|| (span / s + 1) as usize)
        }
    }

    fn window(&self, o: usize, input: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = (start + self.kernel as isize).min(input as isize);
        (start.max(0) as usize, end.max(0) as usize)
    }
}

/// Max pooling; also returns, per output cell, the flat input index of the
/// first (row-major) maximum in its window.
pub fn maxpool_forward<T: Scalar>(x: &Tensor4<T>, p: &PoolParams) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = match (p.out_len(h), p.out_len(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Contract(format!("pooling {p:?} does not fit {h}x{w}"))),
    };
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = p.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.window(ox, w);
                let mut best = base + y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = base + yy * w + xx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                dst[k] = src[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Scalar>(grad_out: &Tensor4<T>, argmax: &[usize], input_dims: [usize; 4]) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(input_dims);
    let data = gx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        data[i] += g;
    }
    gx
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient masked by `x > 0`; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Affine map on flattened samples; weights are `out x in`, output is `N x out x 1 x 1`.
pub fn fc_forward<T: Scalar>(x: &Tensor4<T>, w: &[T], b: &[T]) -> Result<Tensor4<T>> {
    let (n, inp, out) = (x.batch(), x.sample_len(), b.len());
    if w.len() != out * inp {
        return Err(Error::Contract(format!(
            "fc weights of {} values incompatible with {inp} inputs and {out} outputs",
            w.len()
        )));
    }
    let mut y = Tensor4::zeros([n, out, 1, 1]);
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(b);
    }
    gemm(n, inp, out, T::one(), x.data(), false, w, true, T::one(), y.data_mut());
    Ok(y)
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub fn fc_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &[T],
    grad_out: &Tensor4<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_grad_x: bool,
) -> Option<Tensor4<T>> {
    let (n, inp, out) = (x.batch(), x.sample_len(), grad_b.len());
    for row in grad_out.data().chunks_exact(out) {
        for (gb, &g) in grad_b.iter_mut().zip(row) {
            *gb += g;
        }
    }
    gemm(out, n, inp, T::one(), grad_out.data(), true, x.data(), false, T::one(), grad_w);
    need_grad_x.then(|| {
        let mut gx = Tensor4::zeros(x.dims());
        gemm(n, out, inp, T::one(), grad_out.data(), false, w, false, T::zero(), gx.data_mut());
        gx
    })
}

/// Inverted dropout. In training mode each unit is zeroed with probability
/// `p` and survivors scaled by `1 / (1 - p)`; returns the output and the
/// per-unit scale mask (`None` when the layer is the identity).
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor4<T>,
    p: f64,
    training: bool,
    rng: &mut R,
) -> (Tensor4<T>, Option<Vec<T>>) {
    if !training || p == 0.0 {
        return (x.clone(), None);
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
        .collect();
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= *m);
    (y, Some(mask))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor4<T>, mask: Option<&[T]>) -> Tensor4<T> {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= *m);
    }
    g
}

/// Row-wise softmax of an `N x C` logit matrix.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Summed cross-entropy over the rows, and its gradient multiplied by `scale`.
pub(crate) fn softmax_loss_sum<T: Scalar>(logits: &[T], classes: usize, labels: &[u32], scale: T) -> Result<(f64, Vec<T>)> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if logits.len() != labels.len() * classes {
        return Err(Error::Contract(format!(
            "{} logits for {} labels of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut grad = softmax(logits, classes);
    let mut loss = 0.0;
    for ((row, probs), &label) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let label = label as usize;
        if label >= classes {
            return Err(Error::Contract(format!("label {label} >= {classes} classes")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse: T = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += (lse - row[label]).to_f64();
        probs[label] -= T::one();
        probs.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over `N` rows and its gradient `(softmax - onehot) / N`.
pub fn softmax_loss<T: Scalar>(logits: &[T], classes: usize, labels: &[u32]) -> Result<(f64, Vec<T>)> {
    let n = labels.len().max(1);
    let (sum, grad) = softmax_loss_sum(logits, classes, labels, T::one() / T::from_f64(n as f64))?;
    Ok((sum / n as f64, grad))
}
