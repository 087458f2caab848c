//! Tape-independent compute kernels for the convolution family.
//!
//! All images are NCHW, row-major. Convolution is lowered to matrix products
//! through `im2col`/`col2im`, processing the batch in chunks so that each
//! product has a reasonably wide column dimension.

use crate::scalar::Scalar;

/// Target column count of one lowered product.
const CHUNK_COLUMNS: usize = 2048;

/// Spatial geometry of a sliding-window operator over one image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output extent along one axis for an input extent, or `None` when the
    /// padded input is smaller than the kernel.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_len(h, self.kernel.0)?, self.out_len(w, self.kernel.1)?))
    }
}

/// Output padding a transposed convolution needs in order to undo a
/// convolution with the same window on an input of extent `input`.
pub fn inverse_output_padding(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) % stride
}

/// Output extent of a transposed convolution.
pub fn transposed_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
}

/// Unfolds one `c x h x w` image into `dst`, a `(c*kh*kw) x ld` matrix whose
/// columns `col0..col0+oh*ow` receive the patches.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    dst: &mut [T],
    ld: usize,
    col0: usize,
) {
    let (kh, kw) = win.kernel;
    let (s, p) = (win.stride as isize, win.padding as isize);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let out = &mut dst[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
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

/// Adjoint of [`im2col`]: accumulates matrix columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    src: &[T],
    ld: usize,
    col0: usize,
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let (kh, kw) = win.kernel;
    let (s, p) = (win.stride as isize, win.padding as isize);
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let cols = &src[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += cols[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copies images `b0..b0+nb` of a `[B, c, hw]` batch into a `c x (nb*hw)` matrix.
fn gather_channels<T: Scalar>(src: &[T], c: usize, hw: usize, b0: usize, nb: usize, dst: &mut [T]) {
    let ld = nb * hw;
    for bi in 0..nb {
        let img = &src[(b0 + bi) * c * hw..(b0 + bi + 1) * c * hw];
        for ch in 0..c {
            dst[ch * ld + bi * hw..ch * ld + (bi + 1) * hw].copy_from_slice(&img[ch * hw..(ch + 1) * hw]);
        }
    }
}

/// Inverse of [`gather_channels`]; `accumulate` adds instead of overwriting.
fn scatter_channels<T: Scalar>(
    src: &[T],
    c: usize,
    hw: usize,
    b0: usize,
    nb: usize,
    dst: &mut [T],
    accumulate: bool,
) {
    let ld = nb * hw;
    for bi in 0..nb {
        let img = &mut dst[(b0 + bi) * c * hw..(b0 + bi + 1) * c * hw];
        for ch in 0..c {
            let from = &src[ch * ld + bi * hw..ch * ld + (bi + 1) * hw];
            let to = &mut img[ch * hw..(ch + 1) * hw];
            if accumulate {
                to.iter_mut().zip(from).for_each(|(t, &f)| *t += f);
            } else {
                to.copy_from_slice(from);
            }
        }
    }
}

fn chunk_len(batch: usize, cols_per_image: usize) -> usize {
    (CHUNK_COLUMNS / cols_per_image.max(1)).clamp(1, batch.max(1))
}

/// Geometry of a convolution call, resolved from operand shapes.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub win: Window,
}

/// `y = conv(x, w) + bias`; `w` is `[out_c, in_c, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let (kh, kw) = d.win.kernel;
    let ckk = d.in_c * kh * kw;
    let ohw = d.out_h * d.out_w;
    let mut y = vec![T::zero(); d.batch * d.out_c * ohw];
    let chunk = chunk_len(d.batch, ohw);
    let mut cols = vec![T::zero(); ckk * chunk * ohw];
    let mut out = vec![T::zero(); d.out_c * chunk * ohw];
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ohw;
        for bi in 0..nb {
            let img = &x[(b0 + bi) * d.in_c * d.in_h * d.in_w..(b0 + bi + 1) * d.in_c * d.in_h * d.in_w];
            im2col(img, d.in_c, d.in_h, d.in_w, d.win, d.out_h, d.out_w, &mut cols, ld, bi * ohw);
        }
        T::gemm(
            d.out_c,
            ckk,
            ld,
            T::one(),
            w,
            (ckk as isize, 1),
            &cols,
            (ld as isize, 1),
            T::zero(),
            &mut out,
            (ld as isize, 1),
        );
        for (o, &bv) in bias.iter().enumerate() {
            out[o * ld..(o + 1) * ld].iter_mut().for_each(|v| *v += bv);
        }
        scatter_channels(&out, d.out_c, ohw, b0, nb, &mut y, false);
        b0 += nb;
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    want_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (kh, kw) = d.win.kernel;
    let ckk = d.in_c * kh * kw;
    let ohw = d.out_h * d.out_w;
    let in_img = d.in_c * d.in_h * d.in_w;
    let mut gx = want_x.then(|| vec![T::zero(); d.batch * in_img]);
    let mut gw = vec![T::zero(); d.out_c * ckk];
    let mut gb = vec![T::zero(); d.out_c];
    let chunk = chunk_len(d.batch, ohw);
    let mut cols = vec![T::zero(); ckk * chunk * ohw];
    let mut gout = vec![T::zero(); d.out_c * chunk * ohw];
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ohw;
        gather_channels(gy, d.out_c, ohw, b0, nb, &mut gout);
        for (o, g) in gb.iter_mut().enumerate() {
            *g += gout[o * ld..(o + 1) * ld].iter().copied().sum::<T>();
        }
        for bi in 0..nb {
            let img = &x[(b0 + bi) * in_img..(b0 + bi + 1) * in_img];
            im2col(img, d.in_c, d.in_h, d.in_w, d.win, d.out_h, d.out_w, &mut cols, ld, bi * ohw);
        }
        // gw += gout * cols^T
        T::gemm(
            d.out_c,
            ld,
            ckk,
            T::one(),
            &gout,
            (ld as isize, 1),
            &cols,
            (1, ld as isize),
            T::one(),
            &mut gw,
            (ckk as isize, 1),
        );
        if let Some(gx) = gx.as_mut() {
            // cols <- w^T * gout
            T::gemm(
                ckk,
                d.out_c,
                ld,
                T::one(),
                w,
                (1, ckk as isize),
                &gout,
                (ld as isize, 1),
                T::zero(),
                &mut cols,
                (ld as isize, 1),
            );
            for bi in 0..nb {
                let img = &mut gx[(b0 + bi) * in_img..(b0 + bi + 1) * in_img];
                col2im(&cols, ld, bi * ohw, d.in_c, d.in_h, d.in_w, d.win, d.out_h, d.out_w, img);
            }
        }
        b0 += nb;
    }
    (gx, gw, gb)
}

/// Transposed convolution; `w` is `[in_c, out_c, kh, kw]`.  The window
/// describes the forward convolution being transposed, i.e. it maps the
/// `out_h x out_w` output grid onto the `in_h x in_w` input grid.
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let (kh, kw) = d.win.kernel;
    let okk = d.out_c * kh * kw;
    let ihw = d.in_h * d.in_w;
    let out_img = d.out_c * d.out_h * d.out_w;
    let mut y = vec![T::zero(); d.batch * out_img];
    let chunk = chunk_len(d.batch, ihw);
    let mut xin = vec![T::zero(); d.in_c * chunk * ihw];
    let mut cols = vec![T::zero(); okk * chunk * ihw];
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ihw;
        gather_channels(x, d.in_c, ihw, b0, nb, &mut xin);
        // cols = w^T * xin, w viewed as in_c x okk
        T::gemm(
            okk,
            d.in_c,
            ld,
            T::one(),
            w,
            (1, okk as isize),
            &xin,
            (ld as isize, 1),
            T::zero(),
            &mut cols,
            (ld as isize, 1),
        );
        for bi in 0..nb {
            let img = &mut y[(b0 + bi) * out_img..(b0 + bi + 1) * out_img];
            col2im(&cols, ld, bi * ihw, d.out_c, d.out_h, d.out_w, d.win, d.in_h, d.in_w, img);
        }
        b0 += nb;
    }
    let ohw = d.out_h * d.out_w;
    for b in 0..d.batch {
        for (o, &bv) in bias.iter().enumerate() {
            let start = b * out_img + o * ohw;
            y[start..start + ohw].iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

/// Gradients of [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    want_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (kh, kw) = d.win.kernel;
    let okk = d.out_c * kh * kw;
    let ihw = d.in_h * d.in_w;
    let ohw = d.out_h * d.out_w;
    let out_img = d.out_c * ohw;
    let mut gx = want_x.then(|| vec![T::zero(); d.batch * d.in_c * ihw]);
    let mut gw = vec![T::zero(); d.in_c * okk];
    let mut gb = vec![T::zero(); d.out_c];
    for b in 0..d.batch {
        for (o, g) in gb.iter_mut().enumerate() {
            let start = b * out_img + o * ohw;
            *g += gy[start..start + ohw].iter().copied().sum::<T>();
        }
    }
    let chunk = chunk_len(d.batch, ihw);
    let mut xin = vec![T::zero(); d.in_c * chunk * ihw];
    let mut cols = vec![T::zero(); okk * chunk * ihw];
    let mut gxin = vec![T::zero(); d.in_c * chunk * ihw];
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ihw;
        for bi in 0..nb {
            let img = &gy[(b0 + bi) * out_img..(b0 + bi + 1) * out_img];
            im2col(img, d.out_c, d.out_h, d.out_w, d.win, d.in_h, d.in_w, &mut cols, ld, bi * ihw);
        }
        gather_channels(x, d.in_c, ihw, b0, nb, &mut xin);
        // gw += xin * cols^T
        T::gemm(
            d.in_c,
            ld,
            okk,
            T::one(),
            &xin,
            (ld as isize, 1),
            &cols,
            (1, ld as isize),
            T::one(),
            &mut gw,
            (okk as isize, 1),
        );
        if let Some(gx) = gx.as_mut() {
            T::gemm(
                d.in_c,
                okk,
                ld,
                T::one(),
                w,
                (okk as isize, 1),
                &cols,
                (ld as isize, 1),
                T::zero(),
                &mut gxin,
                (ld as isize, 1),
            );
            scatter_channels(&gxin, d.in_c, ihw, b0, nb, gx, false);
        }
        b0 += nb;
    }
    (gx, gw, gb)
}

/// Max pooling over `[planes, h, w]`; returns values and flat argmax indices
/// into the input. Ties resolve to the first element in scan order.
pub fn max_pool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let (kh, kw) = win.kernel;
    if (kh, kw, win.stride, win.padding) == (2, 2, 2, 0) {
        // Same scan order as the general path below.
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let r1 = r0 + w;
                for ox in 0..ow {
                    let c = 2 * ox;
                    let mut best_i = r0 + c;
                    for i in [r0 + c + 1, r1 + c, r1 + c + 1] {
                        if x[i] > x[best_i] {
                            best_i = i;
                        }
                    }
                    y.push(x[best_i]);
                    arg.push(best_i);
                }
            }
        }
        return (y, arg);
    }
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..kh {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}
