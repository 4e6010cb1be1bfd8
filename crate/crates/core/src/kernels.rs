//! Dense kernels shared by graph ops: GEMM, im2col convolution, pooling.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are asserted, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel_w
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, Ho*Wo]` column matrix
/// (stride 1, zero padding).
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y as isize + ki as isize - pad;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if sy < 0 || sy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * g.width..(sy as usize + 1) * g.width];
                    for (x, v) in line.iter_mut().enumerate() {
                        let sx = x as isize + kj as isize - pad;
                        *v = if sx < 0 || sx >= g.width as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image,
/// accumulating.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y as isize + ki as isize - pad;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for x in 0..ow {
                        let sx = x as isize + kj as isize - pad;
                        if sx >= 0 && sx < g.width as isize {
                            plane[sy as usize * g.width + sx as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pooling with stride 2 over `[planes, H, W]`; odd trailing
/// rows/columns are dropped.
pub(crate) fn avg_pool2(input: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                dst[y * ow + x] =
                    0.25 * (src[r0 + 2 * x] + src[r0 + 2 * x + 1] + src[r1 + 2 * x] + src[r1 + 2 * x + 1]);
            }
        }
    }
}

pub(crate) fn avg_pool2_backward(gout: &[f64], planes: usize, h: usize, w: usize, gin: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * src[y * ow + x];
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                dst[r0 + 2 * x] += g;
                dst[r0 + 2 * x + 1] += g;
                dst[r1 + 2 * x] += g;
                dst[r1 + 2 * x + 1] += g;
            }
        }
    }
}
