//! Slice-level forward and backward kernels behind the graph primitives.

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output positions `o` along one axis whose source `o*stride + tap - pad`
    /// falls inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(s)
        } else {
            0
        };
        let hi_src = len - 1 + self.pad;
        if hi_src < tap {
            return 0..0;
        }
        let hi = ((hi_src - tap) / s + 1).min(out_len);
        lo.min(hi)..hi
    }
}

/// Unrolls input patches into a `[in_c * kh * kw, out_h * out_w]` matrix.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut col = vec![0.0; g.in_c * g.kh * g.kw * plane];
    for c in 0..g.in_c {
        let in_c = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            let rows = g.valid_range(i, g.in_h, oh);
            for j in 0..g.kw {
                let cols = g.valid_range(j, g.in_w, ow);
                let r = (c * g.kh + i) * g.kw + j;
                let dst_r = &mut col[r * plane..(r + 1) * plane];
                for oy in rows.clone() {
                    let iy = oy * g.stride + i - g.pad;
                    let src = &in_c[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst = &mut dst_r[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = cols.start + j - g.pad;
                        dst[cols.clone()].copy_from_slice(&src[off..off + cols.len()]);
                    } else {
                        for ox in cols.clone() {
                            dst[ox] = src[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(g: &ConvGeom, col: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        let out_c = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            let rows = g.valid_range(i, g.in_h, oh);
            for j in 0..g.kw {
                let cols = g.valid_range(j, g.in_w, ow);
                let r = (c * g.kh + i) * g.kw + j;
                let src_r = &col[r * plane..(r + 1) * plane];
                for oy in rows.clone() {
                    let iy = oy * g.stride + i - g.pad;
                    let dst = &mut out_c[iy * g.in_w..(iy + 1) * g.in_w];
                    let src = &src_r[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = cols.start + j - g.pad;
                        for (d, s) in dst[off..off + cols.len()].iter_mut().zip(&src[cols.clone()]) {
                            *d += s;
                        }
                    } else {
                        for ox in cols.clone() {
                            dst[ox * g.stride + j - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c = a · b` (row-major, `a` is `m × k`, `b` is `k × n`), with `a` and/or
/// `b` read transposed when the flags are set.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let mut out = vec![0.0; g.out_c * plane];
    for (k, row) in out.chunks_mut(plane).enumerate() {
        row.fill(bias[k]);
    }
    let col = im2col(g, input);
    gemm(
        g.out_c,
        g.in_c * g.kh * g.kw,
        plane,
        kernel,
        false,
        &col,
        false,
        &mut out,
    );
    out
}

/// Gradients of a convolution. `grad_input` is skipped when `None` is requested.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.out_h() * g.out_w();
    let ckk = g.in_c * g.kh * g.kw;
    let grad_b: Vec<f64> = grad_out.chunks(plane).map(|r| r.iter().sum()).collect();
    let col = im2col(g, input);
    let mut grad_k = vec![0.0; kernel.len()];
    gemm(g.out_c, plane, ckk, grad_out, false, &col, true, &mut grad_k);
    let grad_in = want_input.then(|| {
        let mut gcol = vec![0.0; ckk * plane];
        gemm(ckk, g.out_c, plane, kernel, true, grad_out, false, &mut gcol);
        col2im(g, &gcol)
    });
    (grad_in, grad_k, grad_b)
}

/// Interpolation taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Half-pixel-center bilinear taps mapping `in_len` samples onto `out_len`.
///
/// Source coordinate of output `o` is `(o + 0.5) * in_len / out_len - 0.5`,
/// clamped to `[0, in_len - 1]`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resampling of a `[channels, in_h, in_w]` block.
pub fn bilinear_forward(x: &[f64], channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = linear_taps(in_h, out_h);
    let tx = linear_taps(in_w, out_w);
    let mut out = vec![0.0; channels * out_h * out_w];
    for c in 0..channels {
        let src = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.lo * in_w..(ry.lo + 1) * in_w];
            let r1 = &src[ry.hi * in_w..(ry.hi + 1) * in_w];
            for (ox, rx) in tx.iter().enumerate() {
                let top = rx.w_lo * r0[rx.lo] + rx.w_hi * r0[rx.hi];
                let bot = rx.w_lo * r1[rx.lo] + rx.w_hi * r1[rx.hi];
                dst[oy * out_w + ox] = ry.w_lo * top + ry.w_hi * bot;
            }
        }
    }
    out
}

/// Transpose of [`bilinear_forward`].
pub fn bilinear_backward(
    grad_out: &[f64],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = linear_taps(in_h, out_h);
    let tx = linear_taps(in_w, out_w);
    let mut grad = vec![0.0; channels * in_h * in_w];
    for c in 0..channels {
        let go = &grad_out[c * out_h * out_w..(c + 1) * out_h * out_w];
        let gi = &mut grad[c * in_h * in_w..(c + 1) * in_h * in_w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let g = go[oy * out_w + ox];
                gi[ry.lo * in_w + rx.lo] += ry.w_lo * rx.w_lo * g;
                gi[ry.lo * in_w + rx.hi] += ry.w_lo * rx.w_hi * g;
                gi[ry.hi * in_w + rx.lo] += ry.w_hi * rx.w_lo * g;
                gi[ry.hi * in_w + rx.hi] += ry.w_hi * rx.w_hi * g;
            }
        }
    }
    grad
}

/// Logistic function, branching on sign so neither tail overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky_relu`]; the slope is used at exactly zero.
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_c * oh * ow];
        for k in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[k];
                    for c in 0..g.in_c {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += kernel[((k * g.in_c + c) * g.kh + i) * g.kw + j]
                                    * input[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(k * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(h, w, stride, kh, pad) in &[
            (5, 7, 1, 3, 1),
            (6, 6, 2, 3, 1),
            (7, 5, 2, 3, 1),
            (4, 4, 1, 1, 0),
            (9, 8, 2, 5, 2),
            (3, 3, 1, 3, 0),
        ] {
            let g = ConvGeom {
                in_c: 2,
                in_h: h,
                in_w: w,
                out_c: 3,
                kh,
                kw: kh,
                stride,
                pad,
            };
            let input: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let kernel: Vec<f64> = (0..3 * 2 * kh * kh)
                .map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.6)
                .collect();
            let bias = [0.1, -0.2, 0.3];
            let fast = conv2d_forward(&g, &input, &kernel, &bias);
            let slow = naive_conv(&g, &input, &kernel, &bias);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} s{stride} k{kh}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint_of_naive_loops() {
        for &(h, w, stride, kh, pad) in &[(5, 7, 1, 3, 1), (6, 6, 2, 3, 1), (7, 5, 2, 3, 1), (4, 4, 1, 1, 0)] {
            let g = ConvGeom {
                in_c: 2,
                in_h: h,
                in_w: w,
                out_c: 3,
                kh,
                kw: kh,
                stride,
                pad,
            };
            let input: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let kernel: Vec<f64> = (0..3 * 2 * kh * kh)
                .map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.6)
                .collect();
            let go: Vec<f64> = (0..3 * g.out_h() * g.out_w())
                .map(|i| ((i * 5) % 9) as f64 - 4.0)
                .collect();
            let (gi, gk, gb) = conv2d_backward(&g, &input, &kernel, &go, true);
            let gi = gi.unwrap();
            // The convolution is linear in input and kernel, so each partial
            // is <go, conv(unit)> with zero bias.
            let dot = |v: &[f64]| v.iter().zip(&go).map(|(a, b)| a * b).sum::<f64>();
            let zero_b = [0.0; 3];
            for p in 0..input.len() {
                let mut e = vec![0.0; input.len()];
                e[p] = 1.0;
                assert!((dot(&naive_conv(&g, &e, &kernel, &zero_b)) - gi[p]).abs() < 1e-9);
            }
            for q in 0..kernel.len() {
                let mut e = vec![0.0; kernel.len()];
                e[q] = 1.0;
                assert!((dot(&naive_conv(&g, &input, &e, &zero_b)) - gk[q]).abs() < 1e-9);
            }
            let plane = g.out_h() * g.out_w();
            for k in 0..3 {
                assert_eq!(gb[k], go[k * plane..(k + 1) * plane].iter().sum::<f64>());
            }
        }
    }

    #[test]
    fn taps_half_pixel() {
        // 2 -> 4: sources -0.25, 0.25, 0.75, 1.25 clamped to [0, 1].
        let t = linear_taps(2, 4);
        let src: Vec<f64> = t.iter().map(|t| t.lo as f64 * t.w_lo + t.hi as f64 * t.w_hi).collect();
        assert_eq!(src, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0).is_finite());
    }
}
