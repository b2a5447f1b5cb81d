//! Raw `f32` kernels behind the differentiable operations.
//!
//! Convolution runs as im2col followed by a single-threaded GEMM, which keeps
//! accumulation order fixed for a given shape. [`conv2d_direct`] is the
//! nested-loop reference the GEMM path is checked against.

/// Geometry of a 2-D cross-correlation over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }
}

/// `c = a · b + beta · c` for row-major operands described by strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, image: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let src = &image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f32], image: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dst = &mut image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: `[N,C,H,W] ⋆ [F,C,kh,kw] → [N,F,H',W']`.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f32], weight: &[f32]) -> Vec<f32> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![0.0f32; g.batch * g.out_channels * plane];
    let mut col = vec![0.0f32; patch * plane];
    let in_item = g.in_channels * g.in_plane();
    let out_item = g.out_channels * plane;
    for n in 0..g.batch {
        im2col(g, &input[n * in_item..(n + 1) * in_item], &mut col);
        gemm(
            g.out_channels,
            patch,
            plane,
            weight,
            patch,
            1,
            &col,
            plane,
            1,
            0.0,
            &mut out[n * out_item..(n + 1) * out_item],
        );
    }
    out
}

/// Adjoint of the forward pass in its input argument (transposed convolution).
pub fn conv2d_input_grad(g: &ConvGeometry, grad_out: &[f32], weight: &[f32]) -> Vec<f32> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_item = g.in_channels * g.in_plane();
    let out_item = g.out_channels * plane;
    let mut grad_in = vec![0.0f32; g.batch * in_item];
    let mut col = vec![0.0f32; patch * plane];
    for n in 0..g.batch {
        // col = Wᵀ · gy
        gemm(
            patch,
            g.out_channels,
            plane,
            weight,
            1,
            patch,
            &grad_out[n * out_item..(n + 1) * out_item],
            plane,
            1,
            0.0,
            &mut col,
        );
        col2im_add(g, &col, &mut grad_in[n * in_item..(n + 1) * in_item]);
    }
    grad_in
}

/// Adjoint of the forward pass in its weight argument.
pub fn conv2d_weight_grad(g: &ConvGeometry, input: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_item = g.in_channels * g.in_plane();
    let out_item = g.out_channels * plane;
    let mut grad_w = vec![0.0f32; g.out_channels * patch];
    let mut col = vec![0.0f32; patch * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_item..(n + 1) * in_item], &mut col);
        // gW += gy · colᵀ
        gemm(
            g.out_channels,
            plane,
            patch,
            &grad_out[n * out_item..(n + 1) * out_item],
            plane,
            1,
            &col,
            1,
            plane,
            if n == 0 { 0.0 } else { 1.0 },
            &mut grad_w,
        );
    }
    grad_w
}

/// Nested-loop cross-correlation used as the correctness reference.
pub fn conv2d_direct(g: &ConvGeometry, input: &[f32], weight: &[f32]) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for f in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.in_h + iy as usize) * g.in_w
                                    + ix as usize;
                                let wi = ((f * g.in_channels + c) * g.kh + ki) * g.kw + kj;
                                acc += input[xi] * weight[wi];
                            }
                        }
                    }
                    out[((n * g.out_channels + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
