//! Convolution kernels on raw slices: im2col / col2im lowering onto SGEMM.
//!
//! Every routine here is single-threaded and reduces in a fixed order, so
//! results are bit-reproducible for identical inputs.

/// Geometry of one square-kernel convolution over a `c×h×w` image producing
/// an `oh×ow` output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` when the kernel does not fit.
    pub fn forward(
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        if stride == 0 || k == 0 || ph < k || pw < k {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    /// Geometry whose *forward* direction maps an `c×oh×ow` image onto the
    /// `h×w` grid of a transposed convolution's input.
    pub fn transposed(
        c_out: usize,
        h_in: usize,
        w_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let oh = ((h_in - 1) * stride + k).checked_sub(2 * pad)?;
        let ow = ((w_in - 1) * stride + k).checked_sub(2 * pad)?;
        if oh == 0 || ow == 0 {
            return None;
        }
        let g = Self::forward(c_out, oh, ow, k, stride, pad)?;
        (g.oh == h_in && g.ow == w_in).then_some(g)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// `C[m×n] = op(A)·op(B) + beta·C`, all row-major. `a_t` means `A` is stored
/// as `k×m`; `b_t` means `B` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths cover every index reachable through the
    // strides above for an m×k by k×n product written into m×n.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let plane = g.oh * g.ow;
    let mut row = 0;
    for ch in 0..g.c {
        let src = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds columns back onto the image (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let plane = g.oh * g.ow;
    let mut row = 0;
    for ch in 0..g.c {
        let dst = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Lowers one image to columns, borrowing the input when the conv is 1×1.
fn lower<'a>(x: &'a [f32], g: &ConvGeom, scratch: &'a mut Vec<f32>) -> &'a [f32] {
    if g.is_pointwise() {
        x
    } else {
        scratch.resize(g.col_rows() * g.col_cols(), 0.0);
        im2col(x, g, scratch);
        scratch
    }
}

/// `y[n,o] = W[o, c·k·k] × cols(x[n])`.
pub(crate) fn conv_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_ch: usize,
) -> Vec<f32> {
    let in_len = g.c * g.h * g.w;
    let out_len = out_ch * g.col_cols();
    let mut y = vec![0.0; batch * out_len];
    let mut scratch = Vec::new();
    for b in 0..batch {
        let cols = lower(&x[b * in_len..(b + 1) * in_len], g, &mut scratch);
        gemm(
            out_ch,
            g.col_rows(),
            g.col_cols(),
            weight,
            false,
            cols,
            false,
            0.0,
            &mut y[b * out_len..(b + 1) * out_len],
        );
    }
    y
}

/// Gradient of [`conv_forward`] with respect to its input.
pub(crate) fn conv_backward_input(
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_ch: usize,
) -> Vec<f32> {
    let in_len = g.c * g.h * g.w;
    let out_len = out_ch * g.col_cols();
    let mut dx = vec![0.0; batch * in_len];
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        let dxb = &mut dx[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm(
                g.c,
                out_ch,
                g.col_cols(),
                weight,
                true,
                dyb,
                false,
                0.0,
                dxb,
            );
        } else {
            gemm(
                g.col_rows(),
                out_ch,
                g.col_cols(),
                weight,
                true,
                dyb,
                false,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, g, dxb);
        }
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to its weight.
pub(crate) fn conv_backward_weight(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    out_ch: usize,
) -> Vec<f32> {
    let in_len = g.c * g.h * g.w;
    let out_len = out_ch * g.col_cols();
    let mut dw = vec![0.0; out_ch * g.col_rows()];
    let mut scratch = Vec::new();
    for b in 0..batch {
        let cols = lower(&x[b * in_len..(b + 1) * in_len], g, &mut scratch);
        let beta = if b == 0 { 0.0 } else { 1.0 };
        gemm(
            out_ch,
            g.col_cols(),
            g.col_rows(),
            &dy[b * out_len..(b + 1) * out_len],
            false,
            cols,
            true,
            beta,
            &mut dw,
        );
    }
    dw
}
