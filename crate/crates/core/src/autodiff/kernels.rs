//! Raw numeric kernels behind the differentiable ops.
//!
//! Everything here works on row-major slices with fixed iteration order, so
//! the same inputs always produce bit-identical outputs.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct Strides(pub isize, pub isize);

impl Strides {
    /// Row-major `rows x cols`.
    pub fn row_major(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }
}

/// `c = a · b + beta · c` for an `m x k` by `k x n` product into row-major `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the slices cover the strided extents; callers pass strides
    // derived from the operand shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output keeps the input extent at stride 1.
    Same,
}

/// Geometry of one 2-D convolution over a single `H x W x Cin` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((n + pad - k) / stride) + 1`, or `None` if the window does not fit.
pub fn output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > n + pad {
        return None;
    }
    Some((n + pad - k) / stride + 1)
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        let (ph, pw) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (kh - 1, kw - 1),
        };
        let out_h = output_extent(h, kh, stride, ph)?;
        let out_w = output_extent(w, kw, stride, pw)?;
        Some(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top: ph / 2,
            pad_left: pw / 2,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    pub fn out_len(&self) -> usize {
        self.positions() * self.cout
    }

    /// Input coordinate for output `o` and kernel tap `k`, if not in padding.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&y| y < limit)
    }
}

/// Unfolds every receptive field into a row: `positions x (kh·kw·cin)`,
/// column order `(ky, kx, ci)` to match the `Kh x Kw x Cin x Cout` kernel.
pub fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let y = g.source(oy, ky, g.pad_top, g.h);
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    match (y, g.source(ox, kx, g.pad_left, g.w)) {
                        (Some(y), Some(x)) => {
                            dst.copy_from_slice(&input[(y * g.w + x) * g.cin..][..g.cin])
                        }
                        _ => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im_add(g: &ConvGeometry, cols: &[f64], grad_input: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let Some(y) = g.source(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(x) = g.source(ox, kx, g.pad_left, g.w) else {
                        continue;
                    };
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = &mut grad_input[(y * g.w + x) * g.cin..][..g.cin];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image. Returns the im2col buffer for reuse in
/// the backward pass.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], out: &mut [f64]) -> Vec<f64> {
    let mut cols = vec![0.0; g.positions() * g.patch_len()];
    im2col(g, input, &mut cols);
    gemm(
        g.positions(),
        g.patch_len(),
        g.cout,
        &cols,
        Strides::row_major(g.patch_len()),
        kernel,
        Strides::row_major(g.cout),
        out,
        0.0,
    );
    cols
}

/// Accumulates `dK += colsᵀ · dY`.
pub fn conv2d_grad_kernel(g: &ConvGeometry, cols: &[f64], grad_out: &[f64], grad_kernel: &mut [f64]) {
    gemm(
        g.patch_len(),
        g.positions(),
        g.cout,
        cols,
        Strides::transposed(g.patch_len()),
        grad_out,
        Strides::row_major(g.cout),
        grad_kernel,
        1.0,
    );
}

/// Accumulates `dX += col2im(dY · Kᵀ)`.
pub fn conv2d_grad_input(g: &ConvGeometry, kernel: &[f64], grad_out: &[f64], grad_input: &mut [f64]) {
    let mut dcols = vec![0.0; g.positions() * g.patch_len()];
    gemm(
        g.positions(),
        g.cout,
        g.patch_len(),
        grad_out,
        Strides::row_major(g.cout),
        kernel,
        Strides::transposed(g.cout),
        &mut dcols,
        0.0,
    );
    col2im_add(g, &dcols, grad_input);
}

/// Pooling geometry for a single `H x W x C` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(h: usize, w: usize, c: usize, window: usize, stride: usize) -> Option<Self> {
        Some(Self {
            h,
            w,
            c,
            window,
            stride,
            out_h: output_extent(h, window, stride, 0)?,
            out_w: output_extent(w, window, stride, 0)?,
        })
    }

    pub fn in_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.c
    }
}

pub fn avg_pool_forward(g: &PoolGeometry, input: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ch in 0..g.c {
                let mut acc = 0.0;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let (y, x) = (oy * g.stride + ky, ox * g.stride + kx);
                        acc += input[(y * g.w + x) * g.c + ch];
                    }
                }
                out[(oy * g.out_w + ox) * g.c + ch] = acc * inv;
            }
        }
    }
}

pub fn avg_pool_backward(g: &PoolGeometry, grad_out: &[f64], grad_input: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ch in 0..g.c {
                let go = grad_out[(oy * g.out_w + ox) * g.c + ch] * inv;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let (y, x) = (oy * g.stride + ky, ox * g.stride + kx);
                        grad_input[(y * g.w + x) * g.c + ch] += go;
                    }
                }
            }
        }
    }
}

/// Max pooling; `argmax` receives the flat input index picked for each output
/// cell. Ties go to the first cell in row-major window order.
pub fn max_pool_forward(g: &PoolGeometry, input: &[f64], out: &mut [f64], argmax: &mut [usize]) {
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ch in 0..g.c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let (y, x) = (oy * g.stride + ky, ox * g.stride + kx);
                        let idx = (y * g.w + x) * g.c + ch;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * g.out_w + ox) * g.c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}
