//! Raw slice kernels shared by the differentiable ops and the plain image code.
//!
//! Convolutions lower to im2col plus a single-precision GEMM, processed in
//! blocks of output rows to bound memory. Plain reductions accumulate in `f64`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + k - pad` is in bounds.
    fn col_range(&self, k: usize) -> (usize, usize) {
        valid_range(self.out_w(), self.width, self.stride, self.pad, k)
    }

    fn row_range(&self, k: usize) -> (usize, usize) {
        valid_range(self.out_h(), self.height, self.stride, self.pad, k)
    }
}

fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    pad: usize,
    k: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `c = a·b + beta·c` for row/column-strided matrices (`a` is `m x k`, `b` is `k x n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Upper bound on the im2col buffer, in floats.
const COL_BUDGET: usize = 1 << 20;

impl ConvGeom {
    fn ksize(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per im2col block.
    fn rows_per_block(&self) -> usize {
        (COL_BUDGET / (self.ksize() * self.out_w()).max(1)).clamp(1, self.out_h().max(1))
    }
}

/// Fills `col` (`ksize x (rows * out_w)`) with input patches for output rows `[oy0, oy1)`.
fn im2col(xn: &[f32], g: &ConvGeom, oy0: usize, oy1: usize, col: &mut [f32]) {
    let wo = g.out_w();
    let cols = (oy1 - oy0) * wo;
    let plane_in = g.height * g.width;
    for i in 0..g.in_ch {
        let xp = &xn[i * plane_in..(i + 1) * plane_in];
        for ky in 0..g.kh {
            let (ry_lo, ry_hi) = g.row_range(ky);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.col_range(kx);
                let r = (i * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oy in oy0..oy1 {
                    let row = &mut dst[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    if oy < ry_lo || oy >= ry_hi || ox_lo >= ox_hi {
                        row.fill(0.0);
                        continue;
                    }
                    row[..ox_lo].fill(0.0);
                    row[ox_hi..].fill(0.0);
                    let iy = oy * g.stride + ky - g.pad;
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let src = &xp[iy * g.width..(iy + 1) * g.width];
                    if g.stride == 1 {
                        row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for (j, v) in row[ox_lo..ox_hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the input plane (adjoint of [`im2col`]).
fn col2im(col: &[f32], g: &ConvGeom, oy0: usize, oy1: usize, dxn: &mut [f32]) {
    let wo = g.out_w();
    let cols = (oy1 - oy0) * wo;
    let plane_in = g.height * g.width;
    for i in 0..g.in_ch {
        let dp = &mut dxn[i * plane_in..(i + 1) * plane_in];
        for ky in 0..g.kh {
            let (ry_lo, ry_hi) = g.row_range(ky);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.col_range(kx);
                if ox_lo >= ox_hi {
                    continue;
                }
                let r = (i * g.kh + ky) * g.kw + kx;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in oy0.max(ry_lo)..oy1.min(ry_hi) {
                    let row = &src[(oy - oy0) * wo + ox_lo..(oy - oy0) * wo + ox_hi];
                    let iy = oy * g.stride + ky - g.pad;
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let dst = &mut dp[iy * g.width..(iy + 1) * g.width];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + row.len()].iter_mut().zip(row) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in row.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// NCHW x OIHW convolution with zero padding.
pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_out = ho * wo;
    let plane_in = g.height * g.width;
    let ks = g.ksize();
    let mut out = vec![0f32; g.batch * g.out_ch * plane_out];
    if let Some(b) = bias {
        for plane in out
            .chunks_mut(plane_out.max(1))
            .take(g.batch * g.out_ch)
            .enumerate()
        {
            plane.1.fill(b[plane.0 % g.out_ch]);
        }
    }
    let step = g.rows_per_block();
    let mut col = vec![0f32; if g.is_pointwise() { 0 } else { ks * step * wo }];
    for n in 0..g.batch {
        let xn = &x[n * g.in_ch * plane_in..(n + 1) * g.in_ch * plane_in];
        let on = &mut out[n * g.out_ch * plane_out..(n + 1) * g.out_ch * plane_out];
        if g.is_pointwise() {
            gemm(
                g.out_ch,
                ks,
                plane_out,
                weight,
                (ks, 1),
                xn,
                (plane_out, 1),
                1.0,
                on,
                (plane_out, 1),
            );
            continue;
        }
        for oy0 in (0..ho).step_by(step) {
            let oy1 = (oy0 + step).min(ho);
            let cols = (oy1 - oy0) * wo;
            im2col(xn, g, oy0, oy1, &mut col[..ks * cols]);
            gemm(
                g.out_ch,
                ks,
                cols,
                weight,
                (ks, 1),
                &col,
                (cols, 1),
                1.0,
                &mut on[oy0 * wo..],
                (plane_out, 1),
            );
        }
    }
    out
}

/// Gradient of the convolution w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_out = ho * wo;
    let plane_in = g.height * g.width;
    let ks = g.ksize();
    let mut dx = vec![0f32; g.batch * g.in_ch * plane_in];
    let step = g.rows_per_block();
    let mut col = vec![0f32; if g.is_pointwise() { 0 } else { ks * step * wo }];
    for n in 0..g.batch {
        let gn = &grad_out[n * g.out_ch * plane_out..(n + 1) * g.out_ch * plane_out];
        let dxn = &mut dx[n * g.in_ch * plane_in..(n + 1) * g.in_ch * plane_in];
        if g.is_pointwise() {
            gemm(
                ks,
                g.out_ch,
                plane_out,
                weight,
                (1, ks),
                gn,
                (plane_out, 1),
                0.0,
                dxn,
                (plane_out, 1),
            );
            continue;
        }
        for oy0 in (0..ho).step_by(step) {
            let oy1 = (oy0 + step).min(ho);
            let cols = (oy1 - oy0) * wo;
            let c = &mut col[..ks * cols];
            gemm(
                ks,
                g.out_ch,
                cols,
                weight,
                (1, ks),
                &gn[oy0 * wo..],
                (plane_out, 1),
                0.0,
                c,
                (cols, 1),
            );
            col2im(c, g, oy0, oy1, dxn);
        }
    }
    dx
}

/// Gradients of the convolution w.r.t. weight and bias.
pub fn conv2d_backward_params(grad_out: &[f32], x: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_out = ho * wo;
    let plane_in = g.height * g.width;
    let ks = g.ksize();
    let mut dw = vec![0f32; g.out_ch * ks];
    let mut db = vec![0f64; g.out_ch];
    let step = g.rows_per_block();
    let mut col = vec![0f32; if g.is_pointwise() { 0 } else { ks * step * wo }];
    for n in 0..g.batch {
        let gn = &grad_out[n * g.out_ch * plane_out..(n + 1) * g.out_ch * plane_out];
        let xn = &x[n * g.in_ch * plane_in..(n + 1) * g.in_ch * plane_in];
        for (o, d) in db.iter_mut().enumerate() {
            *d += sum_f64(&gn[o * plane_out..(o + 1) * plane_out]);
        }
        if g.is_pointwise() {
            gemm(
                g.out_ch,
                plane_out,
                ks,
                gn,
                (plane_out, 1),
                xn,
                (1, plane_out),
                1.0,
                &mut dw,
                (ks, 1),
            );
            continue;
        }
        for oy0 in (0..ho).step_by(step) {
            let oy1 = (oy0 + step).min(ho);
            let cols = (oy1 - oy0) * wo;
            let c = &mut col[..ks * cols];
            im2col(xn, g, oy0, oy1, c);
            gemm(
                g.out_ch,
                cols,
                ks,
                &gn[oy0 * wo..],
                (plane_out, 1),
                c,
                (1, cols),
                1.0,
                &mut dw,
                (ks, 1),
            );
        }
    }
    (dw, db.into_iter().map(|v| v as f32).collect())
}

/// Batched `[b, m, k] x [b, k, n] -> [b, m, n]`.
pub fn bmm(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; batch * m * n];
    for bi in 0..batch {
        let (ab, bb) = (&a[bi * m * k..], &b[bi * k * n..]);
        gemm(
            m,
            k,
            n,
            ab,
            (k, 1),
            bb,
            (n, 1),
            0.0,
            &mut out[bi * m * n..],
            (n, 1),
        );
    }
    out
}

/// `[b, m, inner] x [b, cols, inner]^T -> [b, m, cols]`, i.e. `a · bᵀ` per batch.
pub fn bmm_nt(a: &[f32], b: &[f32], batch: usize, m: usize, inner: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; batch * m * cols];
    for bi in 0..batch {
        let (ab, bb) = (&a[bi * m * inner..], &b[bi * cols * inner..]);
        gemm(
            m,
            inner,
            cols,
            ab,
            (inner, 1),
            bb,
            (1, inner),
            0.0,
            &mut out[bi * m * cols..],
            (cols, 1),
        );
    }
    out
}

/// `[b, k, m]^T x [b, k, n] -> [b, m, n]`, i.e. `aᵀ · b` per batch.
pub fn bmm_tn(a: &[f32], b: &[f32], batch: usize, k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; batch * m * n];
    for bi in 0..batch {
        let (ab, bb) = (&a[bi * k * m..], &b[bi * k * n..]);
        gemm(
            m,
            k,
            n,
            ab,
            (1, m),
            bb,
            (n, 1),
            0.0,
            &mut out[bi * m * n..],
            (n, 1),
        );
    }
    out
}

pub fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}
