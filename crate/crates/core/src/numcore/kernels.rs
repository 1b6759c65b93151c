//! Slice-level kernels behind the taped operations.

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`, register-blocked in `MR×NR` tiles. Every
/// output element sums its products in increasing `k` order.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    dispatch::<false>(a, b, out, m, k, n);
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`. Reads `a` in
/// place, summing over `m` in increasing order.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && out.len() >= k * n);
    dispatch::<true>(a, g, out, k, m, n);
}

/// With `TA` the left operand is stored transposed: element `(r, p)` lives
/// at `a[p·m + r]`.
fn dispatch<const TA: bool>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { matmul_avx2::<TA>(a, b, out, m, k, n) };
        return;
    }
    matmul_body::<TA>(a, b, out, m, k, n);
}

/// Same loops compiled with wider vectors. No FMA is enabled, so results
/// are bit-identical to the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<const TA: bool>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body::<TA>(a, b, out, m, k, n);
}

#[inline(always)]
fn matmul_body<const TA: bool>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i in (0..m_full).step_by(MR) {
        for j in (0..n_full).step_by(NR) {
            tile::<TA>(a, b, out, i, j, m, k, n);
        }
        if n_full < n {
            for r in i..i + MR {
                edge_row::<TA>(a, b, &mut out[r * n..][..n], r, m, k, n_full);
            }
        }
    }
    for r in m_full..m {
        edge_row::<TA>(a, b, &mut out[r * n..][..n], r, m, k, 0);
    }
}

/// `out_row[lo..] += Σ_p a(r, p) · b[p, lo..]`, accumulated in `p` order.
#[inline(always)]
fn edge_row<const TA: bool>(a: &[f64], b: &[f64], out_row: &mut [f64], r: usize, m: usize, k: usize, lo: usize) {
    let n = out_row.len();
    let out = &mut out_row[lo..];
    for p in 0..k {
        let av = if TA { a[p * m + r] } else { a[r * k + p] };
        for (o, &bv) in out.iter_mut().zip(&b[p * n + lo..(p + 1) * n]) {
            *o += av * bv;
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<const TA: bool>(a: &[f64], b: &[f64], out: &mut [f64], i: usize, j: usize, m: usize, k: usize, n: usize) {
    let mut acc = [[0.0; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(i + r) * n + j..][..NR]);
    }
    for (p, brow) in b[j..].chunks(n).take(k).enumerate() {
        let bv: &[f64; NR] = brow[..NR].try_into().expect("tile width");
        let av: [f64; MR] = if TA {
            a[p * m + i..][..MR].try_into().expect("tile height")
        } else {
            std::array::from_fn(|r| a[(i + r) * k + p])
        };
        for r in 0..MR {
            for c in 0..NR {
                acc[r][c] += av[r] * bv[c];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(i + r) * n + j..][..NR].copy_from_slice(row);
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`: row-by-row dot products.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { matmul_bt_avx2(g, b, out, m, k, n) };
        return;
    }
    matmul_bt_body(g, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_bt_avx2(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_bt_body(g, b, out, m, k, n);
}

#[inline(always)]
fn matmul_bt_body(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 2 <= m {
        let rows = [&g[i * n..][..n], &g[(i + 1) * n..][..n]];
        let mut j = 0;
        while j + 4 <= k {
            let cols = [&b[j * n..][..n], &b[(j + 1) * n..][..n], &b[(j + 2) * n..][..n], &b[(j + 3) * n..][..n]];
            let block = dot_block(rows, cols);
            for (r, sums) in block.iter().enumerate() {
                for (c, s) in sums.iter().enumerate() {
                    out[(i + r) * k + j + c] += s;
                }
            }
            j += 4;
        }
        for j in j..k {
            for r in 0..2 {
                out[(i + r) * k + j] += dot(rows[r], &b[j * n..][..n]);
            }
        }
        i += 2;
    }
    for i in i..m {
        let grow = &g[i * n..][..n];
        for j in 0..k {
            out[i * k + j] += dot(grow, &b[j * n..][..n]);
        }
    }
}

/// `R×C` dot products at once, each summed exactly as [`dot`] sums it.
#[inline(always)]
fn dot_block<const R: usize, const C: usize>(a: [&[f64]; R], b: [&[f64]; C]) -> [[f64; C]; R] {
    let n = a[0].len();
    let body = n / 4 * 4;
    let mut acc = [[[0.0; 4]; C]; R];
    for p in (0..body).step_by(4) {
        for r in 0..R {
            let x = &a[r][p..p + 4];
            for c in 0..C {
                let y = &b[c][p..p + 4];
                for l in 0..4 {
                    acc[r][c][l] += x[l] * y[l];
                }
            }
        }
    }
    let mut out = [[0.0; C]; R];
    for r in 0..R {
        for c in 0..C {
            let tail: f64 = a[r][body..].iter().zip(&b[c][body..n]).map(|(x, y)| x * y).sum();
            let s = &acc[r][c];
            out[r][c] = (s[0] + s[1]) + (s[2] + s[3]) + tail;
        }
    }
    out
}

/// Four independent partial sums so the loop vectorizes.
#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel offset `k`.
    fn valid(&self, k: usize, input_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // need 0 <= o*s + off < input_len
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (input_len as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Unfolds the input into a `[ci·kh·kw × ho·wo]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.ci * g.kh * g.kw * p];
    let (s, pad) = (g.stride, g.pad);
    for ci in 0..g.ci {
        for ky in 0..g.kh {
            let (y0, y1) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid(kx, g.w, g.wo);
                if x0 >= x1 {
                    continue;
                }
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * s + ky - pad;
                    let xrow = &x[(ci * g.h + iy) * g.w..][..g.w];
                    let orow = &mut row[oy * g.wo..][..g.wo];
                    if s == 1 {
                        let ix0 = x0 + kx - pad;
                        orow[x0..x1].copy_from_slice(&xrow[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            orow[ox] = xrow[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an input image.
fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    let (s, pad) = (g.stride, g.pad);
    for ci in 0..g.ci {
        for ky in 0..g.kh {
            let (y0, y1) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid(kx, g.w, g.wo);
                if x0 >= x1 {
                    continue;
                }
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * s + ky - pad;
                    let drow = &mut dx[(ci * g.h + iy) * g.w..][..g.w];
                    let grow = &row[oy * g.wo..][..g.wo];
                    if s == 1 {
                        let ix0 = x0 + kx - pad;
                        for (d, &v) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                            *d += v;
                        }
                    } else {
                        for ox in x0..x1 {
                            drow[ox * s + kx - pad] += grow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `out[co, oy, ox] = Σ w[co, ci, ky, kx] · x[ci, oy·s+ky−pad, ox·s+kx−pad]`.
/// Also returns the patch matrix, which the kernel gradient reuses.
pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (k, p) = (g.ci * g.kh * g.kw, g.ho * g.wo);
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.co * p];
    matmul_acc(wt, &cols, &mut out, g.co, k, p);
    (out, cols)
}

/// Gradient with respect to the input.
pub(crate) fn conv2d_backward_input(gout: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.ci * g.kh * g.kw, g.ho * g.wo);
    let mut dcols = vec![0.0; k * p];
    matmul_at_acc(wt, gout, &mut dcols, g.co, k, p);
    let mut dx = vec![0.0; g.ci * g.h * g.w];
    col2im_acc(&dcols, g, &mut dx);
    dx
}

/// Gradient with respect to the kernel, from the forward patch matrix.
pub(crate) fn conv2d_backward_kernel(gout: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.ci * g.kh * g.kw, g.ho * g.wo);
    let mut dw = vec![0.0; g.co * k];
    matmul_bt_acc(gout, cols, &mut dw, g.co, k, p);
    dw
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// GELU and its derivative `Φ(x) + x·φ(x)`, sharing one `erf` evaluation.
pub(crate) fn gelu_with_grad(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    (x * cdf, cdf + x * pdf)
}

/// Numerically stable softmax of one row into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_tanh_form_loosely() {
        // the tanh approximation only agrees to ~1e-3
        for i in -40..=40 {
            let x = i as f64 / 10.0;
            let approx = 0.5
                * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
            assert!((gelu(x) - approx).abs() < 1e-3);
        }
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_with_grad(0.0).1 - 0.5).abs() < 1e-15);
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.5; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn blocked_products_match_naive_on_ragged_shapes() {
        let val = |i: usize| ((i * 7919) % 23) as f64 / 7.0 - 1.5;
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 8, 8), (9, 4, 17), (13, 27, 33)] {
            let a: Vec<f64> = (0..m * k).map(val).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i + 5)).collect();
            let want = naive(&a, &b, m, k, n);
            let mut out = vec![0.5; m * n];
            matmul_acc(&a, &b, &mut out, m, k, n);
            assert_eq!(out, want, "plain {m}x{k}x{n}");
            let mut out = vec![0.5; m * n];
            matmul_at_acc(&transpose(&a, m, k), &b, &mut out, k, m, n);
            assert_eq!(out, want, "transposed left {m}x{k}x{n}");
            let mut out = vec![0.5; m * n];
            matmul_bt_acc(&a, &transpose(&b, k, n), &mut out, m, n, k);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "transposed right {m}x{k}x{n}");
            }
        }
    }

    #[test]
    fn valid_range_handles_padding_and_stride() {
        let g = ConvGeom { ci: 1, h: 5, w: 5, co: 1, kh: 3, kw: 3, stride: 2, pad: 1, ho: 3, wo: 3 };
        // ky=0 -> iy = 2*oy - 1 valid for oy in 1..3
        assert_eq!(g.valid(0, 5, 3), (1, 3));
        assert_eq!(g.valid(1, 5, 3), (0, 3));
        assert_eq!(g.valid(2, 5, 3), (0, 2));
    }
}
