//! Per-example compute kernels shared by the taped and untaped forward paths.
//!
//! All images are `[channels, height, width]` slices; kernels are
//! `[out_channels, in_channels, k, k]`; dense weights are `[out, in]`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    /// Output columns `[lo, hi)` whose input column `ox + kj - pad` is in bounds.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.out_w());
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy + ki).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// `C = A·B + beta·C` with `C` of shape `[m, n]`. `A` is stored `[m, k]`,
/// or `[k, m]` when `a_t`; `B` is stored `[k, n]`, or `[n, k]` when `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access inside the slices.
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

impl ConvGeom {
    /// Rows of the unfolded input: one per (channel, ki, kj).
    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn col_len(&self) -> usize {
        self.col_rows() * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into `[C·k·k, Ho·Wo]` patches (zero outside the image).
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ic in 0..g.in_c {
        let xin = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut col[((ic * g.k + ki) * g.k + kj) * ho * wo..][..ho * wo];
                let (lo, hi) = g.col_range(kj);
                let src_lo = lo + kj - g.pad;
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    match g.in_row(oy, ki) {
                        Some(iy) => {
                            dst[..lo].fill(0.0);
                            dst[lo..hi].copy_from_slice(&xin[iy * g.w + src_lo..iy * g.w + src_lo + (hi - lo)]);
                            dst[hi..].fill(0.0);
                        }
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adds `[C·k·k, Ho·Wo]` patch gradients back onto the image gradient.
fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ic in 0..g.in_c {
        let dplane = &mut dx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &col[((ic * g.k + ki) * g.k + kj) * ho * wo..][..ho * wo];
                let (lo, hi) = g.col_range(kj);
                let src_lo = lo + kj - g.pad;
                for oy in 0..ho {
                    let Some(iy) = g.in_row(oy, ki) else { continue };
                    let d = &mut dplane[iy * g.w + src_lo..iy * g.w + src_lo + (hi - lo)];
                    for (a, b) in d.iter_mut().zip(&row[oy * wo + lo..oy * wo + hi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// One example: `out[O, Ho·Wo] = kernel[O, C·k·k] · im2col(x) + bias`.
/// `col` is scratch space of at least `g.col_len()`.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64], col: &mut Vec<f64>) {
    let hw = g.out_h() * g.out_w();
    col.resize(g.col_len(), 0.0);
    im2col(g, x, col);
    for (oc, plane) in out[..g.out_c * hw].chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[oc]);
    }
    gemm(g.out_c, g.col_rows(), hw, kernel, false, col, false, 1.0, out);
}

/// Accumulates input and/or parameter gradients of a convolution for one example.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    col: &mut Vec<f64>,
) {
    let hw = g.out_h() * g.out_w();
    let rows = g.col_rows();
    col.resize(g.col_len(), 0.0);
    if let Some(db) = db {
        for (oc, plane) in dy.chunks_exact(hw).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
    }
    if let Some(dk) = dk {
        im2col(g, x, col);
        // dk[O, rows] += dy[O, hw] · colᵀ
        gemm(g.out_c, hw, rows, dy, false, col, true, 1.0, dk);
    }
    if let Some(dx) = dx {
        // dcol[rows, hw] = kernelᵀ · dy
        gemm(rows, g.out_c, hw, kernel, true, dy, false, 0.0, col);
        col2im_add(g, col, dx);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.size) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.size) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c * self.out_h() * self.out_w()
    }
}

/// Max pooling; `argmax`, when given, receives the winning input offset for
/// every output cell (first maximum in scan order on ties).
pub(crate) fn maxpool_forward(g: &PoolGeom, x: &[f64], out: &mut [f64], mut argmax: Option<&mut [usize]>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.c {
        let base = c * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for dy in 0..g.size {
                    let row = base + (oy * g.stride + dy) * g.w + ox * g.stride;
                    for dx in 0..g.size {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_at = row + dx;
                        }
                    }
                }
                let o = (c * ho + oy) * wo + ox;
                out[o] = best;
                if let Some(a) = argmax.as_deref_mut() {
                    a[o] = best_at;
                }
            }
        }
    }
}

/// Batched `out[N, O] = x[N, I] · weightᵀ + bias`.
pub(crate) fn affine_batch_forward(batch: usize, x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_out = bias.len();
    let n_in = if batch == 0 { 0 } else { x.len() / batch };
    for row in out.chunks_exact_mut(n_out.max(1)).take(batch) {
        row.copy_from_slice(bias);
    }
    gemm(batch, n_in, n_out, x, false, weight, true, 1.0, out);
}

/// Batched affine gradients; every output buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_batch_backward(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(db) = db {
        for row in dy.chunks_exact(n_out.max(1)).take(batch) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    if let Some(dw) = dw {
        // dw[O, I] += dyᵀ · x
        gemm(n_out, batch, n_in, dy, true, x, false, 1.0, dw);
    }
    if let Some(dx) = dx {
        // dx[N, I] += dy · weight
        gemm(batch, n_out, n_in, dy, false, weight, false, 1.0, dx);
    }
}

/// Row softmax of `z / temperature`, computed with the max-shift.
pub(crate) fn softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive convolution by the textbook definition.
    fn conv_naive(g: &ConvGeom, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_len()];
        for oc in 0..g.out_c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[oc];
                    for ic in 0..g.in_c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = oy as isize + ki as isize - g.pad as isize;
                                let ix = ox as isize + kj as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += k[((oc * g.in_c + ic) * g.k + ki) * g.k + kj]
                                    * x[(ic * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 0.7137).sin()).collect()
    }

    #[test]
    fn conv_matches_naive_with_and_without_padding() {
        for pad in 0..3 {
            let g = ConvGeom {
                in_c: 2,
                h: 6,
                w: 5,
                out_c: 3,
                k: 3,
                pad,
            };
            let x = pseudo(g.in_len(), 0.3);
            let k = pseudo(g.out_c * g.in_c * 9, 1.1);
            let b = pseudo(g.out_c, 2.0);
            let mut out = vec![0.0; g.out_len()];
            conv2d_forward(&g, &x, &k, &b, &mut out, &mut Vec::new());
            let expect = conv_naive(&g, &x, &k, &b);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // Without bias the convolution is bilinear in (x, k), so
        // <dy, conv(x, k)> = <dx, x> = <dk, k>.
        for pad in 0..3 {
            let g = ConvGeom {
                in_c: 3,
                h: 7,
                w: 6,
                out_c: 2,
                k: 3,
                pad,
            };
            let x = pseudo(g.in_len(), 0.9);
            let k = pseudo(g.out_c * g.in_c * 9, 3.3);
            let b = vec![0.0; g.out_c];
            let dy = pseudo(g.out_len(), 5.1);
            let mut y = vec![0.0; g.out_len()];
            let mut col = Vec::new();
            conv2d_forward(&g, &x, &k, &b, &mut y, &mut col);
            let (mut dx, mut dk, mut db) = (vec![0.0; x.len()], vec![0.0; k.len()], vec![0.0; 2]);
            conv2d_backward(&g, &x, &k, &dy, Some(&mut dx), Some(&mut dk), Some(&mut db), &mut col);
            let lhs = inner(&dy, &y);
            assert!((lhs - inner(&dx, &x)).abs() < 1e-10);
            assert!((lhs - inner(&dk, &k)).abs() < 1e-10);
            let plane = g.out_h() * g.out_w();
            assert!((db[1] - dy[plane..].iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_affine_matches_rowwise() {
        let (n, i, o) = (3, 5, 4);
        let x = pseudo(n * i, 0.2);
        let w = pseudo(o * i, 1.7);
        let b = pseudo(o, 4.4);
        let mut out = vec![0.0; n * o];
        affine_batch_forward(n, &x, &w, &b, &mut out);
        for r in 0..n {
            for j in 0..o {
                let e = b[j] + inner(&x[r * i..(r + 1) * i], &w[j * i..(j + 1) * i]);
                assert!((out[r * o + j] - e).abs() < 1e-12);
            }
        }
        let dy = pseudo(n * o, 6.0);
        let (mut dx, mut dw) = (vec![0.0; n * i], vec![0.0; o * i]);
        affine_batch_backward(n, i, o, &x, &w, &dy, Some(&mut dx), Some(&mut dw), None);
        let lhs = inner(&dy, &out) - (0..n).map(|r| inner(&dy[r * o..(r + 1) * o], &b)).sum::<f64>();
        assert!((lhs - inner(&dx, &x)).abs() < 1e-10);
        assert!((lhs - inner(&dw, &w)).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let g = PoolGeom {
            c: 1,
            h: 2,
            w: 3,
            size: 2,
            stride: 1,
        };
        let x = [1.0, 5.0, 5.0, 0.0, 2.0, 1.0];
        let mut out = [0.0; 2];
        let mut arg = [0usize; 2];
        maxpool_forward(&g, &x, &mut out, Some(&mut arg));
        assert_eq!(out, [5.0, 5.0]);
        assert_eq!(arg, [1, 1]);
    }

    #[test]
    fn softmax_temperature() {
        let mut p = [0.0; 2];
        softmax_into(&[40.0, 0.0], 40.0, &mut p);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }
}
