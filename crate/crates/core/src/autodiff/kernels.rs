//! Scalar loops behind the tape's contraction ops.

/// `c[m×p] += a[m×k] · b[k×p]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×p] += a[m×k] · b[p×k]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            c[i * p + j] += dot(arow, brow);
        }
    }
}

/// `c[k×p] += a[m×k]ᵀ · b[m×p]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a 2-D cross-correlation over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Gathers every receptive-field patch into a `[B·OH·OW, C·k·k]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * g.oh + oy) * g.ow + ox;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                let mut p = 0;
                for c in 0..g.c_in {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                dst[p] = plane[iy as usize * g.w + ix as usize];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the input image layout.
pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, x_grad: &mut [f64]) {
    let plen = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * g.oh + oy) * g.ow + ox;
                let src = &cols[row * plen..(row + 1) * plen];
                let mut p = 0;
                for c in 0..g.c_in {
                    let base = (b * g.c_in + c) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x_grad[base + iy as usize * g.w + ix as usize] += src[p];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm_acc(&a, &b, &mut c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // bᵀ stored as 4×3
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // aᵀ stored as 3×2; aᵀᵀ·b == a·b
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let mut c3 = vec![0.0; 8];
        gemm_tn_acc(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }
}
