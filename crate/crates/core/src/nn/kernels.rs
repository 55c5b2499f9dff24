//! Forward and backward kernels for the dense layers.

use rayon::prelude::*;

use crate::scalar::Real;

/// Geometry of a 2D convolution over NCHW input with an OIHW kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input pixel for output `(oy, ox)` and kernel tap `(ki, kj)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds one sample `x[C,H,W]` into `cols[C*kh*kw, Ho*Wo]`.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let np = ho * wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * np..][..np];
                for oy in 0..ho {
                    for ox in 0..wo {
                        row[oy * wo + ox] = match g.source(oy, ox, ki, kj) {
                            Some((y, x)) => plane[y * g.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adds the folded patch gradients `dcols` back into `dx[C,H,W]`.
pub fn col2im<T: Real>(g: &ConvGeom, dcols: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let np = ho * wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &dcols[((c * g.kh + ki) * g.kw + kj) * np..][..np];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            plane[y * g.w + x] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward; returns the output and the unfolded input of every sample.
/// Samples run in parallel; each is computed independently, so the result does
/// not depend on the thread count.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], k: &[T]) -> (Vec<T>, Vec<T>) {
    let (p, np) = (g.patch(), g.out_pixels());
    let xn = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); g.n * p * np];
    let mut y = vec![T::zero(); g.n * g.o * np];
    cols.par_chunks_mut(p * np).zip(y.par_chunks_mut(g.o * np)).zip(x.par_chunks(xn)).for_each(|((cs, ys), xs)| {
        im2col(g, xs, cs);
        T::gemm(g.o, p, np, T::one(), k, (p, 1), cs, (np, 1), T::zero(), ys, (np, 1));
    });
    (y, cols)
}

/// Convolution backward: accumulates into whichever of `dk` and `dx` is given.
/// Kernel gradients are formed per sample and summed in sample order.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    k: &[T],
    cols: &[T],
    dy: &[T],
    dk: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let (p, np) = (g.patch(), g.out_pixels());
    let xn = g.c * g.h * g.w;
    if let Some(dk) = dk {
        let partial: Vec<Vec<T>> = dy
            .par_chunks(g.o * np)
            .zip(cols.par_chunks(p * np))
            .map(|(dys, cs)| {
                // dY · colsᵀ
                let mut d = vec![T::zero(); g.o * p];
                T::gemm(g.o, np, p, T::one(), dys, (np, 1), cs, (1, np), T::zero(), &mut d, (p, 1));
                d
            })
            .collect();
        for d in &partial {
            dk.iter_mut().zip(d).for_each(|(a, &b)| *a += b);
        }
    }
    if let Some(dx) = dx {
        dx.par_chunks_mut(xn).zip(dy.par_chunks(g.o * np)).for_each(|(dxs, dys)| {
            // dcols = Kᵀ · dY
            let mut dcols = vec![T::zero(); p * np];
            T::gemm(p, g.o, np, T::one(), k, (1, p), dys, (np, 1), T::zero(), &mut dcols, (np, 1));
            col2im(g, &dcols, dxs);
        });
    }
}

/// Group normalization statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// `x[N, C, S]` normalized over each `(sample, group)` block, then scaled and shifted per channel.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    scale: &[T],
    shift: &[T],
    eps: T,
) -> (Vec<T>, GroupNormCache<T>) {
    let cpg = c / groups;
    let block = cpg * spatial;
    let inv = T::one() / T::lit(block as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    for (b, xs) in x.chunks_exact(block).enumerate() {
        let mean = xs.iter().fold(T::zero(), |a, &v| a + v) * inv;
        let var = xs.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv;
        let r = T::one() / (var + eps).sqrt();
        rstd[b] = r;
        let group = b % groups;
        for (i, &v) in xs.iter().enumerate() {
            let ch = group * cpg + i / spatial;
            let h = (v - mean) * r;
            xhat[b * block + i] = h;
            y[b * block + i] = h * scale[ch] + shift[ch];
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    cache: &GroupNormCache<T>,
    dy: &[T],
    c: usize,
    spatial: usize,
    groups: usize,
    scale: &[T],
    mut dx: Option<&mut [T]>,
    mut dscale: Option<&mut [T]>,
    mut dshift: Option<&mut [T]>,
) {
    let cpg = c / groups;
    let block = cpg * spatial;
    let inv = T::one() / T::lit(block as f64);
    let mut dxhat = vec![T::zero(); block];
    for (b, dys) in dy.chunks_exact(block).enumerate() {
        let group = b % groups;
        let xh = &cache.xhat[b * block..(b + 1) * block];
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for i in 0..block {
            let ch = group * cpg + i / spatial;
            if let Some(ds) = dscale.as_deref_mut() {
                ds[ch] += dys[i] * xh[i];
            }
            if let Some(dt) = dshift.as_deref_mut() {
                dt[ch] += dys[i];
            }
            let d = dys[i] * scale[ch];
            dxhat[i] = d;
            m1 += d;
            m2 += d * xh[i];
        }
        if let Some(dx) = dx.as_deref_mut() {
            let (m1, m2, r) = (m1 * inv, m2 * inv, cache.rstd[b]);
            for i in 0..block {
                dx[b * block + i] += r * (dxhat[i] - m1 - xh[i] * m2);
            }
        }
    }
}

/// `y[N, out] = x[N, in] · wᵀ + b`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * out];
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(b);
    }
    T::gemm(n, inp, out, T::one(), x, (inp, 1), w, (1, inp), T::one(), &mut y, (out, 1));
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    inp: usize,
    out: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        T::gemm(n, out, inp, T::one(), dy, (out, 1), w, (inp, 1), T::one(), dx, (inp, 1));
    }
    if let Some(dw) = dw {
        T::gemm(out, n, inp, T::one(), dy, (1, out), x, (inp, 1), T::one(), dw, (inp, 1));
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.n * g.o * ho * wo];
        for s in 0..g.n {
            for o in 0..g.o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let y_in = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let x_in = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if y_in < 0 || x_in < 0 || y_in >= g.h as isize || x_in >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((s * g.c + c) * g.h + y_in as usize) * g.w + x_in as usize]
                                        * k[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        y[((s * g.o + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom { n: 2, c: 3, h: 6, w: 8, o: 4, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let k: Vec<f64> = (0..g.o * g.patch()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect();
        let (y, _) = conv2d_forward(&g, &x, &k);
        let expect = naive_conv(&g, &x, &k);
        assert_eq!(y.len(), expect.len());
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ones_kernel_counts_window() {
        let g = ConvGeom { n: 1, c: 1, h: 4, w: 4, o: 1, kh: 3, kw: 3, stride: 2, pad: 1 };
        let (y, _) = conv2d_forward(&g, &[1.0f64; 16], &[1.0; 9]);
        assert_eq!(y, vec![4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let (n, c, s, groups) = (2, 4, 5, 2);
        let x: Vec<f64> = (0..n * c * s).map(|i| (i as f64 * 0.7).sin() * 3.0 + i as f64 * 0.01).collect();
        let (y, _) = group_norm_forward(&x, n, c, s, groups, &[1.0; 4], &[0.0; 4], 1e-5);
        for block in y.chunks_exact(c / groups * s) {
            let m = block.iter().sum::<f64>() / block.len() as f64;
            let v = block.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / block.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
