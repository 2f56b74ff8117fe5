//! Forward/backward kernels for the layer ops. Pure functions over slices.

use crate::tensor::Element;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Range of output columns `ox` whose input column `ox·stride + kj − pad`
/// lies inside the image, for stride 1.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
    (lo, hi)
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col<F: Element>(g: &ConvGeom, img: &[F], cols: &mut [F]) {
    let hw_out = g.spatial_out();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    if g.stride == 1 && hi > lo {
                        line[..lo].fill(F::zero());
                        line[hi..].fill(F::zero());
                        let start = lo + kj - g.pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        continue;
                    }
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back into an image gradient, accumulating overlaps.
pub(crate) fn col2im<F: Element>(g: &ConvGeom, cols: &[F], img: &mut [F]) {
    let hw_out = g.spatial_out();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let (lo, hi) = valid_cols(g, kj);
                    if g.stride == 1 && hi > lo {
                        let start = base + lo + kj - g.pad;
                        let dst = &mut img[start..start + hi - lo];
                        for (d, &v) in dst.iter_mut().zip(&src[oy * g.wo + lo..oy * g.wo + hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns output `[N,K,Ho,Wo]` and the unfolded columns for every image.
pub(crate) fn conv_forward<F: Element>(
    g: &ConvGeom,
    input: &[F],
    kernel: &[F],
    bias: Option<&[F]>,
) -> (Vec<F>, Vec<F>) {
    let patch = g.patch();
    let hw = g.spatial_out();
    let mut cols = vec![F::zero(); g.n * patch * hw];
    let mut out = vec![F::zero(); g.n * g.k * hw];
    let img_len = g.c * g.h * g.w;
    for i in 0..g.n {
        let col = &mut cols[i * patch * hw..(i + 1) * patch * hw];
        im2col(g, &input[i * img_len..(i + 1) * img_len], col);
        let dst = &mut out[i * g.k * hw..(i + 1) * g.k * hw];
        if let Some(b) = bias {
            for (kk, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(b[kk]);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        F::gemm(
            g.k, patch, hw, F::one(), kernel, patch as isize, 1, col, hw as isize, 1, beta, dst,
            hw as isize, 1,
        );
    }
    (out, cols)
}

/// Gradients w.r.t. input (if requested), kernel and bias.
pub(crate) fn conv_backward<F: Element>(
    g: &ConvGeom,
    cols: &[F],
    kernel: &[F],
    dout: &[F],
    want_input: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let patch = g.patch();
    let hw = g.spatial_out();
    let img_len = g.c * g.h * g.w;
    let mut dkernel = vec![F::zero(); g.k * patch];
    let mut dbias = vec![F::zero(); g.k];
    let mut dinput = want_input.then(|| vec![F::zero(); g.n * img_len]);
    let mut dcols = vec![F::zero(); patch * hw];
    for i in 0..g.n {
        let dy = &dout[i * g.k * hw..(i + 1) * g.k * hw];
        let col = &cols[i * patch * hw..(i + 1) * patch * hw];
        for (kk, row) in dy.chunks(hw).enumerate() {
            dbias[kk] += row.iter().copied().sum::<F>();
        }
        // dK[K,P] += dY[K,HW] · colsᵀ[HW,P]
        F::gemm(
            g.k, hw, patch, F::one(), dy, hw as isize, 1, col, 1, hw as isize, F::one(),
            &mut dkernel, patch as isize, 1,
        );
        if let Some(dx) = dinput.as_mut() {
            // dcols[P,HW] = Kᵀ[P,K] · dY[K,HW]
            F::gemm(
                patch, g.k, hw, F::one(), kernel, 1, patch as isize, dy, hw as isize, 1,
                F::zero(), &mut dcols, hw as isize, 1,
            );
            col2im(g, &dcols, &mut dx[i * img_len..(i + 1) * img_len]);
        }
    }
    (dinput, dkernel, dbias)
}

/// Per-channel statistics over `N,H,W` of a `[N,C,H,W]` buffer.
pub(crate) fn channel_moments<F: Element>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<F>, Vec<F>) {
    let m = F::of((n * hw) as f64);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for ch in 0..c {
        let mut s = F::zero();
        for i in 0..n {
            s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<F>();
        }
        let mu = s / m;
        let mut v = F::zero();
        for i in 0..n {
            for &val in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                let d = val - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
/// Returns the output and the flat input index of every maximum.
pub(crate) fn maxpool2_forward<F: Element>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<F>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
