//! Loop kernels behind the differentiable ops.
//!
//! Everything here works on flat slices. Each kernel writes disjoint output
//! chunks, so parallel execution gives the same bits as a single thread.

use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Dot product with a fixed lane split so the compiler can vectorize it.
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = R::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

pub fn sum<R: Real>(a: &[R]) -> R {
    let mut acc = [R::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l];
        }
    }
    let tail = rest.iter().fold(R::zero(), |s, &v| s + v);
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `y += alpha * x`
#[inline]
pub fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `[C, V]` to `[V, C]`.
pub fn channel_last<R: Real>(x: &[R], c: usize) -> Vec<R> {
    let v = x.len() / c.max(1);
    let mut out = vec![R::zero(); x.len()];
    for ch in 0..c {
        for (i, &val) in x[ch * v..(ch + 1) * v].iter().enumerate() {
            out[i * c + ch] = val;
        }
    }
    out
}

/// `[V, C]` to `[C, V]`, written into `out`.
pub fn channel_first_into<R: Real>(x: &[R], c: usize, out: &mut [R]) {
    let v = x.len() / c.max(1);
    for (i, row) in x.chunks_exact(c.max(1)).enumerate() {
        for (ch, &val) in row.iter().enumerate() {
            out[ch * v + i] = val;
        }
    }
}

/// Geometry of a cubic-kernel 3D convolution over one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k.is_multiple_of(2) || k == 0 {
            return Err(Error::invalid("conv3d", format!("kernel size {k} must be odd")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("conv3d", format!("stride {stride} not in {{1,2}}")));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad;
            if padded < k {
                return Err(Error::shape(
                    "conv3d",
                    format!("input extent {} too small for kernel {k}", input[a]),
                ));
            }
            output[a] = (padded - k) / stride + 1;
        }
        Ok(ConvGeom {
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Output index range `[lo, hi)` along one axis for which
    /// `o * stride + tap - pad` lands inside the input.
    fn range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let n_in = self.input[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_incl = (n_in - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.output[axis] as isize);
        (lo.max(0) as usize, hi.max(lo) as usize)
    }

    /// Calls `f(out_base, in_base, od_lo, od_hi, tap_index)` for every
    /// (kernel tap, output row) pair. Rows run along the contiguous axis.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let k = self.k;
        let s = self.stride;
        let [_, iw, id] = self.input;
        let [_, ow, od] = self.output;
        for kh in 0..k {
            let (h0, h1) = self.range(0, kh);
            for kw in 0..k {
                let (w0, w1) = self.range(1, kw);
                for kd in 0..k {
                    let (d0, d1) = self.range(2, kd);
                    if d0 >= d1 {
                        continue;
                    }
                    let tap = (kh * k + kw) * k + kd;
                    for oh in h0..h1 {
                        let ih = oh * s + kh - self.pad;
                        for ow_ in w0..w1 {
                            let iw_ = ow_ * s + kw - self.pad;
                            let ob = (oh * ow + ow_) * od;
                            let ib = (ih * iw + iw_) * id;
                            // input index along d is od_*s + kd - pad
                            f(ob, ib + kd, d0, d1, tap);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates one channel's depthwise convolution into `out`.
pub fn dw_forward<R: Real>(x: &[R], w: &[R], g: &ConvGeom, out: &mut [R]) {
    let s = g.stride;
    let pad = g.pad;
    g.for_each_row(|ob, ib, d0, d1, tap| {
        let wv = w[tap];
        if s == 1 {
            let src = &x[ib + d0 - pad..ib + d1 - pad];
            axpy(wv, src, &mut out[ob + d0..ob + d1]);
        } else {
            for o in d0..d1 {
                out[ob + o] = out[ob + o] + wv * x[ib + o * s - pad];
            }
        }
    });
}

/// Accumulates the input gradient of one channel (the transposed convolution).
pub fn dw_backward_input<R: Real>(dy: &[R], w: &[R], g: &ConvGeom, dx: &mut [R]) {
    let s = g.stride;
    let pad = g.pad;
    g.for_each_row(|ob, ib, d0, d1, tap| {
        let wv = w[tap];
        if s == 1 {
            let src = &dy[ob + d0..ob + d1];
            axpy(wv, src, &mut dx[ib + d0 - pad..ib + d1 - pad]);
        } else {
            for o in d0..d1 {
                let i = ib + o * s - pad;
                dx[i] = dx[i] + wv * dy[ob + o];
            }
        }
    });
}

/// Accumulates the kernel gradient of one channel into `dw` (length k^3).
pub fn dw_backward_kernel<R: Real>(dy: &[R], x: &[R], g: &ConvGeom, dw: &mut [R]) {
    let s = g.stride;
    let pad = g.pad;
    g.for_each_row(|ob, ib, d0, d1, tap| {
        let acc = if s == 1 {
            dot(&dy[ob + d0..ob + d1], &x[ib + d0 - pad..ib + d1 - pad])
        } else {
            let mut a = R::zero();
            for o in d0..d1 {
                a = a + dy[ob + o] * x[ib + o * s - pad];
            }
            a
        };
        dw[tap] = dw[tap] + acc;
    });
}

/// Depthwise convolution over a whole `[N, C, spatial]` buffer.
pub fn depthwise_conv<R: Real>(x: &[R], w: &[R], n: usize, c: usize, g: &ConvGeom) -> Vec<R> {
    let (il, ol, k3) = (g.in_len(), g.out_len(), g.k.pow(3));
    let mut out = vec![R::zero(); n * c * ol];
    out.par_chunks_mut(ol).enumerate().for_each(|(nc, o)| {
        let ch = nc % c;
        dw_forward(&x[nc * il..(nc + 1) * il], &w[ch * k3..(ch + 1) * k3], g, o);
    });
    out
}

/// Transposed depthwise convolution: maps an output-shaped buffer back to input shape.
pub fn depthwise_conv_transpose<R: Real>(
    y: &[R],
    w: &[R],
    n: usize,
    c: usize,
    g: &ConvGeom,
) -> Vec<R> {
    let (il, ol, k3) = (g.in_len(), g.out_len(), g.k.pow(3));
    let mut out = vec![R::zero(); n * c * il];
    out.par_chunks_mut(il).enumerate().for_each(|(nc, o)| {
        let ch = nc % c;
        dw_backward_input(&y[nc * ol..(nc + 1) * ol], &w[ch * k3..(ch + 1) * k3], g, o);
    });
    out
}

/// Kernel gradient `d<y, conv(x; w)>/dw`, summed over the batch in order.
pub fn depthwise_kernel_grad<R: Real>(
    dy: &[R],
    x: &[R],
    n: usize,
    c: usize,
    g: &ConvGeom,
) -> Vec<R> {
    let (il, ol, k3) = (g.in_len(), g.out_len(), g.k.pow(3));
    let partial: Vec<Vec<R>> = (0..n * c)
        .into_par_iter()
        .map(|nc| {
            let mut dw = vec![R::zero(); k3];
            dw_backward_kernel(
                &dy[nc * ol..(nc + 1) * ol],
                &x[nc * il..(nc + 1) * il],
                g,
                &mut dw,
            );
            dw
        })
        .collect();
    let mut dw = vec![R::zero(); c * k3];
    for (nc, p) in partial.iter().enumerate() {
        let ch = nc % c;
        for (a, &b) in dw[ch * k3..(ch + 1) * k3].iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    dw
}

/// Per-voxel channel mixing: `out[n, o, v] = b[o] + sum_i w[o, i] x[n, i, v]`.
pub fn pointwise<R: Real>(
    x: &[R],
    w: &[R],
    b: &[R],
    n: usize,
    cin: usize,
    cout: usize,
    s: usize,
) -> Vec<R> {
    let mut out = vec![R::zero(); n * cout * s];
    out.par_chunks_mut(s).enumerate().for_each(|(no, row)| {
        let (bn, o) = (no / cout, no % cout);
        row.fill(b[o]);
        let xb = &x[bn * cin * s..(bn + 1) * cin * s];
        for i in 0..cin {
            axpy(w[o * cin + i], &xb[i * s..(i + 1) * s], row);
        }
    });
    out
}

/// Returns `(dx, dw, db)` for [`pointwise`].
pub fn pointwise_backward<R: Real>(
    dy: &[R],
    x: &[R],
    w: &[R],
    n: usize,
    cin: usize,
    cout: usize,
    s: usize,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let mut dx = vec![R::zero(); n * cin * s];
    dx.par_chunks_mut(s).enumerate().for_each(|(ni, row)| {
        let (bn, i) = (ni / cin, ni % cin);
        let dyb = &dy[bn * cout * s..(bn + 1) * cout * s];
        for o in 0..cout {
            axpy(w[o * cin + i], &dyb[o * s..(o + 1) * s], row);
        }
    });
    let dw: Vec<R> = (0..cout * cin)
        .into_par_iter()
        .map(|oi| {
            let (o, i) = (oi / cin, oi % cin);
            (0..n).fold(R::zero(), |acc, bn| {
                acc + dot(
                    &dy[(bn * cout + o) * s..(bn * cout + o + 1) * s],
                    &x[(bn * cin + i) * s..(bn * cin + i + 1) * s],
                )
            })
        })
        .collect();
    let db: Vec<R> = (0..cout)
        .map(|o| {
            (0..n).fold(R::zero(), |acc, bn| {
                acc + sum(&dy[(bn * cout + o) * s..(bn * cout + o + 1) * s])
            })
        })
        .collect();
    (dx, dw, db)
}

/// Normalizes each contiguous block of `block` values to zero mean and unit
/// variance. Returns `(normalized, mean, rstd)` with one statistic per block.
pub fn normalize_blocks<R: Real>(x: &[R], block: usize, eps: f64) -> (Vec<R>, Vec<R>, Vec<R>) {
    let nb = x.len() / block;
    let mut out = vec![R::zero(); x.len()];
    let stats: Vec<(R, R)> = out
        .par_chunks_mut(block)
        .enumerate()
        .map(|(bi, o)| {
            let xb = &x[bi * block..(bi + 1) * block];
            let mean = xb.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / block as f64;
            let var = xb
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / block as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            let (m, r) = (R::lit(mean), R::lit(rstd));
            for (ov, &xv) in o.iter_mut().zip(xb) {
                *ov = (xv - m) * r;
            }
            (m, r)
        })
        .collect();
    debug_assert_eq!(stats.len(), nb);
    let (mean, rstd) = stats.into_iter().unzip();
    (out, mean, rstd)
}

/// Gradient of [`normalize_blocks`] given the normalized output `xhat`.
pub fn normalize_blocks_backward<R: Real>(dy: &[R], xhat: &[R], rstd: &[R], block: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); dy.len()];
    let inv_n = R::lit(1.0 / block as f64);
    dx.par_chunks_mut(block).enumerate().for_each(|(bi, o)| {
        let r = bi * block..(bi + 1) * block;
        let (dyb, xh) = (&dy[r.clone()], &xhat[r]);
        let mean_dy = sum(dyb) * inv_n;
        let mean_dyx = dot(dyb, xh) * inv_n;
        let rs = rstd[bi];
        for ((ov, &g), &h) in o.iter_mut().zip(dyb).zip(xh) {
            *ov = rs * (g - mean_dy - h * mean_dyx);
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_same_and_strided() {
        let g = ConvGeom::new([6, 6, 6], 3, 1, 1).unwrap();
        assert_eq!(g.output, [6, 6, 6]);
        let g = ConvGeom::new([8, 8, 8], 3, 2, 1).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        let g = ConvGeom::new([8, 8, 8], 5, 2, 2).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        let g = ConvGeom::new([6, 6, 6], 3, 1, 0).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        assert!(ConvGeom::new([6, 6, 6], 4, 1, 1).is_err());
        assert!(ConvGeom::new([6, 6, 6], 3, 3, 1).is_err());
    }

    /// Direct six-loop convolution used as a reference for the row kernels.
    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [ih, iw, id] = g.input;
        let [oh, ow, od] = g.output;
        let k = g.k as isize;
        let mut out = vec![0.0; g.out_len()];
        for a in 0..oh {
            for b in 0..ow {
                for c in 0..od {
                    let mut acc = 0.0;
                    for p in 0..k {
                        for q in 0..k {
                            for r in 0..k {
                                let i = (a * g.stride) as isize + p - g.pad as isize;
                                let j = (b * g.stride) as isize + q - g.pad as isize;
                                let l = (c * g.stride) as isize + r - g.pad as isize;
                                if i < 0 || j < 0 || l < 0 {
                                    continue;
                                }
                                let (i, j, l) = (i as usize, j as usize, l as usize);
                                if i >= ih || j >= iw || l >= id {
                                    continue;
                                }
                                acc += w[((p * k + q) * k + r) as usize] * x[(i * iw + j) * id + l];
                            }
                        }
                    }
                    out[(a * ow + b) * od + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn row_kernel_matches_naive_loops() {
        for &(dims, k, s, p) in &[
            ([5usize, 6, 7], 3usize, 1usize, 1usize),
            ([6, 6, 6], 3, 2, 1),
            ([8, 7, 6], 5, 2, 2),
            ([7, 7, 7], 5, 1, 0),
        ] {
            let g = ConvGeom::new(dims, k, s, p).unwrap();
            let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..k * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let mut out = vec![0.0; g.out_len()];
            dw_forward(&x, &w, &g, &mut out);
            assert_eq!(out, naive(&x, &w, &g), "{dims:?} k{k} s{s} p{p}");
        }
    }

    #[test]
    fn dot_and_sum_handle_tails() {
        let a: Vec<f64> = (0..19).map(|v| v as f64).collect();
        assert_eq!(sum(&a), 171.0);
        assert_eq!(dot(&a, &a), (0..19).map(|v| (v * v) as f64).sum::<f64>());
    }
}
