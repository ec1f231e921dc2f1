//! Direct 3×3 convolution kernels over padded planes.
//!
//! Both kernels operate on the "wide" index space `m = y * wp + x` where a
//! tap `t` reads padded element `m + shift[t]`. Arithmetic order is fixed by
//! the source and every multiply-add is a fused `mul_add` (correctly
//! rounded everywhere), so the AVX-512, AVX2 and portable builds of each
//! kernel return identical bits.

use std::any::TypeId;

use super::Scalar;

/// Output rows processed together; each input load feeds this many rows.
const ROWS: usize = 4;
/// Accumulator lanes in the weight-gradient reduction.
const LANES: usize = 16;

fn as_f32<T: Scalar>(s: &[T]) -> Option<&[f32]> {
    // SAFETY: T is f32 when the type ids match.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) })
}

fn as_f32_mut<T: Scalar>(s: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: as in `as_f32`.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) })
}

pub(crate) fn tap_shifts(wp: usize) -> [usize; 9] {
    std::array::from_fn(|t| (t / 3) * wp + t % 3)
}

/// `out[k][m] += Σ_c Σ_t w[(k·C + c)·9 + t] · src[c·stride + m + shift[t]]`
/// for `m < n`. `out` holds `K` rows of length `n`.
pub(crate) fn correlate<T: Scalar>(
    src: &[T],
    channels: usize,
    stride: usize,
    shifts: [usize; 9],
    w: &[T],
    out: &mut [T],
    n: usize,
) {
    let k = out.len() / n;
    assert_eq!(out.len(), k * n);
    assert_eq!(w.len(), k * channels * 9);
    assert!(channels == 0 || (channels - 1) * stride + shifts[8] + n <= src.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            if let (Some(src), Some(w), Some(out)) = (as_f32(src), as_f32(w), as_f32_mut(out)) {
                // SAFETY: the CPU supports the enabled features; bounds
                // were asserted above.
                unsafe { avx512::correlate(src, channels, stride, shifts, w, out, n) };
                return;
            }
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { correlate_avx2(src, channels, stride, shifts, w, out, n) };
            return;
        }
    }
    correlate_impl(src, channels, stride, shifts, w, out, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_avx2<T: Scalar>(
    src: &[T],
    channels: usize,
    stride: usize,
    shifts: [usize; 9],
    w: &[T],
    out: &mut [T],
    n: usize,
) {
    correlate_impl(src, channels, stride, shifts, w, out, n);
}

#[inline(always)]
fn correlate_impl<T: Scalar>(
    src: &[T],
    channels: usize,
    stride: usize,
    shifts: [usize; 9],
    w: &[T],
    out: &mut [T],
    n: usize,
) {
    let k = out.len() / n;
    let mut row = 0;
    for block in out.chunks_mut(ROWS * n) {
        let rows = block.len() / n;
        for c in 0..channels {
            let base = &src[c * stride..];
            let x: [&[T]; 9] = std::array::from_fn(|t| &base[shifts[t]..shifts[t] + n]);
            let wt = |r: usize| -> [T; 9] {
                let o = ((row + r) * channels + c) * 9;
                std::array::from_fn(|t| w[o + t])
            };
            if rows == ROWS {
                let ws: [[T; 9]; ROWS] = std::array::from_fn(wt);
                let (o0, rest) = block.split_at_mut(n);
                let (o1, rest) = rest.split_at_mut(n);
                let (o2, o3) = rest.split_at_mut(n);
                for i in 0..n {
                    let v: [T; 9] = std::array::from_fn(|t| x[t][i]);
                    o0[i] = dot9(&ws[0], &v, o0[i]);
                    o1[i] = dot9(&ws[1], &v, o1[i]);
                    o2[i] = dot9(&ws[2], &v, o2[i]);
                    o3[i] = dot9(&ws[3], &v, o3[i]);
                }
            } else {
                for r in 0..rows {
                    let ws = wt(r);
                    let o = &mut block[r * n..(r + 1) * n];
                    for i in 0..n {
                        let v: [T; 9] = std::array::from_fn(|t| x[t][i]);
                        o[i] = dot9(&ws, &v, o[i]);
                    }
                }
            }
        }
        row += rows;
    }
    debug_assert_eq!(row, k);
}

#[inline(always)]
fn dot9<T: Scalar>(w: &[T; 9], v: &[T; 9], acc: T) -> T {
    let a = w[1].mul_add(v[1], w[0] * v[0]);
    let b = w[3].mul_add(v[3], w[2] * v[2]);
    let c = w[5].mul_add(v[5], w[4] * v[4]);
    let d = w[7].mul_add(v[7], w[6].mul_add(v[6], acc));
    w[8].mul_add(v[8], (a + b) + (c + d))
}

/// `dw[(k·C + c)·9 + t] = Σ_{m<n} d[k][m] · src[c·stride + m + shift[t]]`.
/// `d` holds `K` rows of length `n`.
pub(crate) fn weight_grad<T: Scalar>(
    src: &[T],
    channels: usize,
    stride: usize,
    shifts: [usize; 9],
    d: &[T],
    n: usize,
) -> Vec<T> {
    let k = d.len() / n;
    assert_eq!(d.len(), k * n);
    assert!(channels == 0 || (channels - 1) * stride + shifts[8] + n <= src.len());
    let mut dw = vec![T::zero(); k * channels * 9];
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            if let (Some(src), Some(d), Some(out)) = (as_f32(src), as_f32(d), as_f32_mut(&mut dw)) {
                // SAFETY: the CPU supports the enabled features; bounds
                // were asserted above.
                unsafe { avx512::weight_grad(src, channels, stride, shifts, d, n, out) };
                return dw;
            }
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { weight_grad_avx2(src, channels, stride, shifts, d, n, &mut dw) };
            return dw;
        }
    }
    weight_grad_impl(src, channels, stride, shifts, d, n, &mut dw);
    dw
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_avx2<T: Scalar>(
    src: &[T],
    channels: usize,
    stride: usize,
    shifts: [usize; 9],
    d: &[T],
    n: usize,
    dw: &mut [T],
) {
    weight_grad_impl(src, channels, stride, shifts, d, n, dw);
}

#[inline(always)]
fn weight_grad_impl<T: Scalar>(
    src: &[T],
    channels: usize,
    stride: usize,
    shifts: [usize; 9],
    d: &[T],
    n: usize,
    dw: &mut [T],
) {
    let body = n - n % LANES;
    for (kk, drow) in d.chunks_exact(n).enumerate() {
        for c in 0..channels {
            let base = &src[c * stride..];
            let x: [&[T]; 9] = std::array::from_fn(|t| &base[shifts[t]..shifts[t] + n]);
            let mut acc = [[T::zero(); LANES]; 9];
            for (j, g) in drow[..body].chunks_exact(LANES).enumerate() {
                let i0 = j * LANES;
                for t in 0..9 {
                    let xs = &x[t][i0..i0 + LANES];
                    for l in 0..LANES {
                        acc[t][l] = g[l].mul_add(xs[l], acc[t][l]);
                    }
                }
            }
            let o = (kk * channels + c) * 9;
            for t in 0..9 {
                let mut s = T::zero();
                for lane in acc[t] {
                    s += lane;
                }
                for i in body..n {
                    s = drow[i].mul_add(x[t][i], s);
                }
                dw[o + t] = s;
            }
        }
    }
}

/// Explicit 16-lane `f32` versions of the kernels. Each lane performs the
/// same operation sequence as the generic code.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{dot9, LANES, ROWS};

    /// Output positions per tile; keeps a row block's outputs in L1.
    const TILE: usize = 512;

    #[inline(always)]
    unsafe fn dot9v(w: &[__m512; 9], v: &[__m512; 9], acc: __m512) -> __m512 {
        let a = _mm512_fmadd_ps(w[1], v[1], _mm512_mul_ps(w[0], v[0]));
        let b = _mm512_fmadd_ps(w[3], v[3], _mm512_mul_ps(w[2], v[2]));
        let c = _mm512_fmadd_ps(w[5], v[5], _mm512_mul_ps(w[4], v[4]));
        let d = _mm512_fmadd_ps(w[7], v[7], _mm512_fmadd_ps(w[6], v[6], acc));
        _mm512_fmadd_ps(w[8], v[8], _mm512_add_ps(_mm512_add_ps(a, b), _mm512_add_ps(c, d)))
    }

    #[inline(always)]
    unsafe fn rows<const R: usize>(x: [*const f32; 9], o: [*mut f32; R], ws: [[f32; 9]; R], n: usize) {
        let wv: [[__m512; 9]; R] = std::array::from_fn(|r| std::array::from_fn(|t| _mm512_set1_ps(ws[r][t])));
        let body = n - n % LANES;
        let mut i = 0;
        while i < body {
            let v: [__m512; 9] = std::array::from_fn(|t| _mm512_loadu_ps(x[t].add(i)));
            for r in 0..R {
                let p = o[r].add(i);
                _mm512_storeu_ps(p, dot9v(&wv[r], &v, _mm512_loadu_ps(p)));
            }
            i += LANES;
        }
        for i in body..n {
            let v: [f32; 9] = std::array::from_fn(|t| *x[t].add(i));
            for r in 0..R {
                let p = o[r].add(i);
                *p = dot9(&ws[r], &v, *p);
            }
        }
    }

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub(super) unsafe fn correlate(
        src: &[f32],
        channels: usize,
        stride: usize,
        shifts: [usize; 9],
        w: &[f32],
        out: &mut [f32],
        n: usize,
    ) {
        let k = out.len() / n;
        let out = out.as_mut_ptr();
        let mut start = 0;
        while start < n {
            let len = (n - start).min(TILE);
            let mut row = 0;
            while row < k {
                let take = (k - row).min(ROWS);
                for c in 0..channels {
                    let x: [*const f32; 9] = std::array::from_fn(|t| src.as_ptr().add(c * stride + shifts[t] + start));
                    let wt = |r: usize| -> [f32; 9] {
                        let o = ((row + r) * channels + c) * 9;
                        std::array::from_fn(|t| w[o + t])
                    };
                    let op = |r: usize| out.add((row + r) * n + start);
                    if take == ROWS {
                        rows::<ROWS>(x, std::array::from_fn(op), std::array::from_fn(wt), len);
                    } else {
                        for r in 0..take {
                            rows::<1>(x, [op(r)], [wt(r)], len);
                        }
                    }
                }
                row += take;
            }
            start += len;
        }
    }

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub(super) unsafe fn weight_grad(
        src: &[f32],
        channels: usize,
        stride: usize,
        shifts: [usize; 9],
        d: &[f32],
        n: usize,
        dw: &mut [f32],
    ) {
        let k = d.len() / n;
        let body = n - n % LANES;
        let mut kk = 0;
        while kk < k {
            let pair = kk + 1 < k;
            let g0 = d.as_ptr().add(kk * n);
            let g1 = if pair { d.as_ptr().add((kk + 1) * n) } else { g0 };
            for c in 0..channels {
                let x: [*const f32; 9] = std::array::from_fn(|t| src.as_ptr().add(c * stride + shifts[t]));
                let mut a0 = [_mm512_setzero_ps(); 9];
                let mut a1 = [_mm512_setzero_ps(); 9];
                let mut i = 0;
                while i < body {
                    let u = _mm512_loadu_ps(g0.add(i));
                    let v = _mm512_loadu_ps(g1.add(i));
                    for t in 0..9 {
                        let xt = _mm512_loadu_ps(x[t].add(i));
                        a0[t] = _mm512_fmadd_ps(u, xt, a0[t]);
                        a1[t] = _mm512_fmadd_ps(v, xt, a1[t]);
                    }
                    i += LANES;
                }
                let rows: &[(usize, *const f32, &[__m512; 9])] = if pair {
                    &[(kk, g0, &a0), (kk + 1, g1, &a1)]
                } else {
                    &[(kk, g0, &a0)]
                };
                for &(row, g, acc) in rows {
                    let o = (row * channels + c) * 9;
                    for t in 0..9 {
                        let mut lanes = [0f32; LANES];
                        _mm512_storeu_ps(lanes.as_mut_ptr(), acc[t]);
                        let mut s = 0f32;
                        for lane in lanes {
                            s += lane;
                        }
                        for i in body..n {
                            s = (*g.add(i)).mul_add(*x[t].add(i), s);
                        }
                        dw[o + t] = s;
                    }
                }
            }
            kk += if pair { 2 } else { 1 };
        }
    }
}
