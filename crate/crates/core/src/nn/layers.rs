//! Per-layer forward and backward kernels on single samples.
//!
//! Convolutions are 3×3, stride 1, zero padding 1, computed over a
//! zero-padded copy of the input: with the padded row length `wp = w + 2`,
//! output position `n = y * wp + x` of a "wide" output reads padded element
//! `n + ky * wp + kx` for kernel tap `(ky, kx)`. The two extra columns per
//! output row are discarded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{kernels, NnError, Result, Scalar, Tensor};

/// Padded-plane geometry for a `[C, H, W]` conv input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    fn wp(&self) -> usize {
        self.width + 2
    }

    /// Elements per padded channel plane, including two slack elements so
    /// the last tap's shifted window stays in bounds.
    pub fn plane(&self) -> usize {
        (self.height + 2) * self.wp() + 2
    }

    fn wide(&self) -> usize {
        self.height * self.wp()
    }
}

pub fn pad_input<T: Scalar>(input: &[T], shape: ConvShape) -> Vec<T> {
    let (h, w, wp, plane) = (shape.height, shape.width, shape.wp(), shape.plane());
    let mut padded = vec![T::zero(); shape.channels * plane];
    for c in 0..shape.channels {
        for y in 0..h {
            let src = &input[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = c * plane + (y + 1) * wp + 1;
            padded[dst..dst + w].copy_from_slice(src);
        }
    }
    padded
}

/// Forward pass from an already padded input. Weights are `[K, C, 3, 3]`.
pub fn conv_forward_padded<T: Scalar>(padded: &[T], shape: ConvShape, weights: &[T], bias: &[T]) -> Vec<T> {
    let k = bias.len();
    let c = shape.channels;
    let (h, w, wp, plane, n) = (shape.height, shape.width, shape.wp(), shape.plane(), shape.wide());
    assert_eq!(weights.len(), k * c * 9);
    assert_eq!(padded.len(), c * plane);
    let mut wide = vec![T::zero(); k * n];
    kernels::correlate(padded, c, plane, kernels::tap_shifts(wp), weights, &mut wide, n);
    let mut out = Vec::with_capacity(k * h * w);
    for (kk, b) in bias.iter().enumerate() {
        for y in 0..h {
            let row = &wide[kk * n + y * wp..kk * n + y * wp + w];
            out.extend(row.iter().map(|&v| v + *b));
        }
    }
    out
}

/// Gradients of a conv layer. Returns `(d_weights, d_bias, d_input)`;
/// `d_input` is skipped when `need_input` is false.
///
/// The input gradient is itself a 3×3 correlation: the padded upstream
/// gradient against the kernels rotated by 180° with input and output
/// channels swapped.
pub fn conv_backward_padded<T: Scalar>(
    padded: &[T],
    shape: ConvShape,
    weights: &[T],
    d_out: &[T],
    need_input: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let c = shape.channels;
    let (h, w, wp, plane, n) = (shape.height, shape.width, shape.wp(), shape.plane(), shape.wide());
    let k = d_out.len() / (h * w);
    assert_eq!(d_out.len(), k * h * w);
    let shifts = kernels::tap_shifts(wp);

    let mut d_wide = vec![T::zero(); k * n];
    let mut d_bias = vec![T::zero(); k];
    for kk in 0..k {
        for y in 0..h {
            let src = &d_out[(kk * h + y) * w..(kk * h + y + 1) * w];
            d_wide[kk * n + y * wp..kk * n + y * wp + w].copy_from_slice(src);
            for &g in src {
                d_bias[kk] += g;
            }
        }
    }
    let d_weights = kernels::weight_grad(padded, c, plane, shifts, &d_wide, n);

    let d_input = need_input.then(|| {
        let d_shape = ConvShape { channels: k, ..shape };
        let d_padded = pad_input(d_out, d_shape);
        let mut flipped = vec![T::zero(); c * k * 9];
        for kk in 0..k {
            for cc in 0..c {
                for t in 0..9 {
                    flipped[(cc * k + kk) * 9 + t] = weights[(kk * c + cc) * 9 + 8 - t];
                }
            }
        }
        let mut d_in_wide = vec![T::zero(); c * n];
        kernels::correlate(&d_padded, k, plane, shifts, &flipped, &mut d_in_wide, n);
        let mut d_in = Vec::with_capacity(c * h * w);
        for cc in 0..c {
            for y in 0..h {
                d_in.extend_from_slice(&d_in_wide[cc * n + y * wp..cc * n + y * wp + w]);
            }
        }
        d_in
    });
    (d_weights, d_bias, d_input)
}

fn conv_shapes<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<ConvShape> {
    let [c, h, w] = input.shape[..] else {
        return Err(NnError::ShapeMismatch(format!(
            "conv input must be [C,H,W], got {:?}",
            input.shape
        )));
    };
    let [k, wc, 3, 3] = weights.shape[..] else {
        return Err(NnError::ShapeMismatch(format!(
            "conv weights must be [K,C,3,3], got {:?}",
            weights.shape
        )));
    };
    if wc != c || bias.shape != [k] {
        return Err(NnError::ShapeMismatch(format!(
            "conv input {:?}, weights {:?}, bias {:?}",
            input.shape, weights.shape, bias.shape
        )));
    }
    Ok(ConvShape {
        channels: c,
        height: h,
        width: w,
    })
}

/// 3×3 cross-correlation, stride 1, zero padding 1: `[C,H,W] → [K,H,W]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = conv_shapes(input, weights, bias)?;
    let padded = pad_input(&input.data, shape);
    let out = conv_forward_padded(&padded, shape, &weights.data, &bias.data);
    Tensor::new(vec![bias.len(), shape.height, shape.width], out)
}

/// Returns `(d_input, d_weights, d_bias)` for an upstream gradient `d_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = conv_shapes(input, weights, bias)?;
    if d_out.shape != [bias.len(), shape.height, shape.width] {
        return Err(NnError::ShapeMismatch(format!("conv d_out {:?}", d_out.shape)));
    }
    let padded = pad_input(&input.data, shape);
    let (dw, db, di) = conv_backward_padded(&padded, shape, &weights.data, &d_out.data, true);
    Ok((
        Tensor::new(input.shape.clone(), di.expect("input gradient requested"))?,
        Tensor::new(weights.shape.clone(), dw)?,
        Tensor::new(bias.shape.clone(), db)?,
    ))
}

/// `y = W x + b` with `W` shaped `[units, inputs]`; `x` is read flat.
pub fn dense_forward<T: Scalar>(x: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
    let inputs = x.len();
    debug_assert_eq!(weights.len(), inputs * bias.len());
    bias.iter()
        .zip(weights.chunks_exact(inputs))
        .map(|(&b, row)| b + dot(row, x))
        .collect()
}

/// Dot product with 16 independent partial sums, added in lane order.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (u, v) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += u[l] * v[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for (&u, &v) in ar.iter().zip(br) {
        s += u * v;
    }
    s
}

/// Returns `(d_weights, d_bias, d_x)`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    weights: &[T],
    d_out: &[T],
    need_input: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let inputs = x.len();
    let mut d_weights = Vec::with_capacity(weights.len());
    for &g in d_out {
        d_weights.extend(x.iter().map(|&v| g * v));
    }
    let d_x = need_input.then(|| {
        let mut d_x = vec![T::zero(); inputs];
        for (&g, row) in d_out.iter().zip(weights.chunks_exact(inputs)) {
            for (dx, &w) in d_x.iter_mut().zip(row) {
                *dx += g * w;
            }
        }
        d_x
    });
    (d_weights, d_out.to_vec(), d_x)
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

/// Gradient passes where the forward output was positive.
pub fn relu_backward<T: Scalar>(output: &[T], d_out: &[T]) -> Vec<T> {
    output
        .iter()
        .zip(d_out)
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect()
}

/// 2×2 max pooling, stride 2, on `[C,H,W]` with even `H`, `W`. Also returns
/// the flat input index of each window's maximum; ties go to the first
/// element in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for cc in 0..c {
        let base = cc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + (2 * y) * w + 2 * xx;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(argmax: &[u32], d_out: &[T], input_len: usize) -> Vec<T> {
    let mut d_in = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(d_out) {
        d_in[i as usize] += g;
    }
    d_in
}

/// Inverted dropout mask: each element is kept with probability `1 - p` and
/// scaled by `1 / (1 - p)`. The mask depends only on `(seed, stream, len)`.
pub fn dropout_mask<T: Scalar>(len: usize, p: f32, seed: u64, stream: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let keep = T::lit(1.0 / (1.0 - p as f64));
    (0..len)
        .map(|_| if rng.gen::<f32>() < p { T::zero() } else { keep })
        .collect()
}

pub fn apply_mask<T: Scalar>(x: &[T], mask: &[T]) -> Vec<T> {
    x.iter().zip(mask).map(|(&v, &m)| v * m).collect()
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax probabilities against `target`; returns
/// `(loss, d_logits)` with `d_logits = p - onehot(target)`.
pub fn softmax_xent<T: Scalar>(probs: &[T], target: usize) -> (T, Vec<T>) {
    let tiny = T::min_positive_value();
    let loss = -(probs[target].max(tiny)).ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == target { p - T::one() } else { p })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops, straight from the definition.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
        let k = w.shape[0];
        let mut out = vec![0.0; k * h * wd];
        for kk in 0..k {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data[kk];
                    for cc in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((kk * c + cc) * 3 + ky) * 3 + kx]
                                    * x.data[(cc * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(kk * h + y) * wd + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 6, 7], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data[4] = 1.0;
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn ones_kernel_interior_sum() {
        let x = Tensor::from_fn(&[1, 5, 5], |_| 0.75f32);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |_| 1.0f32);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.data[yy * 5 + xx] - 9.0 * 0.75).abs() < 1e-6);
            }
        }
        assert!((y.data[0] - 4.0 * 0.75).abs() < 1e-6);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        for (a, e) in y.data.iter().zip(conv_oracle(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-6);
        }
        let xf = x.cast::<f32>();
        let yf = conv2d_forward(&xf, &w.cast(), &b.cast()).unwrap();
        for (a, e) in yf.data.iter().zip(&y.data) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[3, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, &Tensor::zeros(&[3])),
            Err(NnError::ShapeMismatch(_))
        ));
        let w5 = Tensor::<f32>::zeros(&[3, 2, 5, 5]);
        assert!(conv2d_forward(&x, &w5, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&[2, 4, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let g = random(&[3, 4, 6], &mut rng);
        // Scalar objective: <g, conv(x)>.
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d_forward(x, w, b)
                .unwrap()
                .data
                .iter()
                .zip(&g.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dx, dw, db) = conv2d_backward(&x, &w, &b, &g).unwrap();
        let h = 1e-5;
        for (i, &a) in dx.data.iter().enumerate() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let num = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * h);
            assert!((a - num).abs() < 1e-7, "dx[{i}] {a} vs {num}");
        }
        for (i, &a) in dw.data.iter().enumerate() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data[i] += h;
            wm.data[i] -= h;
            let num = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * h);
            assert!((a - num).abs() < 1e-7, "dw[{i}] {a} vs {num}");
        }
        for (i, &a) in db.data.iter().enumerate() {
            let expected: f64 = g.data[i * 24..(i + 1) * 24].iter().sum();
            assert!((a - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_zero_gradient_for_negative_inputs() {
        let x = [-2.0f64, -0.5, 0.3, 4.0];
        let y = relu_forward(&x);
        assert_eq!(y, vec![0.0, 0.0, 0.3, 4.0]);
        assert_eq!(relu_backward(&y, &[1.0, 1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_routes_to_first_maximum() {
        // One 2x4 channel: windows [1,3;3,0] and [5,5;2,5].
        let x = [1.0f64, 3.0, 5.0, 5.0, 3.0, 0.0, 2.0, 5.0];
        let (y, arg) = maxpool_forward(&x, 1, 2, 4);
        assert_eq!(y, vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 2]);
        assert_eq!(
            maxpool_backward(&arg, &[10.0, 20.0], 8),
            vec![0.0, 10.0, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let logits: Vec<f32> = (0..5).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = softmax(&logits);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let p = softmax(&[1000.0f64, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn xent_gradient_is_probs_minus_onehot() {
        let logits = [0.3f64, -1.2, 2.0];
        let p = softmax(&logits);
        let (loss, g) = softmax_xent(&p, 2);
        assert!((loss + p[2].ln()).abs() < 1e-15);
        assert_eq!(g, vec![p[0], p[1], p[2] - 1.0]);
        let h = 1e-6;
        for i in 0..3 {
            let (mut lp, mut lm) = (logits, logits);
            lp[i] += h;
            lm[i] -= h;
            let num = (softmax_xent(&softmax(&lp), 2).0 - softmax_xent(&softmax(&lm), 2).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn dropout_mask_reproducible_and_scaled() {
        let a = dropout_mask::<f32>(1000, 0.5, 42, 3);
        let b = dropout_mask::<f32>(1000, 0.5, 42, 3);
        let c = dropout_mask::<f32>(1000, 0.5, 42, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&m| m == 0.0 || m == 2.0));
        let kept = a.iter().filter(|&&m| m > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn dense_backward_matches_definition() {
        let x = [1.0f64, -2.0, 0.5];
        let w = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let y = dense_forward(&x, &w, &[0.0, 1.0]);
        assert!((y[0] - (0.1 - 0.4 + 0.15)).abs() < 1e-15);
        let (dw, db, dx) = dense_backward(&x, &w, &[1.0, -1.0], true);
        assert_eq!(dw, vec![1.0, -2.0, 0.5, -1.0, 2.0, -0.5]);
        assert_eq!(db, vec![1.0, -1.0]);
        let dx = dx.unwrap();
        assert!((dx[0] - 0.5).abs() < 1e-15 && (dx[1] + 0.3).abs() < 1e-15 && (dx[2] - 0.9).abs() < 1e-15);
    }
}
