//! Dense kernels for the network. Activations are channel-major: a 2-D map is
//! `[C, T, F]` and a sequence is `[C, T]`, innermost axis contiguous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Overlap of a shifted range: indices `i` in `0..n` with `i + shift` in `0..n`.
#[inline]
fn span(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift.max(0)).max(lo as isize) as usize;
    (lo, hi.min(n))
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

/// Stride-1 'same' 2-D convolution; `out` is overwritten.
pub fn conv2d_forward(
    s: Conv2dShape,
    input: &[f64],
    t: usize,
    f: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    let plane = t * f;
    let r = (s.k / 2) as isize;
    for o in 0..s.cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(b[o]);
        for c in 0..s.cin {
            let src = &input[c * plane..(c + 1) * plane];
            for a in 0..s.k {
                let dt = a as isize - r;
                let (t0, t1) = span(t, dt);
                for bb in 0..s.k {
                    let df = bb as isize - r;
                    let wv = w[((o * s.cin + c) * s.k + a) * s.k + bb];
                    if wv == 0.0 {
                        continue;
                    }
                    let (f0, f1) = span(f, df);
                    for ti in t0..t1 {
                        let si = (ti as isize + dt) as usize;
                        let so = (f0 as isize + df) as usize;
                        axpy(
                            wv,
                            &src[si * f + so..si * f + so + (f1 - f0)],
                            &mut dst[ti * f + f0..ti * f + f1],
                        );
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `gin` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    s: Conv2dShape,
    input: &[f64],
    t: usize,
    f: usize,
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    let plane = t * f;
    let r = (s.k / 2) as isize;
    for o in 0..s.cout {
        let go = &gout[o * plane..(o + 1) * plane];
        gb[o] += go.iter().sum::<f64>();
        for c in 0..s.cin {
            let src = &input[c * plane..(c + 1) * plane];
            for a in 0..s.k {
                let dt = a as isize - r;
                let (t0, t1) = span(t, dt);
                for bb in 0..s.k {
                    let df = bb as isize - r;
                    let (f0, f1) = span(f, df);
                    let widx = ((o * s.cin + c) * s.k + a) * s.k + bb;
                    let mut acc = 0.0;
                    for ti in t0..t1 {
                        let si = (ti as isize + dt) as usize;
                        let so = (f0 as isize + df) as usize;
                        acc += dot(
                            &go[ti * f + f0..ti * f + f1],
                            &src[si * f + so..si * f + so + (f1 - f0)],
                        );
                    }
                    gw[widx] += acc;
                    if let Some(gin) = gin.as_deref_mut() {
                        let wv = w[widx];
                        let gi = &mut gin[c * plane..(c + 1) * plane];
                        for ti in t0..t1 {
                            let si = (ti as isize + dt) as usize;
                            let so = (f0 as isize + df) as usize;
                            axpy(
                                wv,
                                &go[ti * f + f0..ti * f + f1],
                                &mut gi[si * f + so..si * f + so + (f1 - f0)],
                            );
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1dShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dilation: usize,
}

/// Stride-1 'same' dilated 1-D convolution over time; `out` is overwritten.
pub fn conv1d_forward(s: Conv1dShape, input: &[f64], t: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let r = (s.k / 2) as isize;
    for o in 0..s.cout {
        let dst = &mut out[o * t..(o + 1) * t];
        dst.fill(b[o]);
        for c in 0..s.cin {
            let src = &input[c * t..(c + 1) * t];
            for j in 0..s.k {
                let shift = (j as isize - r) * s.dilation as isize;
                let (t0, t1) = span(t, shift);
                if t0 >= t1 {
                    continue;
                }
                let so = (t0 as isize + shift) as usize;
                axpy(w[(o * s.cin + c) * s.k + j], &src[so..so + (t1 - t0)], &mut dst[t0..t1]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    s: Conv1dShape,
    input: &[f64],
    t: usize,
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    let r = (s.k / 2) as isize;
    for o in 0..s.cout {
        let go = &gout[o * t..(o + 1) * t];
        gb[o] += go.iter().sum::<f64>();
        for c in 0..s.cin {
            let src = &input[c * t..(c + 1) * t];
            for j in 0..s.k {
                let shift = (j as isize - r) * s.dilation as isize;
                let (t0, t1) = span(t, shift);
                if t0 >= t1 {
                    continue;
                }
                let so = (t0 as isize + shift) as usize;
                let widx = (o * s.cin + c) * s.k + j;
                gw[widx] += dot(&go[t0..t1], &src[so..so + (t1 - t0)]);
                if let Some(gin) = gin.as_deref_mut() {
                    axpy(w[widx], &go[t0..t1], &mut gin[c * t + so..c * t + so + (t1 - t0)]);
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
pub fn relu_backward_inplace(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Max-pool along the innermost (frequency) axis by `p`; returns the argmax
/// offsets for the backward pass.
pub fn maxpool_freq(input: &[f64], rows: usize, f: usize, p: usize) -> (Vec<f64>, Vec<u32>) {
    let fo = f / p;
    let mut out = Vec::with_capacity(rows * fo);
    let mut arg = Vec::with_capacity(rows * fo);
    for row in input.chunks_exact(f).take(rows) {
        for g in 0..fo {
            let cell = &row[g * p..(g + 1) * p];
            let mut best = 0;
            for (i, &v) in cell.iter().enumerate() {
                if v > cell[best] {
                    best = i;
                }
            }
            out.push(cell[best]);
            arg.push((g * p + best) as u32);
        }
    }
    (out, arg)
}

pub fn maxpool_freq_backward(gout: &[f64], arg: &[u32], rows: usize, f: usize, p: usize) -> Vec<f64> {
    let fo = f / p;
    let mut gin = vec![0.0; rows * f];
    for r in 0..rows {
        for g in 0..fo {
            gin[r * f + arg[r * fo + g] as usize] += gout[r * fo + g];
        }
    }
    gin
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Effective weights `g * v / |v|` per output row of length `row`.
pub fn weight_norm(v: &[f64], g: &[f64], row: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(v.len());
    for (o, vr) in v.chunks_exact(row).enumerate() {
        let n = vr.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        w.extend(vr.iter().map(|x| g[o] * x / n));
    }
    w
}

/// Pulls a gradient on the effective weights back to `(v, g)`.
pub fn weight_norm_backward(v: &[f64], g: &[f64], row: usize, gw: &[f64], gv: &mut [f64], gg: &mut [f64]) {
    for (o, vr) in v.chunks_exact(row).enumerate() {
        let n = vr.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let gwr = &gw[o * row..(o + 1) * row];
        let proj = dot(gwr, vr) / n;
        gg[o] += proj;
        for ((gvi, &gwi), &vi) in gv[o * row..(o + 1) * row].iter_mut().zip(gwr).zip(vr) {
            *gvi += g[o] / n * (gwi - proj * vi / n);
        }
    }
}

/// Per-column softmax of a `[C, T]` logit map, returned as `[T, C]` rows.
pub fn softmax_frames(logits: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for ti in 0..t {
        let m = (0..c).map(|k| logits[k * t + ti]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (logits[k * t + ti] - m).exp();
            out[ti * c + k] = e;
            z += e;
        }
        out[ti * c..(ti + 1) * c].iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Naive reference convolution with explicit bounds checks.
    fn conv2d_naive(s: Conv2dShape, x: &[f64], t: usize, f: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let r = (s.k / 2) as isize;
        let mut out = vec![0.0; s.cout * t * f];
        for o in 0..s.cout {
            for ti in 0..t {
                for fi in 0..f {
                    let mut acc = b[o];
                    for c in 0..s.cin {
                        for a in 0..s.k {
                            for bb in 0..s.k {
                                let tt = ti as isize + a as isize - r;
                                let ff = fi as isize + bb as isize - r;
                                if tt >= 0 && ff >= 0 && (tt as usize) < t && (ff as usize) < f {
                                    acc += w[((o * s.cin + c) * s.k + a) * s.k + bb]
                                        * x[(c * t + tt as usize) * f + ff as usize];
                                }
                            }
                        }
                    }
                    out[(o * t + ti) * f + fi] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let s = Conv2dShape { cin: 2, cout: 3, k: 5 };
        let (t, f) = (6, 9);
        let x = lcg(s.cin * t * f, 1);
        let w = lcg(s.cout * s.cin * 25, 2);
        let b = lcg(s.cout, 3);
        let mut out = vec![0.0; s.cout * t * f];
        conv2d_forward(s, &x, t, f, &w, &b, &mut out);
        let want = conv2d_naive(s, &x, t, f, &w, &b);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let s = Conv2dShape { cin: 2, cout: 2, k: 3 };
        let (t, f) = (4, 5);
        let x = lcg(s.cin * t * f, 4);
        let w = lcg(s.cout * s.cin * 9, 5);
        let b = lcg(s.cout, 6);
        let gout = lcg(s.cout * t * f, 7);
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            let mut out = vec![0.0; s.cout * t * f];
            conv2d_forward(s, x, t, f, w, &b, &mut out);
            out.iter().zip(&gout).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        let mut gin = vec![0.0; x.len()];
        conv2d_backward(s, &x, t, f, &w, &gout, &mut gw, &mut gb, Some(&mut gin));
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - gin[i]).abs() < 1e-6);
        }
        assert!((gb[0] - gout[..t * f].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn conv1d_backward_matches_finite_differences() {
        let s = Conv1dShape { cin: 3, cout: 2, k: 3, dilation: 2 };
        let t = 7;
        let x = lcg(s.cin * t, 8);
        let w = lcg(s.cout * s.cin * s.k, 9);
        let b = lcg(s.cout, 10);
        let gout = lcg(s.cout * t, 11);
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            let mut out = vec![0.0; s.cout * t];
            conv1d_forward(s, x, t, w, &b, &mut out);
            out.iter().zip(&gout).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        let mut gin = vec![0.0; x.len()];
        conv1d_backward(s, &x, t, &w, &gout, &mut gw, &mut gb, Some(&mut gin));
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            assert!(((loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h) - gw[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            assert!(((loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h) - gin[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv1d_dilation_shifts_taps() {
        // A single tap at j = 2 with dilation 3 reads x[t + 3].
        let s = Conv1dShape { cin: 1, cout: 1, k: 3, dilation: 3 };
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let mut out = vec![0.0; 8];
        conv1d_forward(s, &x, 8, &[0.0, 0.0, 1.0], &[0.0], &mut out);
        assert_eq!(out, vec![3.0, 4.0, 5.0, 6.0, 7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_norm_backward_matches_finite_differences() {
        let row = 4;
        let v = lcg(8, 12);
        let g = vec![0.7, -1.3];
        let gw = lcg(8, 13);
        let loss = |v: &[f64], g: &[f64]| -> f64 {
            weight_norm(v, g, row).iter().zip(&gw).map(|(a, b)| a * b).sum()
        };
        let mut gv = vec![0.0; 8];
        let mut gg = vec![0.0; 2];
        weight_norm_backward(&v, &g, row, &gw, &mut gv, &mut gg);
        let h = 1e-6;
        for i in 0..8 {
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[i] += h;
            vm[i] -= h;
            assert!(((loss(&vp, &g) - loss(&vm, &g)) / (2.0 * h) - gv[i]).abs() < 1e-7);
        }
        for i in 0..2 {
            let (mut gp, mut gm) = (g.clone(), g.clone());
            gp[i] += h;
            gm[i] -= h;
            assert!(((loss(&v, &gp) - loss(&v, &gm)) / (2.0 * h) - gg[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = vec![1.0, 5.0, 2.0, 0.0, -1.0, -3.0, 4.0, 2.0];
        let (out, arg) = maxpool_freq(&x, 1, 8, 4);
        assert_eq!(out, vec![5.0, 4.0]);
        let g = maxpool_freq_backward(&[1.0, 2.0], &arg, 1, 8, 4);
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = lcg(3 * 5, 14);
        let p = softmax_frames(&logits, 3, 5);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_is_seeded() {
        let a = dropout_mask(1000, 0.2, 5);
        assert_eq!(a, dropout_mask(1000, 0.2, 5));
        let dropped = a.iter().filter(|&&v| v == 0.0).count();
        assert!((150..250).contains(&dropped));
    }
}
