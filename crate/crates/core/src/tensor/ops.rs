use rayon::prelude::*;

use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Work (m*k*n multiply-adds) above which matmul splits rows across the rayon pool.
const PARALLEL_MATMUL_WORK: usize = 1 << 16;

/// `a[..., k] x b[k, n] -> [..., n]`.
///
/// Each output element is accumulated as `((0 + a0*b0) + a1*b1) + ...` with the
/// inner index ascending. Row-parallelism does not change that order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape().len() != 2 || a.shape().is_empty() {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("lhs {:?} rhs {:?}", a.shape(), b.shape()),
        });
    }
    let (k, n) = (b.shape()[0], b.shape()[1]);
    if a.last_dim() != k {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner dims {} vs {}", a.last_dim(), k),
        });
    }
    ensure_finite("matmul", a.data())?;
    ensure_finite("matmul", b.data())?;

    let m = a.rows();
    let mut out = vec![0.0f32; m * n];
    let lhs = a.data();
    let rhs = b.data();
    let row_kernel = |(i, acc): (usize, &mut [f32])| {
        let a_row = &lhs[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &rhs[t * n..(t + 1) * n];
            for (c, &bv) in acc.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    };
    if n > 0 && m * n * k >= PARALLEL_MATMUL_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }

    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = n;
    let out = Tensor::new(shape, out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `y_i = x_i / sqrt(mean(x^2) + eps) * gain_i` over each trailing row.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.numel() != d {
        return Err(Error::Shape {
            op: "rms_norm",
            detail: format!("row width {d} vs gain {}", gain.numel()),
        });
    }
    // Written this way so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(eps > 0.0) {
        return Err(Error::Shape {
            op: "rms_norm",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    ensure_finite("rms_norm", x.data())?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        rms_norm_row(out.row_mut(r), gain.data(), eps);
    }
    Ok(out)
}

/// In-place RMS normalization of one row.
pub fn rms_norm_row(row: &mut [f32], gain: &[f32], eps: f32) {
    let mut sum_sq = 0.0f32;
    for v in row.iter() {
        sum_sq += v * v;
    }
    let inv = 1.0 / (sum_sq / row.len() as f32 + eps).sqrt();
    for (v, g) in row.iter_mut().zip(gain) {
        *v = *v * inv * g;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    ensure_finite("softmax_rows", x.data())?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    ensure_finite("silu", x.data())?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = silu_scalar(*v);
    }
    Ok(out)
}

/// Evaluated in f64 and rounded once, so the result is within half an ulp.
#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

/// Rotary embedding over a `[..., s, head_dim]` tensor; row `i` of each
/// `[s, head_dim]` block sits at position `start_pos + i`.
pub fn rope_apply(x: &Tensor, start_pos: usize, theta_base: f32) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape {
            op: "rope_apply",
            detail: format!("need [..., s, head_dim], got {shape:?}"),
        });
    }
    let head_dim = shape[shape.len() - 1];
    if !head_dim.is_multiple_of(2) {
        return Err(Error::OddHeadDim(head_dim));
    }
    ensure_finite("rope_apply", x.data())?;
    let s = shape[shape.len() - 2];
    let mut out = x.clone();
    for r in 0..out.rows() {
        let pos = start_pos + r % s.max(1);
        rope_rotate_row(out.row_mut(r), pos, theta_base);
    }
    Ok(out)
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` by `pos / theta^(2i/head_dim)`.
///
/// Angles are formed in f64 so large positions keep their precision.
pub fn rope_rotate_row(row: &mut [f32], pos: usize, theta_base: f32) {
    let head_dim = row.len();
    for (i, pair) in row.chunks_exact_mut(2).enumerate() {
        let freq = (theta_base as f64).powf(-((2 * i) as f64) / head_dim as f64);
        let angle = pos as f64 * freq;
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_greedy(logits: &Tensor) -> Result<usize> {
    argmax_slice(logits.data())
}

pub fn argmax_slice(logits: &[f32]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("argmax_greedy"));
    }
    ensure_finite("argmax_greedy", logits)?;
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(&mut rng, &[3, 3], 1.0);
        assert!(matmul(&Tensor::identity(3), &m).unwrap().bit_eq(&m));
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[4, 5], 1.0);
        let b = random(&mut rng, &[5, 3], 1.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
        let oracle = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_same_bits_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[96, 80], 1.0);
        let b = random(&mut rng, &[80, 72], 1.0);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| matmul(&a, &b).unwrap())
        };
        let one = run(1);
        assert!(one.bit_eq(&run(4)));
        assert!(one.bit_eq(&run(7)));
        for (x, y) in one.data().iter().zip(&naive_matmul(&a, &b)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
        let bad = Tensor::new(vec![1, 1], vec![f32::NAN]).unwrap();
        assert!(matches!(
            matmul(&bad, &Tensor::identity(1)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn rms_norm_trivial_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let y = rms_norm(&ones, &ones, 1e-12).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let z = rms_norm(&Tensor::zeros(&[4]), &ones, 1e-5).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert!(rms_norm(&ones, &Tensor::full(&[3], 1.0), 1e-5).is_err());
    }

    #[test]
    fn rms_norm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[1, 8], 2.0);
        let g = random(&mut rng, &[8], 1.0);
        let y = rms_norm(&x, &g, 1e-5).unwrap();
        let ms: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 8.0;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        for i in 0..8 {
            let want = x.data()[i] as f64 * inv * g.data()[i] as f64;
            assert!((y.data()[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&Tensor::zeros(&[1, 3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let y = softmax_rows(&Tensor::from_vec(vec![1000.0, 0.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-7);
        assert!(y.data()[1].abs() < 1e-7);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[1, 12], 6.0);
        let y = softmax_rows(&x).unwrap();
        let max = x.data().iter().fold(f64::MIN, |m, v| m.max(*v as f64));
        let exps: Vec<f64> = x.data().iter().map(|v| (*v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, e) in y.data().iter().zip(&exps) {
            assert!((*got as f64 - e / sum).abs() < 1e-6);
        }
    }

    #[test]
    fn silu_cases() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(30.0) - 30.0).abs() < 1e-6);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) as f64 - want).abs() < 1e-7);
        assert!((want - 0.731_058).abs() < 1e-6);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[2, 1, 8], 1.0);
        assert!(rope_apply(&x, 0, 10000.0).unwrap().bit_eq(&x));
    }

    #[test]
    fn rope_head_dim_two_rotates_by_position() {
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        for p in [1usize, 5, 37] {
            let y = rope_apply(&x, p, 10000.0).unwrap();
            assert!((y.data()[0] as f64 - (p as f64).cos()).abs() < 1e-6);
            assert!((y.data()[1] as f64 - (p as f64).sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_rows_use_successive_positions() {
        let x = Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = rope_apply(&x, 4, 10000.0).unwrap();
        for r in 0..3 {
            let p = (4 + r) as f64;
            assert!((y.row(r)[0] as f64 - p.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        assert!(matches!(
            rope_apply(&Tensor::zeros(&[1, 1, 3]), 0, 10000.0),
            Err(Error::OddHeadDim(3))
        ));
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax_slice(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(argmax_slice(&[0.5, 0.5]).unwrap(), 0);
        assert!(matches!(argmax_slice(&[]), Err(Error::Empty(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f32> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut best = 0;
        for i in 0..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        assert_eq!(argmax_slice(&v).unwrap(), best);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f32..50.0, 1..40)) {
            let y = softmax_rows(&Tensor::from_vec(row)).unwrap();
            let s: f32 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn rms_norm_scale_invariant(
            row in prop::collection::vec(-4.0f32..4.0, 8),
            c in 0.1f32..10.0,
        ) {
            prop_assume!(row.iter().map(|v| v * v).sum::<f32>() > 1e-2);
            let g = Tensor::full(&[8], 1.0);
            let a = rms_norm(&Tensor::from_vec(row.clone()), &g, 1e-12).unwrap();
            let scaled: Vec<f32> = row.iter().map(|v| v * c).collect();
            let b = rms_norm(&Tensor::from_vec(scaled), &g, 1e-12).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }

        #[test]
        fn rope_preserves_pair_norms(
            row in prop::collection::vec(-3.0f32..3.0, 8),
            pos in 0usize..4096,
        ) {
            let mut out = row.clone();
            rope_rotate_row(&mut out, pos, 10000.0);
            for (a, b) in row.chunks(2).zip(out.chunks(2)) {
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                prop_assert!((na - nb).abs() < 1e-5);
            }
        }

        #[test]
        fn argmax_shift_invariant(
            row in prop::collection::vec(-10.0f32..10.0, 1..30),
            shift in -100.0f32..100.0,
        ) {
            // Shifting by a constant can merge near-ties through rounding; only
            // check rows whose winner is separated by more than the rounding slack.
            let best = argmax_slice(&row).unwrap();
            let margin = row.iter().enumerate()
                .filter(|(i, _)| *i != best)
                .map(|(_, v)| row[best] - v)
                .fold(f32::INFINITY, f32::min);
            prop_assume!(margin > 1e-3);
            let shifted: Vec<f32> = row.iter().map(|v| v + shift).collect();
            prop_assert_eq!(argmax_slice(&shifted).unwrap(), best);
        }
    }
}
