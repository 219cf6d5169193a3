//! Dense linear algebra and numerical helpers shared by the rest of the crate.
//!
//! Everything here is `f64`. Matrices are row-major; the random source is a seeded ChaCha8
//! stream so every result in the crate is a pure function of its seeds.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{householder_qr, orthonormal_basis};
pub use matrix::{cosine, dot, norm, normalize_rows, normalize_rows_backward, normalized, squared_distance, Matrix};
pub use rng::Rng;

/// `log Σ exp(x_i)` computed with a max shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Temperature-scaled softmax, stabilized by subtracting the maximum logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "softmax temperature must be positive");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Temperature-scaled log-softmax.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "softmax temperature must be positive");
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|x| x - lse).collect()
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Largest relative disagreement between an analytic gradient and central differences:
/// `max_i |a_i − c_i| / max(1, |a_i|, |c_i|)`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    worst
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0);
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let p = softmax(&[1000.0, 0.0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn softmax_tempered_against_exact_evaluation() {
        // logits/τ = [2,4,6]; p_i = e^{2i}/(e^2+e^4+e^6) = 1/(1 + e^{2} + e^{4}) · {1, e², e⁴}.
        // Reference values evaluated at 50 digits and rounded to f64.
        let want = [0.015876239976466765, 0.11731042782619837, 0.8668133321973349];
        let p = softmax(&[1.0, 2.0, 3.0], 0.5);
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let err = grad_check(f, &[1.0, 2.0], &[2.0, 4.0], 1e-5);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_constant() {
        let err = grad_check(|_| 3.5, &[0.3, -1.0, 2.0], &[0.0; 3], 1e-5);
        assert!(err <= 1e-10);
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            temp in 0.05f64..5.0,
        ) {
            let a = softmax(&logits, temp);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted, temp);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(a.iter().all(|&x| x > 0.0 || logits.len() > 1));
        }

        #[test]
        fn qr_reconstruction(seed in 0u64..500, m in 1usize..12, extra in 0usize..6) {
            let rows = m + extra;
            let mut rng = Rng::new(seed);
            let a = Matrix::from_vec(rows, m, rng.gaussian_vec(rows * m)).unwrap();
            let (q, r) = householder_qr(&a).unwrap();
            prop_assert!(q.matmul(&r).unwrap().max_abs_diff(&a).unwrap() <= 1e-9);
        }
    }
}
