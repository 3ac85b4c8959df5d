//! Property tests for the numeric invariants that hold for all inputs.

use proptest::prelude::*;

use metavib::autodiff::{Tape, Tensor};
use metavib::distributions::{kl_divergence, DiagGaussian};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// logsumexp stays within [max, max + ln n] for any finite logits.
    #[test]
    fn logsumexp_bounds(xs in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        let mut tape = Tape::new();
        let n = xs.len();
        let t = Tensor::new(vec![n], xs.clone()).unwrap();
        let v = tape.logsumexp(&t).unwrap().item();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= max - 1e-9);
        prop_assert!(v <= max + (n as f64).ln() + 1e-9);
    }

    /// KL divergence is non-negative for arbitrary diagonal Gaussians and
    /// zero exactly when the parameters coincide.
    #[test]
    fn kl_nonnegative(
        mu_p in prop::collection::vec(-3f64..3.0, 1..8),
        spread in prop::collection::vec((-2f64..2.0, -2f64..2.0, -2f64..2.0), 1..8),
    ) {
        let d = mu_p.len().min(spread.len());
        let mu_p = &mu_p[..d];
        let lv_p: Vec<f64> = spread[..d].iter().map(|s| s.0).collect();
        let mu_q: Vec<f64> = spread[..d].iter().map(|s| s.1).collect();
        let lv_q: Vec<f64> = spread[..d].iter().map(|s| s.2).collect();
        let mut tape = Tape::new();
        let p = DiagGaussian::from_vecs(&mut tape, mu_p.to_vec(), lv_p.clone()).unwrap();
        let q = DiagGaussian::from_vecs(&mut tape, mu_q.clone(), lv_q.clone()).unwrap();
        let kl = kl_divergence(&mut tape, &p, &q).unwrap().item();
        prop_assert!(kl >= 0.0);
        let self_kl = kl_divergence(&mut tape, &p, &p).unwrap().item();
        prop_assert!(self_kl.abs() < 1e-12);
    }

    /// Broadcast binary ops agree with a naive per-element reference.
    #[test]
    fn broadcast_matches_reference(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = metavib::rng::SeedStream::new(seed);
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..cols).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mut tape = Tape::new();
        let at = Tensor::new(vec![rows, cols], a.clone()).unwrap();
        let bt = Tensor::new(vec![cols], b.clone()).unwrap();
        let sum = tape.add(&at, &bt).unwrap();
        let prod = tape.mul(&at, &bt).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(sum.data()[r * cols + c], a[r * cols + c] + b[c]);
                prop_assert_eq!(prod.data()[r * cols + c], a[r * cols + c] * b[c]);
            }
        }
    }

    /// Reparameterized samples are finite for any clamped parameters.
    #[test]
    fn samples_are_finite(
        mu in prop::collection::vec(-50f64..50.0, 1..16),
        lv in prop::collection::vec(-50f64..50.0, 1..16),
        seed in 0u64..1000,
    ) {
        let d = mu.len().min(lv.len());
        let mut tape = Tape::new();
        let dist =
            DiagGaussian::from_vecs(&mut tape, mu[..d].to_vec(), lv[..d].to_vec()).unwrap();
        let mut rng = metavib::rng::SeedStream::new(seed);
        let s = dist.sample_one(&mut tape, &mut rng).unwrap();
        prop_assert!(s.all_finite());
    }
}
