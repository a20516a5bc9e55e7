//! The recurrent forward must agree with the summation oracle, and both must
//! satisfy the algebraic properties of a positive-weight average.

use biwkv::{
    biwkv_forward, biwkv_oracle, wkv_forward_with, wkv_oracle_with, DecayParams, Directionality,
    KernelOptions, KvSequence,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(
    t: usize,
    c: usize,
    seed: u64,
) -> (KvSequence<f64>, DecayParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    let k = draw(t * c);
    let v = draw(t * c);
    let w = draw(c);
    let u = draw(c);
    (
        KvSequence::new(t, c, k, v).unwrap(),
        DecayParams::new(w, u).unwrap(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn forward_matches_oracle_seed_fixed() {
    let (seq, params) = random_instance(8, 4, 7);
    let out = biwkv_forward(&seq, &params).unwrap();
    let reference = biwkv_oracle(&seq, &params).unwrap();
    assert!(max_abs_diff(&out.wkv, &reference) < 1e-10);
}

#[test]
fn forward_matches_oracle_across_sizes() {
    for &t in &[1usize, 2, 3, 5, 8, 16, 33, 64] {
        for &c in &[1usize, 3, 16] {
            for seed in 0..4 {
                let (seq, params) = random_instance(t, c, seed + 1000 * t as u64 + c as u64);
                let out = biwkv_forward(&seq, &params).unwrap();
                let reference = biwkv_oracle(&seq, &params).unwrap();
                let d = max_abs_diff(&out.wkv, &reference);
                assert!(d < 1e-10, "T={t} C={c} seed={seed}: {d}");
            }
        }
    }
}

#[test]
fn causal_forward_matches_causal_oracle() {
    let options = KernelOptions {
        direction: Directionality::Causal,
        ..KernelOptions::default()
    };
    for &t in &[1usize, 2, 3, 9, 32] {
        let (seq, params) = random_instance(t, 5, 17 + t as u64);
        let out = wkv_forward_with(&seq, &params, options).unwrap();
        let reference = wkv_oracle_with(&seq, &params, Directionality::Causal).unwrap();
        assert!(max_abs_diff(&out.wkv, &reference) < 1e-10);
    }
}

#[test]
fn single_token_difference_is_exactly_zero() {
    for seed in 0..10 {
        let (seq, params) = random_instance(1, 6, seed);
        let out = biwkv_forward(&seq, &params).unwrap();
        let reference = biwkv_oracle(&seq, &params).unwrap();
        assert_eq!(out.wkv, reference);
        assert_eq!(out.wkv, seq.v());
    }
}

#[test]
fn zero_decay_output_is_key_weighted_average_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, c) = (7, 3);
    let k: Vec<f64> = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let seq = KvSequence::new(t, c, k.clone(), v.clone()).unwrap();
    let params = DecayParams::new(vec![0.0; c], vec![0.0; c]).unwrap();
    let out = biwkv_forward(&seq, &params).unwrap();
    for ch in 0..c {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..t {
            let e = k[i * c + ch].exp();
            num += e * v[i * c + ch];
            den += e;
        }
        let expected = num / den;
        for tok in 0..t {
            let got = out.wkv[tok * c + ch];
            assert!((got - expected).abs() < 1e-12, "row {tok}: {got} vs {expected}");
        }
    }
}

#[test]
fn self_test_bug_is_caught_by_oracle_comparison() {
    let (seq, params) = random_instance(3, 2, 5);
    let buggy = wkv_forward_with(
        &seq,
        &params,
        KernelOptions {
            self_test_bug: true,
            ..KernelOptions::default()
        },
    )
    .unwrap();
    let reference = biwkv_oracle(&seq, &params).unwrap();
    assert!(max_abs_diff(&buggy.wkv, &reference) > 1e-6);
}

#[test]
fn bonus_dominance_pins_output_to_own_value() {
    let (t, c) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k: Vec<f64> = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let seq = KvSequence::new(t, c, k, v.clone()).unwrap();
    let params = DecayParams::new(w, vec![40.0; c]).unwrap();
    let out = biwkv_forward(&seq, &params).unwrap();
    for i in 0..t * c {
        assert!((out.wkv[i] - v[i]).abs() < 1e-8);
    }
}

#[test]
fn large_t_stays_finite_in_both_precisions() {
    let (t, c) = (65_536usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w: Vec<f64> = (0..c)
        .map(|i| -5.0 + 10.0 * i as f64 / (c - 1) as f64)
        .collect();
    let k: Vec<f64> = (0..t * c)
        .map(|_| {
            // Box-Muller standard normal.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let v: Vec<f64> = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();

    let seq64 = KvSequence::new(t, c, k.clone(), v.clone()).unwrap();
    let params64 = DecayParams::new(w.clone(), vec![0.5; c]).unwrap();
    let out64 = biwkv_forward(&seq64, &params64).unwrap();
    assert!(out64.wkv.iter().all(|x| x.is_finite()));

    let k32: Vec<f32> = k.iter().map(|&x| x as f32).collect();
    let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let seq32 = KvSequence::new(t, c, k32, v32).unwrap();
    let params32 = DecayParams::new(
        w.iter().map(|&x| x as f32).collect(),
        vec![0.5f32; c],
    )
    .unwrap();
    let out32 = biwkv_forward(&seq32, &params32).unwrap();
    assert!(out32.wkv.iter().all(|x| x.is_finite()));
}

#[test]
fn unbounded_naive_accumulation_overflows_in_f32() {
    let (t, c) = (4096usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k: Vec<f32> = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f32> = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let seq = KvSequence::new(t, c, k, v).unwrap();
    let params = DecayParams::new(vec![-5.0f32, 5.0], vec![0.0; 2]).unwrap();
    let err = wkv_forward_with(
        &seq,
        &params,
        KernelOptions {
            bounded_decay: false,
            safe_exp: false,
            ..KernelOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, biwkv::KernelError::NumericalOverflow { .. }));
}

fn grid_strategy() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=24, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Recurrent route and oracle agree for arbitrary sizes and seeds.
    #[test]
    fn prop_oracle_equivalence((t, c, seed) in grid_strategy()) {
        let (seq, params) = random_instance(t, c, seed);
        let out = biwkv_forward(&seq, &params).unwrap();
        let reference = biwkv_oracle(&seq, &params).unwrap();
        prop_assert!(max_abs_diff(&out.wkv, &reference) < 1e-10);
    }

    // The output is a positive-weight average of the values.
    #[test]
    fn prop_convexity_bound((t, c, seed) in grid_strategy()) {
        let (seq, params) = random_instance(t, c, seed);
        let out = biwkv_forward(&seq, &params).unwrap();
        for ch in 0..c {
            let column = |data: &[f64]| -> Vec<f64> {
                (0..t).map(|tok| data[tok * c + ch]).collect()
            };
            let vals = column(seq.v());
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            for &x in &column(&out.wkv) {
                prop_assert!(x >= lo - slack && x <= hi + slack);
            }
        }
    }

    // The denominator does not depend on V, so the map V -> wkv is linear.
    #[test]
    fn prop_linearity_in_values((t, c, seed) in grid_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ce);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let k = draw(t * c);
        let v1 = draw(t * c);
        let v2 = draw(t * c);
        let w = draw(c);
        let u = draw(c);
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let params = DecayParams::new(w, u).unwrap();
        let combo: Vec<f64> = v1
            .iter()
            .zip(&v2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let out1 = biwkv_forward(&KvSequence::new(t, c, k.clone(), v1).unwrap(), &params).unwrap();
        let out2 = biwkv_forward(&KvSequence::new(t, c, k.clone(), v2).unwrap(), &params).unwrap();
        let out = biwkv_forward(&KvSequence::new(t, c, k, combo).unwrap(), &params).unwrap();
        for i in 0..t * c {
            let expected = alpha * out1.wkv[i] + beta * out2.wkv[i];
            prop_assert!((out.wkv[i] - expected).abs() < 1e-12);
        }
    }

    // |t - i| is symmetric, so reversing the token order commutes.
    #[test]
    fn prop_reversal_equivariance((t, c, seed) in grid_strategy()) {
        let (seq, params) = random_instance(t, c, seed);
        let reverse = |data: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; t * c];
            for tok in 0..t {
                out[(t - 1 - tok) * c..(t - tok) * c]
                    .copy_from_slice(&data[tok * c..(tok + 1) * c]);
            }
            out
        };
        let rev_seq = KvSequence::new(t, c, reverse(seq.k()), reverse(seq.v())).unwrap();
        let fwd = biwkv_forward(&seq, &params).unwrap();
        let rev = biwkv_forward(&rev_seq, &params).unwrap();
        for i in 0..t * c {
            prop_assert!((reverse(&fwd.wkv)[i] - rev.wkv[i]).abs() < 1e-12);
        }
    }

    // Channels never interact: slicing one out gives the identical answer.
    #[test]
    fn prop_channel_independence((t, c, seed) in grid_strategy()) {
        let (seq, params) = random_instance(t, c, seed);
        let full = biwkv_forward(&seq, &params).unwrap();
        for ch in 0..c {
            let take = |data: &[f64]| -> Vec<f64> {
                (0..t).map(|tok| data[tok * c + ch]).collect()
            };
            let solo_seq = KvSequence::new(t, 1, take(seq.k()), take(seq.v())).unwrap();
            let solo_params =
                DecayParams::new(vec![params.w()[ch]], vec![params.u()[ch]]).unwrap();
            let solo = biwkv_forward(&solo_seq, &solo_params).unwrap();
            for tok in 0..t {
                prop_assert_eq!(solo.wkv[tok], full.wkv[tok * c + ch]);
            }
        }
    }
}
