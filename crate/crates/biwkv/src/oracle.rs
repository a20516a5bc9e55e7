use crate::recurrent::Directionality;
use crate::types::{DecayParams, KernelError, KvSequence};

/// Direct double-summation evaluation of the Bi-WKV operator in `f64`.
///
/// `O(T^2 C)`. Each output position subtracts the largest exponent before
/// exponentiating, so the ratio is exact for a single token and stable for
/// extreme decay values. This is the reference the recurrent route is
/// verified against.
pub fn biwkv_oracle(
    seq: &KvSequence<f64>,
    params: &DecayParams<f64>,
) -> Result<Vec<f64>, KernelError> {
    wkv_oracle_with(seq, params, Directionality::Bidirectional)
}

/// Summation oracle with a selectable attention window (the causal window is
/// the original RWKV attention, kept for receptive-field comparisons).
pub fn wkv_oracle_with(
    seq: &KvSequence<f64>,
    params: &DecayParams<f64>,
    direction: Directionality,
) -> Result<Vec<f64>, KernelError> {
    let (t_len, c_len) = (seq.tokens(), seq.channels());
    if params.channels() != c_len {
        return Err(KernelError::ShapeMismatch {
            what: "decay params",
            got: params.channels(),
            expected: c_len,
        });
    }
    let (k, v) = (seq.k(), seq.v());
    let inv_t = 1.0 / t_len as f64;
    let mut out = vec![0.0; t_len * c_len];
    for c in 0..c_len {
        let (w, u) = (params.w()[c], params.u()[c]);
        for t in 0..t_len {
            let hi = match direction {
                Directionality::Bidirectional => t_len,
                Directionality::Causal => t + 1,
            };
            // Largest exponent over the window, subtracted below.
            let mut m = f64::NEG_INFINITY;
            for i in 0..hi {
                let e = if i == t {
                    u + k[i * c_len + c]
                } else {
                    -((t.abs_diff(i) - 1) as f64) * inv_t * w + k[i * c_len + c]
                };
                m = m.max(e);
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..hi {
                let e = if i == t {
                    u + k[i * c_len + c]
                } else {
                    -((t.abs_diff(i) - 1) as f64) * inv_t * w + k[i * c_len + c]
                };
                let weight = (e - m).exp();
                num += weight * v[i * c_len + c];
                den += weight;
            }
            if den == 0.0 {
                return Err(KernelError::DegenerateDenominator {
                    token: t,
                    channel: c,
                });
            }
            out[t * c_len + c] = num / den;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, c: usize, k: Vec<f64>, v: Vec<f64>) -> KvSequence<f64> {
        KvSequence::new(t, c, k, v).unwrap()
    }

    #[test]
    fn single_token_returns_value_exactly() {
        let s = seq(1, 3, vec![0.7, -1.3, 4.0], vec![2.5, -0.125, 1e-3]);
        let p = DecayParams::new(vec![3.0, -2.0, 0.5], vec![1.0, 0.0, -4.0]).unwrap();
        let out = biwkv_oracle(&s, &p).unwrap();
        assert_eq!(out, vec![2.5, -0.125, 1e-3]);
    }

    #[test]
    fn zero_decay_zero_keys_is_uniform_average() {
        let s = seq(3, 1, vec![0.0; 3], vec![1.0, 2.0, 3.0]);
        let p = DecayParams::new(vec![0.0], vec![0.0]).unwrap();
        let out = biwkv_oracle(&s, &p).unwrap();
        for t in 0..3 {
            assert!((out[t] - 2.0).abs() < 1e-15, "t={t}: {}", out[t]);
        }
    }

    #[test]
    fn strong_decay_golden_values() {
        // T=3, C=1, w=30, u=0, K=0, V=[1,2,3]. With w/T = 10 the off-by-one
        // distance bias gives wkv_0 = (2 + 3e^-10 + 1) / (1 + e^-10 + 1).
        // Frozen from an independent scalar evaluation of the summation form.
        let s = seq(3, 1, vec![0.0; 3], vec![1.0, 2.0, 3.0]);
        let p = DecayParams::new(vec![30.0], vec![0.0]).unwrap();
        let out = biwkv_oracle(&s, &p).unwrap();
        let golden = [1.5000340491744069, 2.0, 2.4999659508255934];
        for t in 0..3 {
            assert!(
                (out[t] - golden[t]).abs() < 1e-15,
                "t={t}: {} vs {}",
                out[t],
                golden[t]
            );
        }
    }

    #[test]
    fn causal_window_ignores_future_tokens() {
        let s = seq(
            3,
            1,
            vec![0.3, -0.2, 0.9],
            vec![5.0, -1.0, 2.0],
        );
        let p = DecayParams::new(vec![1.2], vec![0.4]).unwrap();
        let out = wkv_oracle_with(&s, &p, Directionality::Causal).unwrap();
        // First token sees only itself.
        assert_eq!(out[0], 5.0);
        // Changing the last token's inputs must not move earlier outputs.
        let s2 = seq(3, 1, vec![0.3, -0.2, -3.0], vec![5.0, -1.0, 40.0]);
        let out2 = wkv_oracle_with(&s2, &p, Directionality::Causal).unwrap();
        assert_eq!(out[0], out2[0]);
        assert_eq!(out[1], out2[1]);
    }

    #[test]
    fn rejects_non_finite_input() {
        let err = KvSequence::new(2, 1, vec![0.0, f64::NAN], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, KernelError::NonFinite { which: "K", .. }));
    }
}
