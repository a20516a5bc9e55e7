use crate::types::KernelError;

/// Analytic forward cost of the recurrent route: `13 * T * C`.
///
/// The constant folds the four state updates, the exponentials and the final
/// ratio into one per-token figure. It is a reporting convention rather than
/// a measured instruction count.
pub fn flops_estimate(t: u64, c: u64) -> Result<u64, KernelError> {
    13u64
        .checked_mul(t)
        .and_then(|x| x.checked_mul(c))
        .ok_or(KernelError::FlopsOverflow { t, c })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_known_counts() {
        assert_eq!(flops_estimate(1, 1).unwrap(), 13);
        assert_eq!(flops_estimate(196, 192).unwrap(), 489_216);
        // 2048 x 2048 input at patch size 16 -> 16384 tokens, 192 channels.
        assert_eq!(flops_estimate(16_384, 192).unwrap(), 40_894_464);
    }

    #[test]
    fn detects_overflow() {
        assert!(matches!(
            flops_estimate(u64::MAX / 2, 3),
            Err(KernelError::FlopsOverflow { .. })
        ));
    }
}
