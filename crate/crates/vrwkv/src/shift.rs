//! Token-shift operators applied before the R/K/V projections.
//!
//! Each mode replaces part of every token's channels with features of a
//! neighboring token (zero-padded at the border) and interpolates with the
//! original token under per-channel weights `mu`:
//!
//! * `quad`  — quarter-channel slices from the four axis-aligned neighbors
//! * `causal` — all channels from the previous token in raster order
//! * `bidirectional` — half-channel slices from the left/right neighbors
//!   (the masked-image variant: the vertical shift is removed)
//! * `none` — identity

use serde::{Deserialize, Serialize};
use thiserror::Error;

use biwkv::Real;

use crate::tensor::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    Quad,
    Causal,
    Bidirectional,
    None,
}

impl std::str::FromStr for ShiftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quad" => Ok(Self::Quad),
            "causal" => Ok(Self::Causal),
            "bidirectional" => Ok(Self::Bidirectional),
            "none" => Ok(Self::None),
            other => Err(format!("unknown shift mode `{other}`")),
        }
    }
}

impl ShiftMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Quad => "quad",
            Self::Causal => "causal",
            Self::Bidirectional => "bidirectional",
            Self::None => "none",
        }
    }
}

/// Which of the three projection branches the shift feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftTarget {
    R,
    K,
    V,
}

#[derive(Debug, Clone)]
pub struct ShiftParams<F> {
    pub mode: ShiftMode,
    pub mu_r: Vec<F>,
    pub mu_k: Vec<F>,
    pub mu_v: Vec<F>,
}

impl<F: Real> ShiftParams<F> {
    pub fn mu(&self, which: ShiftTarget) -> &[F] {
        match which {
            ShiftTarget::R => &self.mu_r,
            ShiftTarget::K => &self.mu_k,
            ShiftTarget::V => &self.mu_v,
        }
    }
}

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error("channel count {channels} not divisible by {quarters} for this shift mode")]
    ChannelSplit { channels: usize, quarters: usize },
    #[error("mu has length {got}, expected {expected}")]
    MuLength { got: usize, expected: usize },
    #[error("gradient shape does not match input shape")]
    ShapeMismatch,
}

/// Source token for channel `c` of token `(h, w)`, or `None` for zero padding.
#[inline]
fn neighbor(
    mode: ShiftMode,
    h: usize,
    w: usize,
    c: usize,
    rows: usize,
    cols: usize,
    channels: usize,
) -> Option<(usize, usize)> {
    match mode {
        ShiftMode::Quad => {
            let quarter = c / (channels / 4);
            match quarter {
                0 => h.checked_sub(1).map(|hh| (hh, w)),
                1 => (h + 1 < rows).then_some((h + 1, w)),
                2 => w.checked_sub(1).map(|ww| (h, ww)),
                _ => (w + 1 < cols).then_some((h, w + 1)),
            }
        }
        ShiftMode::Causal => {
            // Previous token in raster order, crossing row boundaries.
            let t = h * cols + w;
            t.checked_sub(1).map(|p| (p / cols, p % cols))
        }
        ShiftMode::Bidirectional => {
            if c < channels / 2 {
                w.checked_sub(1).map(|ww| (h, ww))
            } else {
                (w + 1 < cols).then_some((h, w + 1))
            }
        }
        ShiftMode::None => unreachable!("identity mode has no neighbor map"),
    }
}

fn check_channels(mode: ShiftMode, channels: usize) -> Result<(), ShiftError> {
    let div = match mode {
        ShiftMode::Quad => 4,
        ShiftMode::Bidirectional => 2,
        _ => 1,
    };
    if channels % div != 0 || channels == 0 {
        return Err(ShiftError::ChannelSplit {
            channels,
            quarters: div,
        });
    }
    Ok(())
}

#[inline]
fn clamp01<F: Real>(x: F) -> F {
    x.max(F::zero()).min(F::one())
}

fn apply_shift<F: Real>(
    x: &TokenGrid<F>,
    mode: ShiftMode,
    mu: &[F],
    literal_eq9: bool,
) -> Result<TokenGrid<F>, ShiftError> {
    check_channels(mode, x.channels)?;
    if mu.len() != x.channels {
        return Err(ShiftError::MuLength {
            got: mu.len(),
            expected: x.channels,
        });
    }
    if mode == ShiftMode::None {
        return Ok(x.clone());
    }
    let mut out = TokenGrid::zeros(x.batch, x.rows, x.cols, x.channels);
    for b in 0..x.batch {
        for h in 0..x.rows {
            for w in 0..x.cols {
                for c in 0..x.channels {
                    let m = clamp01(mu[c]);
                    let own = x.at(b, h, w, c);
                    let shifted = neighbor(mode, h, w, c, x.rows, x.cols, x.channels)
                        .map(|(sh, sw)| x.at(b, sh, sw, c))
                        .unwrap_or_else(F::zero);
                    let id_coef = if literal_eq9 { F::one() } else { m };
                    out.data[out.idx(b, h, w, c)] =
                        id_coef * own + (F::one() - m) * shifted;
                }
            }
        }
    }
    Ok(out)
}

/// Quad-directional shift with convex interpolation `mu*X + (1-mu)*X_shift`
/// (or the literal `X + (1-mu)*X_shift` form when `literal_eq9` is set).
pub fn q_shift<F: Real>(
    x: &TokenGrid<F>,
    mu: &[F],
    literal_eq9: bool,
) -> Result<TokenGrid<F>, ShiftError> {
    apply_shift(x, ShiftMode::Quad, mu, literal_eq9)
}

/// Apply the configured shift mode for one projection branch.
pub fn shift_dispatch<F: Real>(
    x: &TokenGrid<F>,
    params: &ShiftParams<F>,
    which: ShiftTarget,
    literal_eq9: bool,
) -> Result<TokenGrid<F>, ShiftError> {
    apply_shift(x, params.mode, params.mu(which), literal_eq9)
}

/// Adjoint of [`shift_dispatch`]: routes each neighbor-slice gradient back to
/// its source token and accumulates the interpolation-weight gradient.
pub fn shift_backward<F: Real>(
    g_out: &TokenGrid<F>,
    x: &TokenGrid<F>,
    params: &ShiftParams<F>,
    which: ShiftTarget,
    literal_eq9: bool,
) -> Result<(TokenGrid<F>, Vec<F>), ShiftError> {
    if !g_out.same_shape(x) {
        return Err(ShiftError::ShapeMismatch);
    }
    let mode = params.mode;
    check_channels(mode, x.channels)?;
    let mu = params.mu(which);
    if mu.len() != x.channels {
        return Err(ShiftError::MuLength {
            got: mu.len(),
            expected: x.channels,
        });
    }
    if mode == ShiftMode::None {
        return Ok((g_out.clone(), vec![F::zero(); x.channels]));
    }
    let mut gx = TokenGrid::zeros(x.batch, x.rows, x.cols, x.channels);
    let mut gmu = vec![F::zero(); x.channels];
    for b in 0..x.batch {
        for h in 0..x.rows {
            for w in 0..x.cols {
                for c in 0..x.channels {
                    let g = g_out.at(b, h, w, c);
                    if g == F::zero() {
                        continue;
                    }
                    let m = clamp01(mu[c]);
                    let id_coef = if literal_eq9 { F::one() } else { m };
                    gx.data[gx.idx(b, h, w, c)] += id_coef * g;
                    let src = neighbor(mode, h, w, c, x.rows, x.cols, x.channels);
                    let shifted = src
                        .map(|(sh, sw)| x.at(b, sh, sw, c))
                        .unwrap_or_else(F::zero);
                    if let Some((sh, sw)) = src {
                        gx.data[gx.idx(b, sh, sw, c)] += (F::one() - m) * g;
                    }
                    // Gradient w.r.t. the raw mu; zero outside the clamp range.
                    if mu[c] >= F::zero() && mu[c] <= F::one() {
                        let own = x.at(b, h, w, c);
                        gmu[c] += if literal_eq9 {
                            -g * shifted
                        } else {
                            g * (own - shifted)
                        };
                    }
                }
            }
        }
    }
    Ok((gx, gmu))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, channels: usize) -> TokenGrid<f64> {
        let n = rows * cols * channels;
        TokenGrid::from_vec(
            1,
            rows,
            cols,
            channels,
            (0..n).map(|i| (i as f64) * 0.1 - 2.0).collect(),
        )
    }

    #[test]
    fn mu_one_is_identity() {
        let x = grid(3, 3, 8);
        let out = q_shift(&x, &vec![1.0; 8], false).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn mu_zero_interior_token_copies_neighbors() {
        let x = grid(3, 3, 8);
        let out = q_shift(&x, &vec![0.0; 8], false).unwrap();
        let (h, w) = (1, 1);
        for c in 0..2 {
            assert_eq!(out.at(0, h, w, c), x.at(0, h - 1, w, c)); // from above
        }
        for c in 2..4 {
            assert_eq!(out.at(0, h, w, c), x.at(0, h + 1, w, c)); // from below
        }
        for c in 4..6 {
            assert_eq!(out.at(0, h, w, c), x.at(0, h, w - 1, c)); // from left
        }
        for c in 6..8 {
            assert_eq!(out.at(0, h, w, c), x.at(0, h, w + 1, c)); // from right
        }
    }

    #[test]
    fn mu_zero_corner_token_is_zero_padded() {
        let x = grid(3, 3, 8);
        let out = q_shift(&x, &vec![0.0; 8], false).unwrap();
        for c in 0..2 {
            assert_eq!(out.at(0, 0, 0, c), 0.0); // no row above
        }
        for c in 4..6 {
            assert_eq!(out.at(0, 0, 0, c), 0.0); // no column left
        }
        for c in 2..4 {
            assert_eq!(out.at(0, 0, 0, c), x.at(0, 1, 0, c));
        }
        for c in 6..8 {
            assert_eq!(out.at(0, 0, 0, c), x.at(0, 0, 1, c));
        }
    }

    #[test]
    fn causal_mode_shifts_raster_order() {
        let x = grid(2, 3, 4);
        let params = ShiftParams {
            mode: ShiftMode::Causal,
            mu_r: vec![0.0; 4],
            mu_k: vec![0.0; 4],
            mu_v: vec![0.0; 4],
        };
        let out = shift_dispatch(&x, &params, ShiftTarget::K, false).unwrap();
        // t = 0 is zero; every later token reads t - 1, including across rows.
        for c in 0..4 {
            assert_eq!(out.at(0, 0, 0, c), 0.0);
            assert_eq!(out.at(0, 1, 0, c), x.at(0, 0, 2, c));
            assert_eq!(out.at(0, 0, 2, c), x.at(0, 0, 1, c));
        }
    }

    #[test]
    fn bidirectional_mode_splits_channels_left_right() {
        let x = grid(2, 3, 4);
        let params = ShiftParams {
            mode: ShiftMode::Bidirectional,
            mu_r: vec![0.0; 4],
            mu_k: vec![0.0; 4],
            mu_v: vec![0.0; 4],
        };
        let out = shift_dispatch(&x, &params, ShiftTarget::R, false).unwrap();
        for c in 0..2 {
            assert_eq!(out.at(0, 1, 1, c), x.at(0, 1, 0, c));
            assert_eq!(out.at(0, 1, 0, c), 0.0);
        }
        for c in 2..4 {
            assert_eq!(out.at(0, 1, 1, c), x.at(0, 1, 2, c));
            assert_eq!(out.at(0, 1, 2, c), 0.0);
        }
    }

    #[test]
    fn none_mode_is_exact_identity() {
        let x = grid(2, 2, 4);
        let params = ShiftParams {
            mode: ShiftMode::None,
            mu_r: vec![0.3; 4],
            mu_k: vec![0.3; 4],
            mu_v: vec![0.3; 4],
        };
        let out = shift_dispatch(&x, &params, ShiftTarget::V, false).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn rejects_channels_not_divisible_by_four() {
        let x = grid(2, 2, 6);
        assert!(matches!(
            q_shift(&x, &vec![0.5; 6], false),
            Err(ShiftError::ChannelSplit { .. })
        ));
    }

    #[test]
    fn quad_touches_only_axis_neighbors() {
        // A single nonzero token spreads to (h, w) and its four neighbors only.
        let mut x = TokenGrid::zeros(1, 5, 5, 4);
        for c in 0..4 {
            x.data[x.idx(0, 2, 2, c)] = 1.0;
        }
        let out = q_shift(&x, &vec![0.5; 4], false).unwrap();
        for h in 0..5 {
            for w in 0..5 {
                let touched = (h, w) == (2, 2)
                    || (h as i32 - 2).abs() + (w as i32 - 2).abs() == 1;
                let any = (0..4).any(|c| out.at(0, h, w, c) != 0.0);
                assert_eq!(any, touched, "({h},{w})");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (rows, cols, channels) = (4, 4, 8);
        let n = rows * cols * channels;
        let x = TokenGrid::from_vec(
            1,
            rows,
            cols,
            channels,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let g_out = TokenGrid::from_vec(
            1,
            rows,
            cols,
            channels,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mu: Vec<f64> = (0..channels).map(|_| rng.random_range(0.1..0.9)).collect();
        for mode in [ShiftMode::Quad, ShiftMode::Causal, ShiftMode::Bidirectional] {
            for literal in [false, true] {
                let params = ShiftParams {
                    mode,
                    mu_r: mu.clone(),
                    mu_k: mu.clone(),
                    mu_v: mu.clone(),
                };
                let (gx, gmu) =
                    shift_backward(&g_out, &x, &params, ShiftTarget::R, literal).unwrap();
                let loss = |x: &TokenGrid<f64>, mu: &[f64]| -> f64 {
                    let p = ShiftParams {
                        mode,
                        mu_r: mu.to_vec(),
                        mu_k: mu.to_vec(),
                        mu_v: mu.to_vec(),
                    };
                    let out = shift_dispatch(x, &p, ShiftTarget::R, literal).unwrap();
                    out.data.iter().zip(&g_out.data).map(|(a, b)| a * b).sum()
                };
                let eps = 1e-6;
                for i in (0..n).step_by(7) {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.data[i] += eps;
                    xm.data[i] -= eps;
                    let num = (loss(&xp, &mu) - loss(&xm, &mu)) / (2.0 * eps);
                    let rel = (gx.data[i] - num).abs()
                        / gx.data[i].abs().max(num.abs()).max(1e-8);
                    assert!(rel < 1e-8, "{mode:?} literal={literal} gx[{i}]");
                }
                for c in 0..channels {
                    let mut mp = mu.clone();
                    let mut mm = mu.clone();
                    mp[c] += eps;
                    mm[c] -= eps;
                    let num = (loss(&x, &mp) - loss(&x, &mm)) / (2.0 * eps);
                    let rel = (gmu[c] - num).abs() / gmu[c].abs().max(num.abs()).max(1e-8);
                    assert!(rel < 1e-8, "{mode:?} literal={literal} gmu[{c}]");
                }
            }
        }
    }

    #[test]
    fn linearity_and_mass_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (rows, cols, channels) = (3, 5, 4);
        let n = rows * cols * channels;
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            TokenGrid::from_vec(
                1,
                rows,
                cols,
                channels,
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        };
        let x1 = draw(&mut rng);
        let x2 = draw(&mut rng);
        let mu: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let (alpha, beta) = (1.7, -0.6);
        let combo = x1.zip_map(&x2, |a, b| alpha * a + beta * b);
        let s1 = q_shift(&x1, &mu, false).unwrap();
        let s2 = q_shift(&x2, &mu, false).unwrap();
        let sc = q_shift(&combo, &mu, false).unwrap();
        let max_abs = x1.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for i in 0..n {
            assert!((sc.data[i] - (alpha * s1.data[i] + beta * s2.data[i])).abs() < 1e-12);
            assert!(s1.data[i].abs() <= max_abs + 1e-12);
        }
    }
}
