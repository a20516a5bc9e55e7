use crate::real::Real;
use crate::types::{check_finite, DecayParams, KernelError, KvSequence, WkvGradients};

/// Which tokens each output position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directionality {
    /// Every token attends to every token (the Bi-WKV operator).
    Bidirectional,
    /// Tokens attend to themselves and earlier tokens only (original RWKV
    /// attention; used as a receptive-field baseline).
    Causal,
}

/// Ablation switches for the recurrent route.
#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    pub direction: Directionality,
    /// Divide the decay exponent by `T` so total growth over the sequence is
    /// bounded by `e^|w|`. Disabling this reverts to an absolute positional
    /// bias whose exponential can exceed the floating-point range.
    pub bounded_decay: bool,
    /// Carry running sums as mantissas with a per-channel max exponent.
    /// Disabling accumulates raw exponentials.
    pub safe_exp: bool,
    /// Negates the future-sweep decay. Produces wrong answers for `T >= 3`;
    /// exists so verification tooling can prove it would catch a bug.
    pub self_test_bug: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            direction: Directionality::Bidirectional,
            bounded_decay: true,
            safe_exp: true,
            self_test_bug: false,
        }
    }
}

/// Everything the backward pass needs: the inputs plus the per-token output
/// `y` and log-denominator (both recomputable, kept to avoid a third sweep).
#[derive(Debug, Clone)]
pub struct SavedContext<F> {
    tokens: usize,
    channels: usize,
    k: Vec<F>,
    v: Vec<F>,
    w: Vec<F>,
    u: Vec<F>,
    y: Vec<F>,
    log_den: Vec<F>,
    options: KernelOptions,
}

impl<F> SavedContext<F> {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

#[derive(Debug, Clone)]
pub struct WkvOutput<F> {
    /// `T x C` attention result, row-major.
    pub wkv: Vec<F>,
    pub ctx: SavedContext<F>,
}

/// Linear-time recurrent forward with the default safe configuration.
///
/// Matches [`crate::biwkv_oracle`] up to floating-point reassociation and
/// runs in `O(TC)`.
pub fn biwkv_forward<F: Real>(
    seq: &KvSequence<F>,
    params: &DecayParams<F>,
) -> Result<WkvOutput<F>, KernelError> {
    wkv_forward_with(seq, params, KernelOptions::default())
}

/// Recurrent forward with explicit options (ablations, causal window).
pub fn wkv_forward_with<F: Real>(
    seq: &KvSequence<F>,
    params: &DecayParams<F>,
    options: KernelOptions,
) -> Result<WkvOutput<F>, KernelError> {
    let c_len = seq.channels();
    if params.channels() != c_len {
        return Err(KernelError::ShapeMismatch {
            what: "decay params",
            got: params.channels(),
            expected: c_len,
        });
    }
    let out = if options.safe_exp {
        forward_safe(seq, params, options)?
    } else {
        forward_naive(seq, params, options)?
    };
    Ok(out)
}

fn decay_step<F: Real>(w: &[F], t_len: usize, options: KernelOptions) -> Vec<F> {
    let scale = if options.bounded_decay {
        F::of(1.0 / t_len as f64)
    } else {
        F::one()
    };
    w.iter().map(|&wc| wc * scale).collect()
}

fn forward_safe<F: Real>(
    seq: &KvSequence<F>,
    params: &DecayParams<F>,
    options: KernelOptions,
) -> Result<WkvOutput<F>, KernelError> {
    let (t_len, c_len) = (seq.tokens(), seq.channels());
    let (k, v) = (seq.k(), seq.v());
    let step = decay_step(params.w(), t_len, options);
    let n = t_len * c_len;

    // Future-state cache: for each (t, c) the sum over tokens in (t, T) as a
    // mantissa pair with shared exponent. Swept from the end so every update
    // only decays and adds; all factors are <= 1 by the running max.
    let mut fut_num = vec![F::zero(); n];
    let mut fut_den = vec![F::zero(); n];
    let mut fut_exp = vec![F::neg_infinity(); n];
    if options.direction == Directionality::Bidirectional {
        let mut num = vec![F::zero(); c_len];
        let mut den = vec![F::zero(); c_len];
        let mut exp = vec![F::neg_infinity(); c_len];
        for t in (0..t_len).rev() {
            for c in 0..c_len {
                let idx = t * c_len + c;
                fut_num[idx] = num[c];
                fut_den[idx] = den[c];
                fut_exp[idx] = exp[c];
                let s = if options.self_test_bug {
                    -step[c]
                } else {
                    step[c]
                };
                let q = F::max(exp[c] - s, k[idx]);
                let e_old = (exp[c] - s - q).exp();
                let e_new = (k[idx] - q).exp();
                num[c] = e_old * num[c] + e_new * v[idx];
                den[c] = e_old * den[c] + e_new;
                exp[c] = q;
                if !num[c].is_finite() || !den[c].is_finite() {
                    return Err(KernelError::NumericalOverflow {
                        token: t,
                        channel: c,
                        stage: "future state",
                    });
                }
            }
        }
    }

    let mut wkv = vec![F::zero(); n];
    let mut log_den = vec![F::zero(); n];
    let mut num = vec![F::zero(); c_len];
    let mut den = vec![F::zero(); c_len];
    let mut exp = vec![F::neg_infinity(); c_len];
    for t in 0..t_len {
        for c in 0..c_len {
            let idx = t * c_len + c;
            let self_exp = params.u()[c] + k[idx];
            // Align past, future and self terms to the largest exponent;
            // the shared factor cancels in the ratio.
            let m = F::max(F::max(exp[c], fut_exp[idx]), self_exp);
            let e_past = (exp[c] - m).exp();
            let e_fut = (fut_exp[idx] - m).exp();
            let e_self = (self_exp - m).exp();
            let numerator = num[c] * e_past + fut_num[idx] * e_fut + e_self * v[idx];
            let denominator = den[c] * e_past + fut_den[idx] * e_fut + e_self;
            if denominator <= F::zero() {
                return Err(KernelError::DegenerateDenominator {
                    token: t,
                    channel: c,
                });
            }
            let y = numerator / denominator;
            if !y.is_finite() {
                return Err(KernelError::NumericalOverflow {
                    token: t,
                    channel: c,
                    stage: "output",
                });
            }
            wkv[idx] = y;
            log_den[idx] = m + denominator.ln();

            let q = F::max(exp[c] - step[c], k[idx]);
            let e_old = (exp[c] - step[c] - q).exp();
            let e_new = (k[idx] - q).exp();
            num[c] = e_old * num[c] + e_new * v[idx];
            den[c] = e_old * den[c] + e_new;
            exp[c] = q;
            if !num[c].is_finite() || !den[c].is_finite() {
                return Err(KernelError::NumericalOverflow {
                    token: t,
                    channel: c,
                    stage: "past state",
                });
            }
        }
    }

    let ctx = SavedContext {
        tokens: t_len,
        channels: c_len,
        k: k.to_vec(),
        v: v.to_vec(),
        w: params.w().to_vec(),
        u: params.u().to_vec(),
        y: wkv.clone(),
        log_den,
        options,
    };
    Ok(WkvOutput { wkv, ctx })
}

fn forward_naive<F: Real>(
    seq: &KvSequence<F>,
    params: &DecayParams<F>,
    options: KernelOptions,
) -> Result<WkvOutput<F>, KernelError> {
    let (t_len, c_len) = (seq.tokens(), seq.channels());
    let (k, v) = (seq.k(), seq.v());
    let step = decay_step(params.w(), t_len, options);
    let n = t_len * c_len;

    let mut fut_num = vec![F::zero(); n];
    let mut fut_den = vec![F::zero(); n];
    if options.direction == Directionality::Bidirectional {
        let mut num = vec![F::zero(); c_len];
        let mut den = vec![F::zero(); c_len];
        for t in (0..t_len).rev() {
            for c in 0..c_len {
                let idx = t * c_len + c;
                fut_num[idx] = num[c];
                fut_den[idx] = den[c];
                let s = if options.self_test_bug {
                    -step[c]
                } else {
                    step[c]
                };
                let decay = (-s).exp();
                let weight = k[idx].exp();
                num[c] = decay * num[c] + weight * v[idx];
                den[c] = decay * den[c] + weight;
                if !num[c].is_finite() || !den[c].is_finite() {
                    return Err(KernelError::NumericalOverflow {
                        token: t,
                        channel: c,
                        stage: "future state",
                    });
                }
            }
        }
    }

    let mut wkv = vec![F::zero(); n];
    let mut log_den = vec![F::zero(); n];
    let mut num = vec![F::zero(); c_len];
    let mut den = vec![F::zero(); c_len];
    for t in 0..t_len {
        for c in 0..c_len {
            let idx = t * c_len + c;
            let self_weight = (params.u()[c] + k[idx]).exp();
            let numerator = num[c] + fut_num[idx] + self_weight * v[idx];
            let denominator = den[c] + fut_den[idx] + self_weight;
            if denominator == F::zero() {
                return Err(KernelError::DegenerateDenominator {
                    token: t,
                    channel: c,
                });
            }
            let y = numerator / denominator;
            if !y.is_finite() {
                return Err(KernelError::NumericalOverflow {
                    token: t,
                    channel: c,
                    stage: "output",
                });
            }
            wkv[idx] = y;
            log_den[idx] = denominator.ln();

            let decay = (-step[c]).exp();
            let weight = k[idx].exp();
            num[c] = decay * num[c] + weight * v[idx];
            den[c] = decay * den[c] + weight;
            if !num[c].is_finite() || !den[c].is_finite() {
                return Err(KernelError::NumericalOverflow {
                    token: t,
                    channel: c,
                    stage: "past state",
                });
            }
        }
    }

    let ctx = SavedContext {
        tokens: t_len,
        channels: c_len,
        k: k.to_vec(),
        v: v.to_vec(),
        w: params.w().to_vec(),
        u: params.u().to_vec(),
        y: wkv.clone(),
        log_den,
        options,
    };
    Ok(WkvOutput { wkv, ctx })
}

/// Linear-time recurrent backward.
///
/// Re-derives the gradient recurrences from the summation form: one sweep
/// from the start carries the past-state pair, its `w`-derivative and the
/// gradient mass arriving from earlier outputs; one sweep from the end
/// carries the mirrored future-side states. All accumulators use the same
/// mantissa/max-exponent representation as the forward pass, and every
/// emission factor is provably `<= 1` because each output's denominator
/// contains the very term being emitted.
pub fn biwkv_backward<F: Real>(
    ctx: &SavedContext<F>,
    gy: &[F],
) -> Result<WkvGradients<F>, KernelError> {
    let (t_len, c_len) = (ctx.tokens, ctx.channels);
    let n = t_len * c_len;
    if gy.len() != n {
        return Err(KernelError::ShapeMismatch {
            what: "gy",
            got: gy.len(),
            expected: n,
        });
    }
    check_finite("gy", gy)?;
    debug_assert_eq!(ctx.y.len(), n, "context missing stored outputs");

    let (k, v, y, ld) = (&ctx.k, &ctx.v, &ctx.y, &ctx.log_den);
    let u = &ctx.u;
    let step = decay_step(&ctx.w, t_len, ctx.options);
    let scale = if ctx.options.bounded_decay {
        F::of(1.0 / t_len as f64)
    } else {
        F::one()
    };
    let bidirectional = ctx.options.direction == Directionality::Bidirectional;

    let mut gw = vec![F::zero(); c_len];
    let mut gu = vec![F::zero(); c_len];
    let mut gk = vec![F::zero(); n];
    let mut gv = vec![F::zero(); n];

    // Sweep from the start: past states (num/den/exp), their w-derivatives
    // (sharing the exponent), and gradient mass from earlier outputs.
    {
        let mut num = vec![F::zero(); c_len];
        let mut den = vec![F::zero(); c_len];
        let mut exp = vec![F::neg_infinity(); c_len];
        let mut dnum = vec![F::zero(); c_len];
        let mut dden = vec![F::zero(); c_len];
        let mut g_plain = vec![F::zero(); c_len];
        let mut g_y = vec![F::zero(); c_len];
        let mut g_exp = vec![F::neg_infinity(); c_len];
        for t in 0..t_len {
            for c in 0..c_len {
                let idx = t * c_len + c;
                // d(wkv_t)/dw through the past states; exp(exp - ld) <= 1
                // since the denominator majorizes the past sum.
                let f = (exp[c] - ld[idx]).exp();
                gw[c] += gy[idx] * f * (dnum[c] - y[idx] * dden[c]);
                // Self term: shared by gu, gk, gv.
                let e_self = (u[c] + k[idx] - ld[idx]).exp();
                let self_grad = gy[idx] * e_self;
                gu[c] += self_grad * (v[idx] - y[idx]);
                gv[idx] += self_grad;
                gk[idx] += self_grad * (v[idx] - y[idx]);
                if bidirectional {
                    // Gradient from outputs before t that attend forward.
                    let fb = (k[idx] + g_exp[c]).exp();
                    gv[idx] += fb * g_plain[c];
                    gk[idx] += fb * (v[idx] * g_plain[c] - g_y[c]);
                    let q = F::max(g_exp[c] - step[c], -ld[idx]);
                    let e_old = (g_exp[c] - step[c] - q).exp();
                    let e_new = (-ld[idx] - q).exp();
                    g_plain[c] = e_old * g_plain[c] + e_new * gy[idx];
                    g_y[c] = e_old * g_y[c] + e_new * gy[idx] * y[idx];
                    g_exp[c] = q;
                }
                // Absorb token t. Derivative update uses the pre-absorption
                // state; the newly added term has zero distance and thus no
                // w-dependence yet.
                let q = F::max(exp[c] - step[c], k[idx]);
                let e_old = (exp[c] - step[c] - q).exp();
                let e_new = (k[idx] - q).exp();
                dnum[c] = e_old * (dnum[c] - scale * num[c]);
                dden[c] = e_old * (dden[c] - scale * den[c]);
                num[c] = e_old * num[c] + e_new * v[idx];
                den[c] = e_old * den[c] + e_new;
                exp[c] = q;
            }
        }
    }

    // Sweep from the end: future states with derivatives (bidirectional
    // only) and gradient mass from later outputs (both windows).
    {
        let mut num = vec![F::zero(); c_len];
        let mut den = vec![F::zero(); c_len];
        let mut exp = vec![F::neg_infinity(); c_len];
        let mut dnum = vec![F::zero(); c_len];
        let mut dden = vec![F::zero(); c_len];
        let mut g_plain = vec![F::zero(); c_len];
        let mut g_y = vec![F::zero(); c_len];
        let mut g_exp = vec![F::neg_infinity(); c_len];
        for t in (0..t_len).rev() {
            for c in 0..c_len {
                let idx = t * c_len + c;
                if bidirectional {
                    let f = (exp[c] - ld[idx]).exp();
                    gw[c] += gy[idx] * f * (dnum[c] - y[idx] * dden[c]);
                }
                let fa = (k[idx] + g_exp[c]).exp();
                gv[idx] += fa * g_plain[c];
                gk[idx] += fa * (v[idx] * g_plain[c] - g_y[c]);
                let q = F::max(g_exp[c] - step[c], -ld[idx]);
                let e_old = (g_exp[c] - step[c] - q).exp();
                let e_new = (-ld[idx] - q).exp();
                g_plain[c] = e_old * g_plain[c] + e_new * gy[idx];
                g_y[c] = e_old * g_y[c] + e_new * gy[idx] * y[idx];
                g_exp[c] = q;
                if bidirectional {
                    let q = F::max(exp[c] - step[c], k[idx]);
                    let e_old = (exp[c] - step[c] - q).exp();
                    let e_new = (k[idx] - q).exp();
                    dnum[c] = e_old * (dnum[c] - scale * num[c]);
                    dden[c] = e_old * (dden[c] - scale * den[c]);
                    num[c] = e_old * num[c] + e_new * v[idx];
                    den[c] = e_old * den[c] + e_new;
                    exp[c] = q;
                }
            }
        }
    }

    for (which, data) in [("gw", &gw), ("gu", &gu), ("gk", &gk), ("gv", &gv)] {
        if let Err(KernelError::NonFinite { index, .. }) = check_finite(which, data) {
            let (token, channel) = if data.len() == c_len {
                (0, index)
            } else {
                (index / c_len, index % c_len)
            };
            return Err(KernelError::NumericalOverflow {
                token,
                channel,
                stage: "backward state",
            });
        }
    }

    Ok(WkvGradients { gw, gu, gk, gv })
}
