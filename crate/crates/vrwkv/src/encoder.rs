//! Forward and hand-derived backward passes of the encoder.
//!
//! Every layer saves exactly what its adjoint needs; cheap intermediates
//! (shifted inputs, elementwise products) are recomputed instead of stored.

use biwkv::{
    biwkv_backward, wkv_forward_with, DecayParams, Directionality, KernelOptions, KvSequence,
    Real, SavedContext,
};

use crate::layers::{
    layer_norm, layer_norm_backward, sigmoid, sigmoid_backward, squared_relu,
    squared_relu_backward, LnCache,
};
use crate::model::{
    AttentionKind, BlockParams, ChannelMixParams, ImageBatch, ModelConfig, ModelError,
    ModelParams, SpatialMixParams,
};
use crate::shift::{shift_backward, shift_dispatch, ShiftTarget};
use crate::tensor::{Mat, TokenGrid};

fn kernel_options(config: &ModelConfig) -> KernelOptions {
    KernelOptions {
        direction: match config.attention {
            AttentionKind::BiWkv => Directionality::Bidirectional,
            AttentionKind::Causal => Directionality::Causal,
        },
        ..KernelOptions::default()
    }
}

// ---------------------------------------------------------------------------
// Patch embedding
// ---------------------------------------------------------------------------

/// Gather `p x p x ic` pixel patches into rows of a `(B * T) x patch_dim`
/// matrix; within a patch the order is row, column, channel.
fn extract_patches<F: Real>(images: &ImageBatch<F>, p: usize) -> Mat<F> {
    let (gh, gw) = (images.rows / p, images.cols / p);
    let ic = images.channels;
    let pdim = p * p * ic;
    let mut out = Mat::zeros(images.batch * gh * gw, pdim);
    let mut row = 0;
    for b in 0..images.batch {
        for ph in 0..gh {
            for pw in 0..gw {
                let dst = &mut out.data[row * pdim..(row + 1) * pdim];
                let mut j = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..ic {
                            dst[j] = images.at(b, ph * p + dy, pw * p + dx, c);
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Adjoint of [`extract_patches`].
fn fold_patches<F: Real>(
    g_patches: &Mat<F>,
    batch: usize,
    gh: usize,
    gw: usize,
    p: usize,
    ic: usize,
) -> ImageBatch<F> {
    let mut out = TokenGrid::zeros(batch, gh * p, gw * p, ic);
    let pdim = p * p * ic;
    let mut row = 0;
    for b in 0..batch {
        for ph in 0..gh {
            for pw in 0..gw {
                let src = &g_patches.data[row * pdim..(row + 1) * pdim];
                let mut j = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..ic {
                            let idx = out.idx(b, ph * p + dy, pw * p + dx, c);
                            out.data[idx] += src[j];
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn src_coord(i: usize, target: usize, source: usize) -> f64 {
    if target == 1 {
        (source - 1) as f64 / 2.0
    } else {
        i as f64 * (source - 1) as f64 / (target - 1) as f64
    }
}

/// Bilinear resize of the position table from its native square grid to an
/// arbitrary grid (endpoints aligned).
fn resize_pos_bilinear<F: Real>(
    pos: &Mat<F>,
    base: usize,
    th: usize,
    tw: usize,
) -> Mat<F> {
    let c = pos.cols;
    let mut out = Mat::zeros(th * tw, c);
    for y in 0..th {
        let sy = src_coord(y, th, base);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(base - 1);
        let fy = F::of(sy - y0 as f64);
        for x in 0..tw {
            let sx = src_coord(x, tw, base);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(base - 1);
            let fx = F::of(sx - x0 as f64);
            let t = y * tw + x;
            for ch in 0..c {
                let p00 = pos.at(y0 * base + x0, ch);
                let p01 = pos.at(y0 * base + x1, ch);
                let p10 = pos.at(y1 * base + x0, ch);
                let p11 = pos.at(y1 * base + x1, ch);
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                *out.at_mut(t, ch) = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_pos_bilinear`]: scatter with the same weights.
fn resize_pos_bilinear_adjoint<F: Real>(
    g: &Mat<F>,
    base: usize,
    th: usize,
    tw: usize,
) -> Mat<F> {
    let c = g.cols;
    let mut out = Mat::zeros(base * base, c);
    for y in 0..th {
        let sy = src_coord(y, th, base);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(base - 1);
        let fy = F::of(sy - y0 as f64);
        for x in 0..tw {
            let sx = src_coord(x, tw, base);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(base - 1);
            let fx = F::of(sx - x0 as f64);
            let t = y * tw + x;
            let one = F::one();
            for ch in 0..c {
                let gv = g.at(t, ch);
                *out.at_mut(y0 * base + x0, ch) += gv * (one - fy) * (one - fx);
                *out.at_mut(y0 * base + x1, ch) += gv * (one - fy) * fx;
                *out.at_mut(y1 * base + x0, ch) += gv * fy * (one - fx);
                *out.at_mut(y1 * base + x1, ch) += gv * fy * fx;
            }
        }
    }
    out
}

fn check_image<F: Real>(
    images: &ImageBatch<F>,
    config: &ModelConfig,
) -> Result<(usize, usize), ModelError> {
    if images.channels != config.image_channels {
        return Err(ModelError::ImageChannels {
            got: images.channels,
            expected: config.image_channels,
        });
    }
    let p = config.patch_size;
    if images.rows == 0 || images.cols == 0 || images.rows % p != 0 || images.cols % p != 0 {
        return Err(ModelError::ImageShape {
            got_h: images.rows,
            got_w: images.cols,
            patch: p,
        });
    }
    Ok((images.rows / p, images.cols / p))
}

/// Patch projection plus position embedding; accepts any resolution whose
/// sides are divisible by the patch size.
pub fn patch_embed<F: Real>(
    images: &ImageBatch<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<TokenGrid<F>, ModelError> {
    let (tokens, _) = patch_embed_impl(images, params, config)?;
    Ok(tokens)
}

fn patch_embed_impl<F: Real>(
    images: &ImageBatch<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<(TokenGrid<F>, Mat<F>), ModelError> {
    let (gh, gw) = check_image(images, config)?;
    let patches = extract_patches(images, config.patch_size);
    let projected = patches.matmul(&params.patch_weight);
    let c = config.embed_dim;
    let base = config.base_grid();
    let pos = if (gh, gw) == (base, base) {
        params.pos.clone()
    } else {
        resize_pos_bilinear(&params.pos, base, gh, gw)
    };
    let mut tokens = TokenGrid::from_vec(images.batch, gh, gw, c, projected.data);
    let t = gh * gw;
    for b in 0..images.batch {
        let item = tokens.item_mut(b);
        for tok in 0..t {
            for ch in 0..c {
                item[tok * c + ch] += params.patch_bias[ch] + pos.at(tok, ch);
            }
        }
    }
    Ok((tokens, patches))
}

// ---------------------------------------------------------------------------
// Spatial mix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpatialTrace<F> {
    x_normed: TokenGrid<F>,
    sigma_r: TokenGrid<F>,
    wkv: TokenGrid<F>,
    ctxs: Vec<SavedContext<F>>,
    post_ln: Option<LnCache<F>>,
    out: TokenGrid<F>,
}

fn spatial_mix_traced<F: Real>(
    x_normed: &TokenGrid<F>,
    sp: &SpatialMixParams<F>,
    config: &ModelConfig,
) -> Result<(TokenGrid<F>, SpatialTrace<F>), ModelError> {
    let literal = config.shift_literal_eq9;
    let r_in = shift_dispatch(x_normed, &sp.shift, ShiftTarget::R, literal)?;
    let k_in = shift_dispatch(x_normed, &sp.shift, ShiftTarget::K, literal)?;
    let v_in = shift_dispatch(x_normed, &sp.shift, ShiftTarget::V, literal)?;
    let r_s = r_in.project(&sp.w_r);
    let k_s = k_in.project(&sp.w_k);
    let v_s = v_in.project(&sp.w_v);

    let c = x_normed.channels;
    let t = x_normed.tokens();
    let decay = DecayParams::new(sp.decay.clone(), sp.bonus.clone())?;
    let options = kernel_options(config);
    let mut wkv = TokenGrid::zeros(x_normed.batch, x_normed.rows, x_normed.cols, c);
    let mut ctxs = Vec::with_capacity(x_normed.batch);
    for b in 0..x_normed.batch {
        let seq = KvSequence::new(t, c, k_s.item(b).to_vec(), v_s.item(b).to_vec())?;
        let out = wkv_forward_with(&seq, &decay, options)?;
        wkv.item_mut(b).copy_from_slice(&out.wkv);
        ctxs.push(out.ctx);
    }

    let sigma_r = sigmoid(&r_s);
    let gated = sigma_r.zip_map(&wkv, |s, w| s * w);
    let projected = gated.project(&sp.w_o);
    let (out, post_ln) = match &sp.ln_post {
        Some(lp) => {
            let (o, cache) = layer_norm(&projected, lp);
            (o, Some(cache))
        }
        None => (projected, None),
    };
    let trace = SpatialTrace {
        x_normed: x_normed.clone(),
        sigma_r,
        wkv,
        ctxs,
        post_ln,
        out: out.clone(),
    };
    Ok((out, trace))
}

/// Attention-role submodule: shift, R/K/V projections, per-channel WKV,
/// sigmoid gate, output projection (and post-projection norm when enabled).
/// The input is expected to be already layer-normalized by the caller.
pub fn spatial_mix<F: Real>(
    x_normed: &TokenGrid<F>,
    sp: &SpatialMixParams<F>,
    config: &ModelConfig,
) -> Result<TokenGrid<F>, ModelError> {
    spatial_mix_traced(x_normed, sp, config).map(|(out, _)| out)
}

struct SpatialGrads<F> {
    g_x_normed: TokenGrid<F>,
    mu_r: Vec<F>,
    mu_k: Vec<F>,
    mu_v: Vec<F>,
    w_r: Mat<F>,
    w_k: Mat<F>,
    w_v: Mat<F>,
    w_o: Mat<F>,
    decay: Vec<F>,
    bonus: Vec<F>,
    ln_post: Option<(Vec<F>, Vec<F>)>,
}

fn spatial_mix_backward<F: Real>(
    g_out: &TokenGrid<F>,
    sp: &SpatialMixParams<F>,
    trace: &SpatialTrace<F>,
    config: &ModelConfig,
) -> Result<SpatialGrads<F>, ModelError> {
    let literal = config.shift_literal_eq9;
    let (g_proj, ln_post) = match (&sp.ln_post, &trace.post_ln) {
        (Some(lp), Some(cache)) => {
            let (g, gw, gb) = layer_norm_backward(g_out, lp, cache);
            (g, Some((gw, gb)))
        }
        _ => (g_out.clone(), None),
    };
    let gated = trace.sigma_r.zip_map(&trace.wkv, |s, w| s * w);
    let g_w_o = gated.outer_ta(&g_proj);
    let g_gated = g_proj.project_tb(&sp.w_o);
    let g_sigma = g_gated.zip_map(&trace.wkv, |g, w| g * w);
    let g_wkv = g_gated.zip_map(&trace.sigma_r, |g, s| g * s);
    let g_r = sigmoid_backward(&g_sigma, &trace.sigma_r);

    let c = trace.x_normed.channels;
    let mut g_k = TokenGrid::zeros(g_r.batch, g_r.rows, g_r.cols, c);
    let mut g_v = TokenGrid::zeros(g_r.batch, g_r.rows, g_r.cols, c);
    let mut g_decay = vec![F::zero(); c];
    let mut g_bonus = vec![F::zero(); c];
    for b in 0..g_r.batch {
        let grads = biwkv_backward(&trace.ctxs[b], g_wkv.item(b))?;
        g_k.item_mut(b).copy_from_slice(&grads.gk);
        g_v.item_mut(b).copy_from_slice(&grads.gv);
        for ch in 0..c {
            g_decay[ch] += grads.gw[ch];
            g_bonus[ch] += grads.gu[ch];
        }
    }

    // Shifted inputs are cheap; recompute them for the projection adjoints.
    let r_in = shift_dispatch(&trace.x_normed, &sp.shift, ShiftTarget::R, literal)?;
    let k_in = shift_dispatch(&trace.x_normed, &sp.shift, ShiftTarget::K, literal)?;
    let v_in = shift_dispatch(&trace.x_normed, &sp.shift, ShiftTarget::V, literal)?;
    let g_w_r = r_in.outer_ta(&g_r);
    let g_w_k = k_in.outer_ta(&g_k);
    let g_w_v = v_in.outer_ta(&g_v);
    let g_r_in = g_r.project_tb(&sp.w_r);
    let g_k_in = g_k.project_tb(&sp.w_k);
    let g_v_in = g_v.project_tb(&sp.w_v);
    let (gx_r, mu_r) =
        shift_backward(&g_r_in, &trace.x_normed, &sp.shift, ShiftTarget::R, literal)?;
    let (gx_k, mu_k) =
        shift_backward(&g_k_in, &trace.x_normed, &sp.shift, ShiftTarget::K, literal)?;
    let (gx_v, mu_v) =
        shift_backward(&g_v_in, &trace.x_normed, &sp.shift, ShiftTarget::V, literal)?;
    let g_x_normed = gx_r.add(&gx_k).add(&gx_v);

    Ok(SpatialGrads {
        g_x_normed,
        mu_r,
        mu_k,
        mu_v,
        w_r: g_w_r,
        w_k: g_w_k,
        w_v: g_w_v,
        w_o: g_w_o,
        decay: g_decay,
        bonus: g_bonus,
        ln_post,
    })
}

// ---------------------------------------------------------------------------
// Channel mix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChannelTrace<F> {
    x_normed: TokenGrid<F>,
    relu: TokenGrid<F>,
    sigma_r: TokenGrid<F>,
    post_ln: Option<LnCache<F>>,
    value: TokenGrid<F>,
    out: TokenGrid<F>,
}

fn channel_mix_traced<F: Real>(
    x_normed: &TokenGrid<F>,
    cp: &ChannelMixParams<F>,
    config: &ModelConfig,
) -> Result<(TokenGrid<F>, ChannelTrace<F>), ModelError> {
    let literal = config.shift_literal_eq9;
    let r_in = shift_dispatch(x_normed, &cp.shift, ShiftTarget::R, literal)?;
    let k_in = shift_dispatch(x_normed, &cp.shift, ShiftTarget::K, literal)?;
    let r_c = r_in.project(&cp.w_r);
    let k_c = k_in.project(&cp.w_k);
    let (squared, relu) = squared_relu(&k_c);
    let v_c = squared.project(&cp.w_v);
    let (value, post_ln) = match &cp.ln_post {
        Some(lp) => {
            let (v, cache) = layer_norm(&v_c, lp);
            (v, Some(cache))
        }
        None => (v_c, None),
    };
    let sigma_r = sigmoid(&r_c);
    let out = sigma_r.zip_map(&value, |s, v| s * v);
    let trace = ChannelTrace {
        x_normed: x_normed.clone(),
        relu,
        sigma_r,
        post_ln,
        value,
        out: out.clone(),
    };
    Ok((out, trace))
}

/// Feed-forward-role submodule: shift, key projection to the hidden width,
/// squared ReLU, value projection back to `C` (with optional norm), gated by
/// the sigmoid of the receptance projection.
pub fn channel_mix<F: Real>(
    x_normed: &TokenGrid<F>,
    cp: &ChannelMixParams<F>,
    config: &ModelConfig,
) -> Result<TokenGrid<F>, ModelError> {
    channel_mix_traced(x_normed, cp, config).map(|(out, _)| out)
}

struct ChannelGrads<F> {
    g_x_normed: TokenGrid<F>,
    mu_r: Vec<F>,
    mu_k: Vec<F>,
    w_r: Mat<F>,
    w_k: Mat<F>,
    w_v: Mat<F>,
    ln_post: Option<(Vec<F>, Vec<F>)>,
}

fn channel_mix_backward<F: Real>(
    g_out: &TokenGrid<F>,
    cp: &ChannelMixParams<F>,
    trace: &ChannelTrace<F>,
    config: &ModelConfig,
) -> Result<ChannelGrads<F>, ModelError> {
    let literal = config.shift_literal_eq9;
    let g_sigma = g_out.zip_map(&trace.value, |g, v| g * v);
    let g_value = g_out.zip_map(&trace.sigma_r, |g, s| g * s);
    let g_r = sigmoid_backward(&g_sigma, &trace.sigma_r);
    let (g_v_c, ln_post) = match (&cp.ln_post, &trace.post_ln) {
        (Some(lp), Some(cache)) => {
            let (g, gw, gb) = layer_norm_backward(&g_value, lp, cache);
            (g, Some((gw, gb)))
        }
        _ => (g_value, None),
    };
    let squared = trace.relu.map(|r| r * r);
    let g_w_v = squared.outer_ta(&g_v_c);
    let g_squared = g_v_c.project_tb(&cp.w_v);
    let g_k_c = squared_relu_backward(&g_squared, &trace.relu);

    let r_in = shift_dispatch(&trace.x_normed, &cp.shift, ShiftTarget::R, literal)?;
    let k_in = shift_dispatch(&trace.x_normed, &cp.shift, ShiftTarget::K, literal)?;
    let g_w_r = r_in.outer_ta(&g_r);
    let g_w_k = k_in.outer_ta(&g_k_c);
    let g_r_in = g_r.project_tb(&cp.w_r);
    let g_k_in = g_k_c.project_tb(&cp.w_k);
    let (gx_r, mu_r) =
        shift_backward(&g_r_in, &trace.x_normed, &cp.shift, ShiftTarget::R, literal)?;
    let (gx_k, mu_k) =
        shift_backward(&g_k_in, &trace.x_normed, &cp.shift, ShiftTarget::K, literal)?;
    let g_x_normed = gx_r.add(&gx_k);

    Ok(ChannelGrads {
        g_x_normed,
        mu_r,
        mu_k,
        w_r: g_w_r,
        w_k: g_w_k,
        w_v: g_w_v,
        ln_post,
    })
}

// ---------------------------------------------------------------------------
// Encoder blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockTrace<F> {
    ln_s: LnCache<F>,
    spatial: SpatialTrace<F>,
    ln_c: LnCache<F>,
    channel: ChannelTrace<F>,
}

fn block_forward_traced<F: Real>(
    x: &TokenGrid<F>,
    bp: &BlockParams<F>,
    config: &ModelConfig,
) -> Result<(TokenGrid<F>, BlockTrace<F>), ModelError> {
    let (xn_s, ln_s) = layer_norm(x, &bp.spatial.ln);
    let (s_out, s_trace) = spatial_mix_traced(&xn_s, &bp.spatial, config)?;
    let x_mid = x.add(&s_out.scale_channels(&bp.spatial.gamma));
    let (xn_c, ln_c) = layer_norm(&x_mid, &bp.channel.ln);
    let (c_out, c_trace) = channel_mix_traced(&xn_c, &bp.channel, config)?;
    let x_out = x_mid.add(&c_out.scale_channels(&bp.channel.gamma));
    Ok((
        x_out,
        BlockTrace {
            ln_s,
            spatial: s_trace,
            ln_c,
            channel: c_trace,
        },
    ))
}

/// One full encoder layer: pre-norm residual spatial mix followed by
/// pre-norm residual channel mix, both scaled by their layer-scale vectors.
pub fn encoder_layer<F: Real>(
    x: &TokenGrid<F>,
    bp: &BlockParams<F>,
    config: &ModelConfig,
) -> Result<TokenGrid<F>, ModelError> {
    block_forward_traced(x, bp, config).map(|(out, _)| out)
}

fn block_backward<F: Real>(
    g_out: &TokenGrid<F>,
    bp: &BlockParams<F>,
    trace: &BlockTrace<F>,
    config: &ModelConfig,
    grads: &mut BlockParams<F>,
) -> Result<TokenGrid<F>, ModelError> {
    // Channel half: x_out = x_mid + gamma_c . cmix(LN(x_mid)).
    let g_c_out = g_out.scale_channels(&bp.channel.gamma);
    let g_gamma_c = g_out.channel_dot(&trace.channel.out);
    let cg = channel_mix_backward(&g_c_out, &bp.channel, &trace.channel, config)?;
    let (g_from_ln_c, g_ln_c_w, g_ln_c_b) =
        layer_norm_backward(&cg.g_x_normed, &bp.channel.ln, &trace.ln_c);
    let g_mid = g_out.add(&g_from_ln_c);

    // Spatial half: x_mid = x_in + gamma_s . smix(LN(x_in)).
    let g_s_out = g_mid.scale_channels(&bp.spatial.gamma);
    let g_gamma_s = g_mid.channel_dot(&trace.spatial.out);
    let sg = spatial_mix_backward(&g_s_out, &bp.spatial, &trace.spatial, config)?;
    let (g_from_ln_s, g_ln_s_w, g_ln_s_b) =
        layer_norm_backward(&sg.g_x_normed, &bp.spatial.ln, &trace.ln_s);
    let g_in = g_mid.add(&g_from_ln_s);

    // Accumulate.
    let acc = |dst: &mut [F], src: &[F]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    };
    let s = &mut grads.spatial;
    acc(&mut s.ln.weight, &g_ln_s_w);
    acc(&mut s.ln.bias, &g_ln_s_b);
    acc(&mut s.shift.mu_r, &sg.mu_r);
    acc(&mut s.shift.mu_k, &sg.mu_k);
    acc(&mut s.shift.mu_v, &sg.mu_v);
    acc(&mut s.w_r.data, &sg.w_r.data);
    acc(&mut s.w_k.data, &sg.w_k.data);
    acc(&mut s.w_v.data, &sg.w_v.data);
    acc(&mut s.w_o.data, &sg.w_o.data);
    acc(&mut s.decay, &sg.decay);
    acc(&mut s.bonus, &sg.bonus);
    if let (Some(lp), Some((gw, gb))) = (&mut s.ln_post, &sg.ln_post) {
        acc(&mut lp.weight, gw);
        acc(&mut lp.bias, gb);
    }
    acc(&mut s.gamma, &g_gamma_s);
    let ch = &mut grads.channel;
    acc(&mut ch.ln.weight, &g_ln_c_w);
    acc(&mut ch.ln.bias, &g_ln_c_b);
    acc(&mut ch.shift.mu_r, &cg.mu_r);
    acc(&mut ch.shift.mu_k, &cg.mu_k);
    acc(&mut ch.w_r.data, &cg.w_r.data);
    acc(&mut ch.w_k.data, &cg.w_k.data);
    acc(&mut ch.w_v.data, &cg.w_v.data);
    if let (Some(lp), Some((gw, gb))) = (&mut ch.ln_post, &cg.ln_post) {
        acc(&mut lp.weight, gw);
        acc(&mut lp.bias, gb);
    }
    acc(&mut ch.gamma, &g_gamma_c);

    Ok(g_in)
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    batch: usize,
    grid: (usize, usize),
    patches: Mat<F>,
    blocks: Vec<BlockTrace<F>>,
    final_ln: LnCache<F>,
    pooled: Mat<F>,
}

impl<F> ForwardTrace<F> {
    /// Encoder output grid shape (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn forward_impl<F: Real>(
    images: &ImageBatch<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    want_trace: bool,
) -> Result<(Mat<F>, Option<ForwardTrace<F>>), ModelError> {
    config.validate()?;
    let (tokens, patches) = patch_embed_impl(images, params, config)?;
    let grid = (tokens.rows, tokens.cols);
    let mut block_traces = Vec::new();
    let mut x = tokens;
    for bp in &params.blocks {
        let (next, trace) = block_forward_traced(&x, bp, config)?;
        if want_trace {
            block_traces.push(trace);
        }
        x = next;
    }
    let (normed, final_ln) = layer_norm(&x, &params.norm);
    // Mean over tokens, then the linear head.
    let t = normed.tokens();
    let c = normed.channels;
    let inv_t = F::of(1.0 / t as f64);
    let mut pooled = Mat::zeros(normed.batch, c);
    for b in 0..normed.batch {
        let item = normed.item(b);
        let row = &mut pooled.data[b * c..(b + 1) * c];
        for tok in 0..t {
            for ch in 0..c {
                row[ch] += item[tok * c + ch];
            }
        }
        for v in row.iter_mut() {
            *v *= inv_t;
        }
    }
    let mut logits = pooled.matmul(&params.head_weight);
    for b in 0..logits.rows {
        for (v, &bias) in logits.data[b * logits.cols..(b + 1) * logits.cols]
            .iter_mut()
            .zip(&params.head_bias)
        {
            *v += bias;
        }
    }
    let trace = want_trace.then_some(ForwardTrace {
        batch: images.batch,
        grid,
        patches,
        blocks: block_traces,
        final_ln,
        pooled,
    });
    Ok((logits, trace))
}

/// Forward pass without activation saving.
pub fn model_forward<F: Real>(
    images: &ImageBatch<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<Mat<F>, ModelError> {
    forward_impl(images, params, config, false).map(|(logits, _)| logits)
}

/// Forward pass that saves the activations the backward pass needs.
pub fn model_forward_trace<F: Real>(
    images: &ImageBatch<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<(Mat<F>, ForwardTrace<F>), ModelError> {
    forward_impl(images, params, config, true).map(|(logits, trace)| (logits, trace.unwrap()))
}

fn backward_blocks_and_patch<F: Real>(
    g_encoder: &TokenGrid<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    trace: &ForwardTrace<F>,
    grads: &mut ModelParams<F>,
) -> Result<ImageBatch<F>, ModelError> {
    let mut g = g_encoder.clone();
    for l in (0..params.blocks.len()).rev() {
        g = block_backward(
            &g,
            &params.blocks[l],
            &trace.blocks[l],
            config,
            &mut grads.blocks[l],
        )?;
    }
    // Position embedding: gradient summed over the batch, scattered through
    // the bilinear resize when the grid differs from the native one.
    let g_pos_target = g.sum_over_batch();
    let base = config.base_grid();
    let (gh, gw) = trace.grid;
    let g_pos = if (gh, gw) == (base, base) {
        g_pos_target
    } else {
        resize_pos_bilinear_adjoint(&g_pos_target, base, gh, gw)
    };
    for (dst, &src) in grads.pos.data.iter_mut().zip(&g_pos.data) {
        *dst += src;
    }
    for (dst, &src) in grads.patch_bias.iter_mut().zip(&g.channel_sum()) {
        *dst += src;
    }
    let g_tokens_mat = Mat::from_vec(
        trace.batch * gh * gw,
        config.embed_dim,
        g.data.clone(),
    );
    let g_patch_w = trace.patches.matmul_ta(&g_tokens_mat);
    for (dst, &src) in grads.patch_weight.data.iter_mut().zip(&g_patch_w.data) {
        *dst += src;
    }
    let g_patches = g_tokens_mat.matmul_tb(&params.patch_weight);
    Ok(fold_patches(
        &g_patches,
        trace.batch,
        gh,
        gw,
        config.patch_size,
        config.image_channels,
    ))
}

/// Backward from upstream logit gradients. Returns gradients for every
/// learnable tensor (same layout as the parameters) plus the input-image
/// gradient.
pub fn model_backward<F: Real>(
    g_logits: &Mat<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    trace: &ForwardTrace<F>,
) -> Result<(ModelParams<F>, ImageBatch<F>), ModelError> {
    let mut grads = ModelParams::<F>::zeros(config);
    let c = config.embed_dim;
    let (gh, gw) = trace.grid;
    let t = gh * gw;

    let g_pooled = g_logits.matmul_tb(&params.head_weight);
    let g_head_w = trace.pooled.matmul_ta(g_logits);
    grads.head_weight = g_head_w;
    grads.head_bias = g_logits.col_sum();

    // Mean pooling spreads the gradient uniformly over tokens.
    let inv_t = F::of(1.0 / t as f64);
    let mut g_normed = TokenGrid::zeros(trace.batch, gh, gw, c);
    for b in 0..trace.batch {
        let src = &g_pooled.data[b * c..(b + 1) * c];
        let item = g_normed.item_mut(b);
        for tok in 0..t {
            for ch in 0..c {
                item[tok * c + ch] = src[ch] * inv_t;
            }
        }
    }
    let (g_encoder, g_norm_w, g_norm_b) =
        layer_norm_backward(&g_normed, &params.norm, &trace.final_ln);
    grads.norm.weight = g_norm_w;
    grads.norm.bias = g_norm_b;

    let g_images = backward_blocks_and_patch(&g_encoder, params, config, trace, &mut grads)?;
    Ok((grads, g_images))
}

/// Backward from a gradient injected at the encoder output (before the final
/// norm and pooling); used for receptive-field maps.
pub fn model_backward_from_encoder<F: Real>(
    g_encoder: &TokenGrid<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    trace: &ForwardTrace<F>,
) -> Result<(ModelParams<F>, ImageBatch<F>), ModelError> {
    let mut grads = ModelParams::<F>::zeros(config);
    let g_images = backward_blocks_and_patch(g_encoder, params, config, trace, &mut grads)?;
    Ok((grads, g_images))
}
