//! Elementwise and normalization layers with hand-derived adjoints.

use biwkv::Real;

use crate::tensor::TokenGrid;

pub const LN_EPS: f64 = 1e-5;

/// Per-channel affine layer-norm parameters.
#[derive(Debug, Clone)]
pub struct LayerNormParams<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> LayerNormParams<F> {
    pub fn identity(channels: usize) -> Self {
        Self {
            weight: vec![F::one(); channels],
            bias: vec![F::zero(); channels],
        }
    }
}

/// Saved normalization state: `x_hat` and the inverse std-dev per token.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Layer normalization over the channel dimension of every token.
pub fn layer_norm<F: Real>(
    x: &TokenGrid<F>,
    params: &LayerNormParams<F>,
) -> (TokenGrid<F>, LnCache<F>) {
    let c = x.channels;
    assert_eq!(params.weight.len(), c);
    let tokens = x.batch * x.tokens();
    let mut out = TokenGrid::zeros(x.batch, x.rows, x.cols, c);
    let mut normalized = vec![F::zero(); tokens * c];
    let mut inv_std = vec![F::zero(); tokens];
    let eps = F::of(LN_EPS);
    let inv_c = F::of(1.0 / c as f64);
    for t in 0..tokens {
        let row = &x.data[t * c..(t + 1) * c];
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_c;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_c;
        let istd = (var + eps).sqrt().recip();
        inv_std[t] = istd;
        for i in 0..c {
            let xhat = (row[i] - mean) * istd;
            normalized[t * c + i] = xhat;
            out.data[t * c + i] = xhat * params.weight[i] + params.bias[i];
        }
    }
    (out, LnCache { normalized, inv_std })
}

/// Adjoint of [`layer_norm`]; returns `(gx, gweight, gbias)`.
pub fn layer_norm_backward<F: Real>(
    g_out: &TokenGrid<F>,
    params: &LayerNormParams<F>,
    cache: &LnCache<F>,
) -> (TokenGrid<F>, Vec<F>, Vec<F>) {
    let c = g_out.channels;
    let tokens = g_out.batch * g_out.tokens();
    let mut gx = TokenGrid::zeros(g_out.batch, g_out.rows, g_out.cols, c);
    let mut gweight = vec![F::zero(); c];
    let mut gbias = vec![F::zero(); c];
    let inv_c = F::of(1.0 / c as f64);
    for t in 0..tokens {
        let g_row = &g_out.data[t * c..(t + 1) * c];
        let xhat = &cache.normalized[t * c..(t + 1) * c];
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for i in 0..c {
            let gh = g_row[i] * params.weight[i];
            sum_g += gh;
            sum_gx += gh * xhat[i];
            gweight[i] += g_row[i] * xhat[i];
            gbias[i] += g_row[i];
        }
        let istd = cache.inv_std[t];
        for i in 0..c {
            let gh = g_row[i] * params.weight[i];
            gx.data[t * c + i] = (gh - (sum_g + xhat[i] * sum_gx) * inv_c) * istd;
        }
    }
    (gx, gweight, gbias)
}

/// Logistic sigmoid; the returned grid doubles as the backward cache.
pub fn sigmoid<F: Real>(x: &TokenGrid<F>) -> TokenGrid<F> {
    x.map(|v| F::one() / (F::one() + (-v).exp()))
}

pub fn sigmoid_backward<F: Real>(g_out: &TokenGrid<F>, sig: &TokenGrid<F>) -> TokenGrid<F> {
    g_out.zip_map(sig, |g, s| g * s * (F::one() - s))
}

/// `max(x, 0)^2`. Returns `(output, relu)` where `relu` is the backward cache.
pub fn squared_relu<F: Real>(x: &TokenGrid<F>) -> (TokenGrid<F>, TokenGrid<F>) {
    let relu = x.map(|v| v.max(F::zero()));
    let out = relu.map(|v| v * v);
    (out, relu)
}

pub fn squared_relu_backward<F: Real>(g_out: &TokenGrid<F>, relu: &TokenGrid<F>) -> TokenGrid<F> {
    let two = F::of(2.0);
    g_out.zip_map(relu, |g, r| g * two * r)
}
