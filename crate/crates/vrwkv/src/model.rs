//! Encoder configuration and learnable parameters.
//!
//! The per-block channel path uses three projections (gate `C x C`, key
//! `C x hidden`, value `hidden x C`); the value projection is the output
//! projection of the block. This is the parameterization that reproduces the
//! published parameter budgets (6.2M tiny / 23.8M small).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use biwkv::{KernelError, Real};

use crate::layers::LayerNormParams;
use crate::shift::{ShiftError, ShiftMode, ShiftParams};
use crate::tensor::{cast_slice, Mat, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Bidirectional WKV attention.
    BiWkv,
    /// Original causal RWKV attention (receptive-field baseline).
    Causal,
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "biwkv" => Ok(Self::BiWkv),
            "causal" => Ok(Self::Causal),
            other => Err(format!("unknown attention kind `{other}`")),
        }
    }
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BiWkv => "biwkv",
            Self::Causal => "causal",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// Square training resolution; fixes the native position-embedding grid.
    pub image_size: usize,
    pub image_channels: usize,
    pub extra_norm: bool,
    pub layer_scale_init: f64,
    pub shift_mode: ShiftMode,
    /// Use the literal `X + (1 - mu) * X_shift` interpolation instead of the
    /// convex `mu * X + (1 - mu) * X_shift` form.
    pub shift_literal_eq9: bool,
    pub attention: AttentionKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of 4",
                self.embed_dim
            )));
        }
        if self.hidden_dim < self.embed_dim {
            return Err(ModelError::Config(format!(
                "hidden_dim {} must be >= embed_dim {}",
                self.hidden_dim, self.embed_dim
            )));
        }
        if self.patch_size == 0 {
            return Err(ModelError::Config("patch_size must be >= 1".into()));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_channels == 0 {
            return Err(ModelError::Config("image_channels must be >= 1".into()));
        }
        if self.layer_scale_init < 0.0 {
            return Err(ModelError::Config("layer_scale_init must be >= 0".into()));
        }
        Ok(())
    }

    /// Native position-embedding grid (square).
    pub fn base_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn base_tokens(&self) -> usize {
        self.base_grid() * self.base_grid()
    }

    /// Flattened per-patch input dimension.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image is {got_h}x{got_w}, not divisible by patch size {patch}")]
    ImageShape {
        got_h: usize,
        got_w: usize,
        patch: usize,
    },
    #[error("input has {got} channels, model expects {expected}")]
    ImageChannels { got: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
}

#[derive(Debug, Clone)]
pub struct SpatialMixParams<F> {
    pub ln: LayerNormParams<F>,
    pub shift: ShiftParams<F>,
    pub w_r: Mat<F>,
    pub w_k: Mat<F>,
    pub w_v: Mat<F>,
    pub w_o: Mat<F>,
    /// Per-channel spatial decay of the WKV kernel.
    pub decay: Vec<F>,
    /// Per-channel current-token bonus of the WKV kernel.
    pub bonus: Vec<F>,
    /// Post-projection layer norm, present when `extra_norm` is set.
    pub ln_post: Option<LayerNormParams<F>>,
    pub gamma: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct ChannelMixParams<F> {
    pub ln: LayerNormParams<F>,
    pub shift: ShiftParams<F>,
    pub w_r: Mat<F>,
    /// `C x hidden` key projection.
    pub w_k: Mat<F>,
    /// `hidden x C` value/output projection.
    pub w_v: Mat<F>,
    /// Norm on the value path, present when `extra_norm` is set.
    pub ln_post: Option<LayerNormParams<F>>,
    pub gamma: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<F> {
    pub spatial: SpatialMixParams<F>,
    pub channel: ChannelMixParams<F>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub patch_weight: Mat<F>,
    pub patch_bias: Vec<F>,
    /// Learnable absolute position embedding on the native grid,
    /// bilinearly resized for other resolutions.
    pub pos: Mat<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub norm: LayerNormParams<F>,
    pub head_weight: Mat<F>,
    pub head_bias: Vec<F>,
}

/// Name, shape and weight-decay eligibility of one learnable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dims: Vec<usize>,
    pub weight_decay: bool,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Declaration-order tensor list; the checkpoint layout and the optimizer
/// both follow this order. Projections decay; norms, biases, interpolation
/// weights, kernel decay/bonus and layer scales do not.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorMeta> {
    let c = config.embed_dim;
    let hidden = config.hidden_dim;
    let mut specs = Vec::new();
    let mut push = |name: String, dims: Vec<usize>, weight_decay: bool| {
        specs.push(TensorMeta {
            name,
            dims,
            weight_decay,
        });
    };
    push("patch.weight".into(), vec![config.patch_dim(), c], true);
    push("patch.bias".into(), vec![c], false);
    push("pos".into(), vec![config.base_tokens(), c], true);
    for i in 0..config.depth {
        let p = format!("blocks.{i}.spatial");
        push(format!("{p}.ln.weight"), vec![c], false);
        push(format!("{p}.ln.bias"), vec![c], false);
        push(format!("{p}.mu_r"), vec![c], false);
        push(format!("{p}.mu_k"), vec![c], false);
        push(format!("{p}.mu_v"), vec![c], false);
        push(format!("{p}.w_r"), vec![c, c], true);
        push(format!("{p}.w_k"), vec![c, c], true);
        push(format!("{p}.w_v"), vec![c, c], true);
        push(format!("{p}.w_o"), vec![c, c], true);
        push(format!("{p}.decay"), vec![c], false);
        push(format!("{p}.bonus"), vec![c], false);
        if config.extra_norm {
            push(format!("{p}.ln_post.weight"), vec![c], false);
            push(format!("{p}.ln_post.bias"), vec![c], false);
        }
        push(format!("{p}.gamma"), vec![c], false);
        let p = format!("blocks.{i}.channel");
        push(format!("{p}.ln.weight"), vec![c], false);
        push(format!("{p}.ln.bias"), vec![c], false);
        push(format!("{p}.mu_r"), vec![c], false);
        push(format!("{p}.mu_k"), vec![c], false);
        push(format!("{p}.w_r"), vec![c, c], true);
        push(format!("{p}.w_k"), vec![c, hidden], true);
        push(format!("{p}.w_v"), vec![hidden, c], true);
        if config.extra_norm {
            push(format!("{p}.ln_post.weight"), vec![c], false);
            push(format!("{p}.ln_post.bias"), vec![c], false);
        }
        push(format!("{p}.gamma"), vec![c], false);
    }
    push("norm.weight".into(), vec![c], false);
    push("norm.bias".into(), vec![c], false);
    push("head.weight".into(), vec![c, config.num_classes], true);
    push("head.bias".into(), vec![config.num_classes], false);
    specs
}

/// Exact learnable-scalar count for a config.
pub fn count_params(config: &ModelConfig) -> usize {
    tensor_specs(config).iter().map(TensorMeta::len).sum()
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.embed_dim;
        let hidden = config.hidden_dim;
        let ln = || LayerNormParams {
            weight: vec![F::zero(); c],
            bias: vec![F::zero(); c],
        };
        let ln_post = || config.extra_norm.then(ln);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                spatial: SpatialMixParams {
                    ln: ln(),
                    shift: ShiftParams {
                        mode: config.shift_mode,
                        mu_r: vec![F::zero(); c],
                        mu_k: vec![F::zero(); c],
                        mu_v: vec![F::zero(); c],
                    },
                    w_r: Mat::zeros(c, c),
                    w_k: Mat::zeros(c, c),
                    w_v: Mat::zeros(c, c),
                    w_o: Mat::zeros(c, c),
                    decay: vec![F::zero(); c],
                    bonus: vec![F::zero(); c],
                    ln_post: ln_post(),
                    gamma: vec![F::zero(); c],
                },
                channel: ChannelMixParams {
                    ln: ln(),
                    shift: ShiftParams {
                        mode: config.shift_mode,
                        mu_r: vec![F::zero(); c],
                        mu_k: vec![F::zero(); c],
                        mu_v: Vec::new(),
                    },
                    w_r: Mat::zeros(c, c),
                    w_k: Mat::zeros(c, hidden),
                    w_v: Mat::zeros(hidden, c),
                    ln_post: ln_post(),
                    gamma: vec![F::zero(); c],
                },
            })
            .collect();
        Self {
            patch_weight: Mat::zeros(config.patch_dim(), c),
            patch_bias: vec![F::zero(); c],
            pos: Mat::zeros(config.base_tokens(), c),
            blocks,
            norm: ln(),
            head_weight: Mat::zeros(c, config.num_classes),
            head_bias: vec![F::zero(); config.num_classes],
        }
    }

    /// Tensors in the same order as [`tensor_specs`].
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        out.push(&self.patch_weight.data);
        out.push(&self.patch_bias);
        out.push(&self.pos.data);
        for b in &self.blocks {
            let s = &b.spatial;
            out.push(&s.ln.weight);
            out.push(&s.ln.bias);
            out.push(&s.shift.mu_r);
            out.push(&s.shift.mu_k);
            out.push(&s.shift.mu_v);
            out.push(&s.w_r.data);
            out.push(&s.w_k.data);
            out.push(&s.w_v.data);
            out.push(&s.w_o.data);
            out.push(&s.decay);
            out.push(&s.bonus);
            if let Some(lp) = &s.ln_post {
                out.push(&lp.weight);
                out.push(&lp.bias);
            }
            out.push(&s.gamma);
            let ch = &b.channel;
            out.push(&ch.ln.weight);
            out.push(&ch.ln.bias);
            out.push(&ch.shift.mu_r);
            out.push(&ch.shift.mu_k);
            out.push(&ch.w_r.data);
            out.push(&ch.w_k.data);
            out.push(&ch.w_v.data);
            if let Some(lp) = &ch.ln_post {
                out.push(&lp.weight);
                out.push(&lp.bias);
            }
            out.push(&ch.gamma);
        }
        out.push(&self.norm.weight);
        out.push(&self.norm.bias);
        out.push(&self.head_weight.data);
        out.push(&self.head_bias);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(&mut self.patch_weight.data);
        out.push(&mut self.patch_bias);
        out.push(&mut self.pos.data);
        for b in &mut self.blocks {
            let s = &mut b.spatial;
            out.push(&mut s.ln.weight);
            out.push(&mut s.ln.bias);
            out.push(&mut s.shift.mu_r);
            out.push(&mut s.shift.mu_k);
            out.push(&mut s.shift.mu_v);
            out.push(&mut s.w_r.data);
            out.push(&mut s.w_k.data);
            out.push(&mut s.w_v.data);
            out.push(&mut s.w_o.data);
            out.push(&mut s.decay);
            out.push(&mut s.bonus);
            if let Some(lp) = &mut s.ln_post {
                out.push(&mut lp.weight);
                out.push(&mut lp.bias);
            }
            out.push(&mut s.gamma);
            let ch = &mut b.channel;
            out.push(&mut ch.ln.weight);
            out.push(&mut ch.ln.bias);
            out.push(&mut ch.shift.mu_r);
            out.push(&mut ch.shift.mu_k);
            out.push(&mut ch.w_r.data);
            out.push(&mut ch.w_k.data);
            out.push(&mut ch.w_v.data);
            if let Some(lp) = &mut ch.ln_post {
                out.push(&mut lp.weight);
                out.push(&mut lp.bias);
            }
            out.push(&mut ch.gamma);
        }
        out.push(&mut self.norm.weight);
        out.push(&mut self.norm.bias);
        out.push(&mut self.head_weight.data);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<G: Real>(&self, config: &ModelConfig) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(config);
        for (dst, src) in out.slices_mut().into_iter().zip(self.slices()) {
            dst.copy_from_slice(&cast_slice::<F, G>(src));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Standard normal via Box-Muller; deterministic for a given generator state.
pub(crate) fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normal(0, sigma^2) truncated to +-3 sigma by resampling.
fn trunc_normal(rng: &mut impl rand::Rng, sigma: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 3.0 {
            return sigma * z;
        }
    }
}

/// Deterministic initialization: truncated-normal projections (sigma 0.02),
/// zero biases, decay linearly spaced in [-1, 1], zero bonus, interpolation
/// weights at 0.5, layer scales at `layer_scale_init`, norms at identity.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = config.embed_dim;
    let mut params = ModelParams::<f64>::zeros(config);

    let mut fill_normal = |m: &mut [f64], rng: &mut rand_chacha::ChaCha8Rng| {
        for x in m.iter_mut() {
            *x = trunc_normal(rng, 0.02);
        }
    };

    fill_normal(&mut params.patch_weight.data, &mut rng);
    fill_normal(&mut params.pos.data, &mut rng);
    let linspace: Vec<f64> = (0..c)
        .map(|i| {
            if c == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (c - 1) as f64
            }
        })
        .collect();
    for b in &mut params.blocks {
        let s = &mut b.spatial;
        s.ln = LayerNormParams::identity(c);
        s.shift.mu_r = vec![0.5; c];
        s.shift.mu_k = vec![0.5; c];
        s.shift.mu_v = vec![0.5; c];
        fill_normal(&mut s.w_r.data, &mut rng);
        fill_normal(&mut s.w_k.data, &mut rng);
        fill_normal(&mut s.w_v.data, &mut rng);
        fill_normal(&mut s.w_o.data, &mut rng);
        s.decay = linspace.clone();
        s.bonus = vec![0.0; c];
        if let Some(lp) = &mut s.ln_post {
            *lp = LayerNormParams::identity(c);
        }
        s.gamma = vec![config.layer_scale_init; c];
        let ch = &mut b.channel;
        ch.ln = LayerNormParams::identity(c);
        ch.shift.mu_r = vec![0.5; c];
        ch.shift.mu_k = vec![0.5; c];
        fill_normal(&mut ch.w_r.data, &mut rng);
        fill_normal(&mut ch.w_k.data, &mut rng);
        fill_normal(&mut ch.w_v.data, &mut rng);
        if let Some(lp) = &mut ch.ln_post {
            *lp = LayerNormParams::identity(c);
        }
        ch.gamma = vec![config.layer_scale_init; c];
    }
    params.norm = LayerNormParams::identity(c);
    fill_normal(&mut params.head_weight.data, &mut rng);
    params
}

/// Image container: `B x H x W x image_channels` on the pixel grid.
pub type ImageBatch<F> = TokenGrid<F>;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden_dim: 32,
            depth: 1,
            patch_size: 4,
            num_classes: 4,
            image_size: 12,
            image_channels: 3,
            extra_norm: false,
            layer_scale_init: 0.5,
            shift_mode: ShiftMode::Quad,
            shift_literal_eq9: false,
            attention: AttentionKind::BiWkv,
        }
    }

    fn table_config(embed: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: embed,
            hidden_dim: hidden,
            depth: 12,
            patch_size: 16,
            num_classes: 1000,
            image_size: 224,
            image_channels: 3,
            extra_norm: false,
            layer_scale_init: 1e-5,
            shift_mode: ShiftMode::Quad,
            shift_literal_eq9: false,
            attention: AttentionKind::BiWkv,
        }
    }

    #[test]
    fn specs_and_slices_stay_in_sync() {
        for config in [tiny_config(), {
            let mut c = tiny_config();
            c.extra_norm = true;
            c.depth = 3;
            c
        }] {
            let specs = tensor_specs(&config);
            let params = ModelParams::<f64>::zeros(&config);
            let slices = params.slices();
            assert_eq!(specs.len(), slices.len());
            for (spec, slice) in specs.iter().zip(&slices) {
                assert_eq!(spec.len(), slice.len(), "{}", spec.name);
            }
            let mut params = params;
            assert_eq!(params.slices_mut().len(), specs.len());
        }
    }

    #[test]
    fn parameter_count_matches_published_budgets() {
        // Tiny: 192 / 768 / 12 within +-5% of 6.2M.
        let tiny = count_params(&table_config(192, 768)) as f64;
        assert!((tiny / 6.2e6 - 1.0).abs() < 0.05, "tiny count {tiny}");
        // Small: 384 / 1536 / 12 within +-5% of 23.8M.
        let small = count_params(&table_config(384, 1536)) as f64;
        assert!((small / 23.8e6 - 1.0).abs() < 0.05, "small count {small}");
        // Base: 768 / 3072 / 12 within +-5% of 93.7M.
        let base = count_params(&table_config(768, 3072)) as f64;
        assert!((base / 93.7e6 - 1.0).abs() < 0.05, "base count {base}");
    }

    #[test]
    fn depth_zero_no_classes_counts_embedding_side_only() {
        let mut config = tiny_config();
        config.depth = 0;
        config.num_classes = 0;
        // patch weight + bias, pos, final norm; no blocks, no head.
        let expected = config.patch_dim() * config.embed_dim
            + config.embed_dim
            + config.base_tokens() * config.embed_dim
            + 2 * config.embed_dim;
        assert_eq!(count_params(&config), expected);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = tiny_config();
        let a = init_params(&config, 7);
        let b = init_params(&config, 7);
        for (x, y) in a.slices().iter().zip(b.slices().iter()) {
            assert_eq!(x, y);
        }
        let c = init_params(&config, 8);
        assert!(a
            .slices()
            .iter()
            .zip(c.slices().iter())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn init_projection_scale_is_close_to_nominal() {
        let mut config = tiny_config();
        config.embed_dim = 64;
        config.hidden_dim = 256;
        config.depth = 2;
        let params = init_params(&config, 0);
        let mut values = Vec::new();
        for b in &params.blocks {
            values.extend_from_slice(&b.spatial.w_r.data);
            values.extend_from_slice(&b.channel.w_k.data);
        }
        assert!(values.len() >= 10_000);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        let sigma = var.sqrt();
        assert!(
            (sigma - 0.02).abs() / 0.02 < 0.10,
            "empirical sigma {sigma}"
        );
    }

    #[test]
    fn decay_init_spans_minus_one_to_one() {
        let config = tiny_config();
        let params = init_params(&config, 0);
        let d = &params.blocks[0].spatial.decay;
        assert_eq!(d[0], -1.0);
        assert_eq!(*d.last().unwrap(), 1.0);
    }
}
