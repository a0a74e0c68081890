//! Pre-norm vision-transformer encoder with token suppression support.
//!
//! Images are `[H, W, C]` tensors, cut into `N = HW/P²` non-overlapping
//! patches in row-major grid order. A class token is prepended, giving
//! `N + 1` tokens. A [`KeyMask`] removes patch tokens twice over: their
//! content embedding is multiplied by zero (the positional embedding is
//! kept) and every attention logit toward them is pushed to −1e9.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const MASKED_LOGIT: f64 = -1e9;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("classes", self.classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.image_h % self.patch != 0 {
            return Err(Error::config("image_h", "must be a multiple of patch"));
        }
        if self.image_w % self.patch != 0 {
            return Err(Error::config("image_w", "must be a multiple of patch"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config("heads", "must divide embed_dim"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    /// Patch count `N`.
    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Sequence length `N + 1`, class token included.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }
}

/// Attendability of each of the `N + 1` tokens. The class token is always
/// attendable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMask {
    bits: Vec<bool>,
}

impl KeyMask {
    pub fn all(tokens: usize) -> Self {
        Self {
            bits: vec![true; tokens],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        match bits.first() {
            Some(true) => Ok(Self { bits }),
            Some(false) => Err(Error::Contract("class token must stay attendable".into())),
            None => Err(Error::Contract("empty key mask".into())),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Token positions that are masked out.
    pub fn suppressed(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }
}

/// Cuts an `[H, W, C]` image into `[N, P·P·C]` rows. Row `i` is patch `i` of
/// the row-major grid, flattened as `(y, x, c)`.
pub fn patchify<T: Real>(image: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::config(
            "image_shape",
            format!(
                "image is {:?}, model expects {:?}",
                image.shape(),
                cfg.image_shape()
            ),
        ));
    }
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.image_w);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..cfg.grid_h() {
        for gx in 0..cfg.grid_w() {
            for y in 0..p {
                let start = ((gy * p + y) * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![cfg.num_patches(), cfg.patch_dim()],
        });
    }
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.image_w);
    let mut out = vec![T::zero(); patches.numel()];
    let src = patches.data();
    let mut i = 0;
    for gy in 0..cfg.grid_h() {
        for gx in 0..cfg.grid_w() {
            for y in 0..p {
                let start = ((gy * p + y) * w + gx * p) * c;
                out[start..start + p * c].copy_from_slice(&src[i..i + p * c]);
                i += p * c;
            }
        }
    }
    Tensor::new(cfg.image_shape().to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.register(format!("{prefix}.gain"), Tensor::full(&[dim], T::one())),
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.layernorm(x, self.gain.into(), self.bias.into(), LN_EPS)
    }
}

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.register(
                format!("{prefix}.weight"),
                trunc_normal(rng, &[fan_in, fan_out], INIT_STD),
            ),
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight.into())?;
        tape.add_row(h, self.bias.into())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub mlp_norm: LayerNormParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Per-layer post-softmax attention weights, `[L][heads][N+1][N+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    data: Vec<f64>,
}

impl AttentionStack {
    pub fn new(layers: usize, heads: usize, tokens: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layers * heads * tokens * tokens {
            return Err(Error::Shape {
                op: "attention_stack",
                lhs: vec![layers, heads, tokens, tokens],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            data,
        })
    }

    /// Copies the attention weights recorded by [`Encoder::forward`].
    pub fn from_tape<T: Real>(tape: &Tape<'_, T>, out: &EncoderOutput) -> Result<Self> {
        let first = out
            .attention
            .first()
            .ok_or_else(|| Error::Contract("no attention layers recorded".into()))?;
        let (heads, tokens) = (tape.shape(*first)[0], tape.shape(*first)[1]);
        let data = out
            .attention
            .iter()
            .flat_map(|&v| tape.value(v).iter().map(|x| x.as_f64()))
            .collect();
        Self::new(out.attention.len(), heads, tokens, data)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Row-major `[N+1, N+1]` matrix for one layer and head.
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let sz = self.tokens * self.tokens;
        let at = (layer * self.heads + head) * sz;
        &self.data[at..at + sz]
    }
}

pub struct EncoderOutput {
    /// Final-layernormed class token, `[1, D]`.
    pub y: Var,
    /// Post-softmax attention per layer, each `[heads, N+1, N+1]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
    pub patch_projection: ParamId,
    pub class_token: ParamId,
    pub positional: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNormParams,
}

impl Encoder {
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_projection = store.register(
            "encoder.patch_projection",
            trunc_normal(rng, &[cfg.patch_dim(), d], INIT_STD),
        );
        let class_token =
            store.register("encoder.class_token", trunc_normal(rng, &[1, d], INIT_STD));
        let positional = store.register(
            "encoder.positional",
            trunc_normal(rng, &[cfg.tokens(), d], INIT_STD),
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    attn_norm: LayerNormParams::new(store, &format!("{p}.attn_norm"), d),
                    query: Linear::new(store, &format!("{p}.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.value"), d, d, rng),
                    output: Linear::new(store, &format!("{p}.output"), d, d, rng),
                    mlp_norm: LayerNormParams::new(store, &format!("{p}.mlp_norm"), d),
                    mlp_in: Linear::new(store, &format!("{p}.mlp_in"), d, cfg.mlp_hidden(), rng),
                    mlp_out: Linear::new(store, &format!("{p}.mlp_out"), cfg.mlp_hidden(), d, rng),
                }
            })
            .collect();
        let final_norm = LayerNormParams::new(store, "encoder.final_norm", d);
        Ok(Self {
            cfg: cfg.clone(),
            patch_projection,
            class_token,
            positional,
            layers,
            final_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Token sequence `[x_class; (x_p·E) ∗ B] + E_pos`, shape `[N+1, D]`.
    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        patches: &Tensor<T>,
        mask: &KeyMask,
    ) -> Result<Var> {
        let (n, d) = (self.cfg.num_patches(), self.cfg.embed_dim);
        if mask.len() != n + 1 {
            return Err(Error::Shape {
                op: "embed mask",
                lhs: vec![mask.len()],
                rhs: vec![n + 1],
            });
        }
        let x = tape.constant(patches.clone());
        let mut content = tape.matmul(x, self.patch_projection.into())?;
        if !mask.is_full() {
            let bits = &mask.bits()[1..];
            let keep = Tensor::from_fn(&[n, d], |i| {
                if bits[i / d] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let keep = tape.constant(keep);
            content = tape.mul(content, keep)?;
        }
        let tokens = tape.concat_rows(self.class_token.into(), content)?;
        tape.add(tokens, self.positional.into())
    }

    /// Runs the `L` pre-norm blocks and returns `y = LN(z_L⁰)` with the
    /// recorded attention.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        z0: Var,
        mask: &KeyMask,
    ) -> Result<EncoderOutput> {
        let (heads, t) = (self.cfg.heads, self.cfg.tokens());
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let key_bias = (!mask.is_full()).then(|| {
            let bits = mask.bits();
            Tensor::from_fn(&[heads, t, t], |i| {
                if bits[i % t] {
                    T::zero()
                } else {
                    T::lit(MASKED_LOGIT)
                }
            })
        });

        let mut z = z0;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.attn_norm.apply(tape, z)?;
            let q = layer.query.apply(tape, h)?;
            let k = layer.key.apply(tape, h)?;
            let v = layer.value.apply(tape, h)?;
            let q = tape.split_heads(q, heads)?;
            let k = tape.split_heads(k, heads)?;
            let k = tape.transpose(k)?;
            let v = tape.split_heads(v, heads)?;
            let scores = tape.matmul(q, k)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(bias) = &key_bias {
                let bias = tape.constant(bias.clone());
                scores = tape.add(scores, bias)?;
            }
            let attn = tape.softmax(scores, 2)?;
            attention.push(attn);
            let mixed = tape.matmul(attn, v)?;
            let mixed = tape.merge_heads(mixed)?;
            let mixed = layer.output.apply(tape, mixed)?;
            z = tape.add(z, mixed)?;

            let h = layer.mlp_norm.apply(tape, z)?;
            let h = layer.mlp_in.apply(tape, h)?;
            let h = tape.gelu(h);
            let h = layer.mlp_out.apply(tape, h)?;
            z = tape.add(z, h)?;
        }
        let cls = tape.select_row(z, 0)?;
        let y = self.final_norm.apply(tape, cls)?;
        Ok(EncoderOutput { y, attention })
    }

    /// `patchify → embed → forward`.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        image: &Tensor<T>,
        mask: &KeyMask,
    ) -> Result<EncoderOutput> {
        let patches = patchify(image, &self.cfg)?;
        let z0 = self.embed(tape, &patches, mask)?;
        self.forward(tape, z0, mask)
    }
}
