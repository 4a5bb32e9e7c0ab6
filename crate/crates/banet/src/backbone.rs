//! Dependency path: stem, gated patch embedding, efficient transformer
//! blocks with spatially reduced keys/values, composed into four stages.
//! Emits the stage-3 and stage-4 feature maps (1/16 and 1/32 resolution).

use crate::error::{ensure, Result};
use crate::nn::{
    conv_layer, layer_norm_layer, linear_layer, merge_heads, split_heads, to_nchw, to_tokens, Ctx,
    Probe,
};

/// Order of the attention-map transform inside EMSA.
///
/// `ConvSoftmaxNorm` is the written form: 1x1 head-mixing conv, softmax over
/// the key axis, then instance norm per (batch, head) map. The alternative
/// swaps the last two steps, restoring row-stochastic attention weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmsaOrder {
    #[default]
    ConvSoftmaxNorm,
    ConvNormSoftmax,
}

impl std::str::FromStr for EmsaOrder {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-softmax-in" => Ok(Self::ConvSoftmaxNorm),
            "conv-in-softmax" => Ok(Self::ConvNormSoftmax),
            other => Err(crate::error::Error::InvalidArgument(format!(
                "unknown emsa order '{other}' (expected conv-softmax-in|conv-in-softmax)"
            ))),
        }
    }
}

/// Backbone hyperparameters. Defaults are the lite configuration validated
/// by the parameter-count check.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub heads: [usize; 4],
    pub kv_reduction: [usize; 4],
    pub mlp_ratio: f64,
    /// Patch-embedding stride s; the embedding conv has kernel s+1.
    pub patch_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_dims: [64, 128, 256, 512],
            stage_depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            kv_reduction: [8, 4, 2, 1],
            mlp_ratio: 4.0,
            patch_stride: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            ensure!(
                self.stage_dims[i] >= 1 && self.stage_dims[i] % self.heads[i] == 0,
                "stage {} dim {} not divisible by heads {}",
                i + 1,
                self.stage_dims[i],
                self.heads[i]
            );
            ensure!(self.kv_reduction[i] >= 1, "kv_reduction must be >= 1");
            ensure!(self.stage_depths[i] >= 1, "stage depths must be >= 1");
        }
        ensure!(self.mlp_ratio > 0.0, "mlp_ratio must be positive");
        ensure!(self.patch_stride >= 1, "patch_stride must be >= 1");
        Ok(())
    }

    fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Three 3x3 convolutions with strides [2, 1, 2]; the first two carry batch
/// norm and ReLU. Downsamples 4x and lifts the input to `out_c` channels.
pub fn stem<C: Ctx>(ctx: &mut C, prefix: &str, x: &C::V, out_c: usize) -> Result<C::V> {
    let s = ctx.shape(x);
    ensure!(
        s.len() == 4 && s[2] % 4 == 0 && s[3] % 4 == 0,
        "stem input {:?} must be [N,C,H,W] with H, W divisible by 4",
        s
    );
    let y = conv_layer(ctx, &format!("{prefix}.conv1"), x, out_c, 3, 2, 1, 1, false)?;
    let y = ctx.batch_norm(&format!("{prefix}.bn1"), &y)?;
    let y = ctx.relu(&y)?;
    let y = conv_layer(ctx, &format!("{prefix}.conv2"), &y, out_c, 3, 1, 1, 1, false)?;
    let y = ctx.batch_norm(&format!("{prefix}.bn2"), &y)?;
    let y = ctx.relu(&y)?;
    conv_layer(ctx, &format!("{prefix}.conv3"), &y, out_c, 3, 2, 1, 1, true)
}

/// Strided conv + BN, gated by a sigmoid depthwise conv:
/// out = Sigmoid(DWConv(x')) * x' with x' = BN(conv(x)).
pub fn patch_embed<C: Ctx>(ctx: &mut C, prefix: &str, x: &C::V, out_c: usize, s: usize) -> Result<C::V> {
    let xp = conv_layer(ctx, &format!("{prefix}.conv"), x, out_c, s + 1, s, s / 2, 1, false)?;
    let xp = ctx.batch_norm(&format!("{prefix}.bn"), &xp)?;
    let gate = conv_layer(ctx, &format!("{prefix}.dw"), &xp, out_c, 3, 1, 1, out_c, true)?;
    let gate = ctx.sigmoid(&gate)?;
    ctx.hadamard(&gate, &xp)
}

/// Efficient multi-head self-attention over tokens [N, L, C] with L = h*w.
///
/// Queries come straight from the tokens; keys/values go through a
/// depthwise reduction conv (kernel r+1, stride r, padding r/2) plus layer
/// norm when r > 1. Attention maps are mixed across heads by a 1x1 conv and
/// normalized per (batch, head) map according to `order`.
#[allow(clippy::too_many_arguments)]
pub fn emsa<C: Ctx>(
    ctx: &mut C,
    prefix: &str,
    tokens: &C::V,
    spatial: (usize, usize),
    heads: usize,
    reduction: usize,
    order: EmsaOrder,
    mut probe: Option<&mut Probe<C::V>>,
) -> Result<C::V> {
    let (h, w) = spatial;
    let shape = ctx.shape(tokens);
    ensure!(shape.len() == 3, "emsa tokens must be [N,L,C], got {:?}", shape);
    let (n, l, c) = (shape[0], shape[1], shape[2]);
    ensure!(
        l == h * w,
        "token count {l} does not factor into the declared spatial shape {h}x{w}"
    );
    ensure!(c % heads == 0, "C={c} not divisible by heads={heads}");
    let dk = c / heads;

    let q = linear_layer(ctx, &format!("{prefix}.q"), tokens, c, true)?;
    let q = split_heads(ctx, &q, heads)?;

    let kv_src = if reduction > 1 {
        let x = to_nchw(ctx, tokens, h, w)?;
        let x = conv_layer(
            ctx,
            &format!("{prefix}.sr"),
            &x,
            c,
            reduction + 1,
            reduction,
            reduction / 2,
            c,
            true,
        )?;
        let t = to_tokens(ctx, &x)?;
        layer_norm_layer(ctx, &format!("{prefix}.sr_norm"), &t)?
    } else {
        tokens.clone()
    };
    let lk = ctx.shape(&kv_src)[1];

    let k = linear_layer(ctx, &format!("{prefix}.k"), &kv_src, c, true)?;
    let k = split_heads(ctx, &k, heads)?;
    let v = linear_layer(ctx, &format!("{prefix}.v"), &kv_src, c, true)?;
    let v = split_heads(ctx, &v, heads)?;

    let kt = ctx.permute(&k, &[0, 2, 1])?;
    let logits = ctx.matmul(&q, &kt)?;
    let logits = ctx.scale(&logits, 1.0 / (dk as f64).sqrt())?;

    // Head-mixing 1x1 conv treats heads as channels of an [N, heads, L, L'] map.
    let maps = ctx.reshape(&logits, &[n, heads, l, lk])?;
    let maps = conv_layer(ctx, &format!("{prefix}.attn_conv"), &maps, heads, 1, 1, 0, 1, true)?;
    let attn = match order {
        EmsaOrder::ConvSoftmaxNorm => {
            let sm = ctx.softmax(&maps, 3)?;
            if let Some(p) = probe.as_deref_mut() {
                p.record(format!("{prefix}.softmax"), sm.clone());
            }
            ctx.instance_norm(&sm)?
        }
        EmsaOrder::ConvNormSoftmax => {
            let norm = ctx.instance_norm(&maps)?;
            let sm = ctx.softmax(&norm, 3)?;
            if let Some(p) = probe.as_deref_mut() {
                p.record(format!("{prefix}.softmax"), sm.clone());
            }
            sm
        }
    };

    let attn = ctx.reshape(&attn, &[n * heads, l, lk])?;
    let out = ctx.matmul(&attn, &v)?;
    let out = merge_heads(ctx, &out, heads)?;
    linear_layer(ctx, &format!("{prefix}.proj"), &out, c, true)
}

/// Residual transformer block: G = x + EMSA(P(x)); out = G + MLP(LN(G)).
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<C: Ctx>(
    ctx: &mut C,
    prefix: &str,
    tokens: &C::V,
    spatial: (usize, usize),
    heads: usize,
    reduction: usize,
    mlp_hidden: usize,
    order: EmsaOrder,
    mut probe: Option<&mut Probe<C::V>>,
) -> Result<C::V> {
    let c = *ctx.shape(tokens).last().unwrap();
    let att = emsa(
        ctx,
        &format!("{prefix}.attn"),
        tokens,
        spatial,
        heads,
        reduction,
        order,
        probe.as_deref_mut(),
    )?;
    let g = ctx.add(tokens, &att)?;
    let y = layer_norm_layer(ctx, &format!("{prefix}.norm"), &g)?;
    let y = linear_layer(ctx, &format!("{prefix}.mlp.fc1"), &y, mlp_hidden, true)?;
    let y = ctx.gelu(&y)?;
    let y = linear_layer(ctx, &format!("{prefix}.mlp.fc2"), &y, c, true)?;
    ctx.add(&g, &y)
}

/// Stem plus four transformer stages; stages 2-4 open with a patch
/// embedding. Returns the stage-3 and stage-4 outputs in NCHW layout.
pub fn backbone_forward<C: Ctx>(
    ctx: &mut C,
    image: &C::V,
    cfg: &BackboneConfig,
    order: EmsaOrder,
    mut probe: Option<&mut Probe<C::V>>,
) -> Result<(C::V, C::V)> {
    cfg.validate()?;
    let mut x = stem(ctx, "backbone.stem", image, cfg.stage_dims[0])?;
    let mut ldf3 = None;
    for stage in 0..4 {
        if stage > 0 {
            x = patch_embed(
                ctx,
                &format!("backbone.stage{}.embed", stage + 1),
                &x,
                cfg.stage_dims[stage],
                cfg.patch_stride,
            )?;
        }
        let s = ctx.shape(&x);
        let (h, w) = (s[2], s[3]);
        let mut tokens = to_tokens(ctx, &x)?;
        for b in 0..cfg.stage_depths[stage] {
            tokens = transformer_block(
                ctx,
                &format!("backbone.stage{}.block{}", stage + 1, b),
                &tokens,
                (h, w),
                cfg.heads[stage],
                cfg.kv_reduction[stage],
                cfg.mlp_hidden(cfg.stage_dims[stage]),
                order,
                probe.as_deref_mut(),
            )?;
        }
        x = to_nchw(ctx, &tokens, h, w)?;
        if stage == 2 {
            ldf3 = Some(x.clone());
        }
    }
    Ok((ldf3.expect("stage 3 output recorded"), x))
}
