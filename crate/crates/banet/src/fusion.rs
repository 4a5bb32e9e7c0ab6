//! Feature aggregation and the segmentation head.
//!
//! Linear attention computes convex-combination weights
//! w[m,n] = (1 + q_m . k_n) / (N + q_m . sum_n k_n) over L2-normalized
//! queries and keys, evaluated in the factored O(N) form — the N x N weight
//! matrix is never materialized. The quadratic form lives in [`reference`]
//! and exists only for verification and benchmarks.

use crate::backbone::{backbone_forward, BackboneConfig, EmsaOrder};
use crate::error::{ensure, Result};
use crate::nn::{conv_bn_relu, conv_layer, l2_normalize_tokens, to_nchw, to_tokens, Ctx, Probe};
use crate::tensor::ops::UpsampleMode;
use crate::texture::texture_forward;

/// Epsilon added under the square root of the L2 normalization.
pub const L2_EPS: f64 = 1e-8;

/// How the two paths are merged before the segmentation head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Full aggregation: AEM over the backbone features, concatenation with
    /// the texture feature, linear-attention gate.
    #[default]
    Fam,
    /// Project the upsampled AEM output to the texture width and add.
    Sum,
    /// Concatenate the upsampled AEM output with the texture feature.
    Cat,
    /// Dependency path only, both stage outputs upsampled to the 1/8 grid.
    None,
}

impl std::str::FromStr for FusionMode {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fam" => Ok(Self::Fam),
            "sum" => Ok(Self::Sum),
            "cat" => Ok(Self::Cat),
            "none" => Ok(Self::None),
            other => Err(crate::error::Error::InvalidArgument(format!(
                "unknown fusion mode '{other}' (expected fam|sum|cat|none)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fam => "fam",
            Self::Sum => "sum",
            Self::Cat => "cat",
            Self::None => "none",
        })
    }
}

/// Everything needed to assemble the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// (mid, out) channel widths of the texture path.
    pub texture_channels: (usize, usize),
    pub fusion_mode: FusionMode,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub emsa_order: EmsaOrder,
    /// Upsampling inside AEM (stated: nearest).
    pub aem_upsample: UpsampleMode,
    /// Upsampling that bridges the aggregated feature to the 1/8 grid.
    pub af_upsample: UpsampleMode,
}

impl ModelConfig {
    /// Full-size configuration (lite backbone).
    pub fn lite(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::default(),
            texture_channels: (64, 128),
            fusion_mode: FusionMode::Fam,
            head_hidden: 128,
            num_classes,
            emsa_order: EmsaOrder::default(),
            aem_upsample: UpsampleMode::Nearest,
            af_upsample: UpsampleMode::Bilinear,
        }
    }

    /// Small configuration for CPU training runs; the texture path keeps its
    /// full width, only the backbone scales down.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig {
                stage_dims: [16, 32, 64, 128],
                stage_depths: [1, 1, 1, 1],
                heads: [1, 2, 4, 8],
                kv_reduction: [8, 4, 2, 1],
                mlp_ratio: 2.0,
                patch_stride: 2,
            },
            texture_channels: (64, 128),
            fusion_mode: FusionMode::Fam,
            head_hidden: 64,
            num_classes,
            emsa_order: EmsaOrder::default(),
            aem_upsample: UpsampleMode::Nearest,
            af_upsample: UpsampleMode::Bilinear,
        }
    }

    /// Tiny configuration whose whole-model finite-difference check stays
    /// cheap (a few thousand parameters).
    pub fn micro(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig {
                stage_dims: [4, 4, 6, 8],
                stage_depths: [1, 1, 1, 1],
                heads: [1, 1, 2, 2],
                kv_reduction: [2, 2, 2, 1],
                mlp_ratio: 1.0,
                patch_stride: 2,
            },
            texture_channels: (3, 6),
            fusion_mode: FusionMode::Fam,
            head_hidden: 4,
            num_classes,
            emsa_order: EmsaOrder::default(),
            aem_upsample: UpsampleMode::Nearest,
            af_upsample: UpsampleMode::Bilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        ensure!(self.num_classes >= 2, "num_classes must be >= 2, got {}", self.num_classes);
        ensure!(self.head_hidden >= 1, "head_hidden must be >= 1");
        ensure!(
            self.texture_channels.0 >= 1 && self.texture_channels.1 >= 1,
            "texture channel widths must be >= 1"
        );
        Ok(())
    }
}

/// Factored linear attention over an NCHW feature map.
///
/// Q, K, V are 1x1 convolutions; queries and keys are L2-normalized over
/// channels per position. Output m = sum_n w[m,n] v_n with the weights
/// above, computed as (vsum + M^T q_m) / (N + q_m . ksum) where
/// M = sum_n k_n v_n^T.
pub fn linear_attention<C: Ctx>(ctx: &mut C, prefix: &str, x: &C::V) -> Result<C::V> {
    let s = ctx.shape(x);
    ensure!(s.len() == 4, "linear attention input must be [N,C,H,W], got {:?}", s);
    let (c, h, w) = (s[1], s[2], s[3]);
    let positions = (h * w) as f64;

    let q = conv_layer(ctx, &format!("{prefix}.q"), x, c, 1, 1, 0, 1, true)?;
    let k = conv_layer(ctx, &format!("{prefix}.k"), x, c, 1, 1, 0, 1, true)?;
    let v = conv_layer(ctx, &format!("{prefix}.v"), x, c, 1, 1, 0, 1, true)?;

    let q = to_tokens(ctx, &q)?;
    let k = to_tokens(ctx, &k)?;
    let v = to_tokens(ctx, &v)?;
    let qn = l2_normalize_tokens(ctx, &q, L2_EPS)?;
    let kn = l2_normalize_tokens(ctx, &k, L2_EPS)?;

    // M = K^T V: [N, C, C]; vsum, ksum: [N, 1, C]
    let knt = ctx.permute(&kn, &[0, 2, 1])?;
    let m = ctx.matmul(&knt, &v)?;
    let qm = ctx.matmul(&qn, &m)?;
    let vsum = ctx.sum_axis(&v, 1)?;
    let numer = ctx.bcast_add(&qm, &vsum)?;

    let ksum = ctx.sum_axis(&kn, 1)?;
    let ksumt = ctx.permute(&ksum, &[0, 2, 1])?;
    let dots = ctx.matmul(&qn, &ksumt)?;
    let denom = ctx.add_scalar(&dots, positions)?;

    let out = ctx.bcast_div(&numer, &denom)?;
    to_nchw(ctx, &out, h, w)
}

/// Linear attention followed by a 1x1 conv + BN + ReLU projecting to
/// `out_c` channels.
pub fn lam<C: Ctx>(ctx: &mut C, prefix: &str, x: &C::V, out_c: usize) -> Result<C::V> {
    let y = linear_attention(ctx, &format!("{prefix}.la"), x)?;
    conv_bn_relu(ctx, prefix, &y, out_c, 1, 1, 0)
}

/// Attentional embedding: ldf3 + ldf3 * U2(LAM(ldf4)).
pub fn aem<C: Ctx>(
    ctx: &mut C,
    ldf3: &C::V,
    ldf4: &C::V,
    up_mode: UpsampleMode,
) -> Result<C::V> {
    let c3 = ctx.shape(ldf3)[1];
    let att = lam(ctx, "fam.aem.lam", ldf4, c3)?;
    let att = ctx.upsample(&att, 2, up_mode)?;
    let gated = ctx.hadamard(ldf3, &att)?;
    ctx.add(ldf3, &gated)
}

/// Full aggregation: AF = concat(U2(AEM), TF); out = AF * LAM(AF).
pub fn fam<C: Ctx>(
    ctx: &mut C,
    tf: &C::V,
    ldf3: &C::V,
    ldf4: &C::V,
    cfg: &ModelConfig,
    mut probe: Option<&mut Probe<C::V>>,
) -> Result<C::V> {
    let merged = aem(ctx, ldf3, ldf4, cfg.aem_upsample)?;
    let up = ctx.upsample(&merged, 2, cfg.af_upsample)?;
    let af = ctx.concat(&[&up, tf], 1)?;
    if let Some(p) = probe.as_deref_mut() {
        p.record("fam.af", af.clone());
    }
    let c_af = ctx.shape(&af)[1];
    let gate = lam(ctx, "fam.lam", &af, c_af)?;
    ctx.hadamard(&af, &gate)
}

/// 3x3 conv+BN+ReLU, 1x1 classifier conv, bilinear x8 back to full
/// resolution.
pub fn seg_head<C: Ctx>(ctx: &mut C, fused: &C::V, hidden: usize, num_classes: usize) -> Result<C::V> {
    let y = conv_bn_relu(ctx, "head.reduce", fused, hidden, 3, 1, 1)?;
    let y = conv_layer(ctx, "head.classify", &y, num_classes, 1, 1, 0, 1, true)?;
    ctx.upsample(&y, 8, UpsampleMode::Bilinear)
}

/// Whole-network forward: both paths, fusion per `cfg.fusion_mode`, head.
pub fn banet_forward<C: Ctx>(
    ctx: &mut C,
    image: &C::V,
    cfg: &ModelConfig,
    mut probe: Option<&mut Probe<C::V>>,
) -> Result<C::V> {
    cfg.validate()?;
    let s = ctx.shape(image);
    ensure!(
        s.len() == 4 && s[1] == 3,
        "network input must be [N,3,H,W], got {:?}",
        s
    );
    ensure!(
        s[2] % 32 == 0 && s[3] % 32 == 0 && s[2] >= 32 && s[3] >= 32,
        "input spatial dims {}x{} must be divisible by 32",
        s[2],
        s[3]
    );

    let (ldf3, ldf4) = backbone_forward(ctx, image, &cfg.backbone, cfg.emsa_order, probe.as_deref_mut())?;
    if let Some(p) = probe.as_deref_mut() {
        p.record("backbone.ldf3", ldf3.clone());
        p.record("backbone.ldf4", ldf4.clone());
    }

    let fused = match cfg.fusion_mode {
        FusionMode::Fam => {
            let tf = texture_forward(ctx, image, cfg.texture_channels)?;
            if let Some(p) = probe.as_deref_mut() {
                p.record("texture.tf", tf.clone());
            }
            fam(ctx, &tf, &ldf3, &ldf4, cfg, probe.as_deref_mut())?
        }
        FusionMode::Sum => {
            let tf = texture_forward(ctx, image, cfg.texture_channels)?;
            if let Some(p) = probe.as_deref_mut() {
                p.record("texture.tf", tf.clone());
            }
            let merged = aem(ctx, &ldf3, &ldf4, cfg.aem_upsample)?;
            let up = ctx.upsample(&merged, 2, cfg.af_upsample)?;
            let proj = conv_layer(ctx, "fam.sum_proj", &up, cfg.texture_channels.1, 1, 1, 0, 1, true)?;
            ctx.add(&proj, &tf)?
        }
        FusionMode::Cat => {
            let tf = texture_forward(ctx, image, cfg.texture_channels)?;
            if let Some(p) = probe.as_deref_mut() {
                p.record("texture.tf", tf.clone());
            }
            let merged = aem(ctx, &ldf3, &ldf4, cfg.aem_upsample)?;
            let up = ctx.upsample(&merged, 2, cfg.af_upsample)?;
            ctx.concat(&[&up, &tf], 1)?
        }
        FusionMode::None => {
            let up3 = ctx.upsample(&ldf3, 2, cfg.af_upsample)?;
            let up4 = ctx.upsample(&ldf4, 4, cfg.af_upsample)?;
            ctx.concat(&[&up3, &up4], 1)?
        }
    };
    if let Some(p) = probe.as_deref_mut() {
        p.record("fusion.fused", fused.clone());
    }

    seg_head(ctx, &fused, cfg.head_hidden, cfg.num_classes)
}

/// Reference implementations used only by tests and benchmarks.
pub mod reference {
    use crate::error::Result;
    use crate::nn::{Ctx, Infer, Weights};
    use crate::tensor::Tensor;

    /// Explicit O(N^2) evaluation of the linear-attention weights
    /// w[m,n] = (1 + q_m . k_n) / (N + q_m . sum_n k_n), applied to V.
    /// Shares the Q/K/V projections with the factored path via the weight
    /// store; the aggregation itself is computed straight from the formula.
    pub fn linear_attention_quadratic(
        weights: &Weights<f32>,
        prefix: &str,
        x: &Tensor,
    ) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let l = h * w;
        let mut ctx = Infer::new(weights);
        let get = |name: &str| -> Result<Tensor> {
            weights
                .get(name)
                .cloned()
                .ok_or_else(|| crate::error::Error::InvalidArgument(format!("missing weight '{name}'")))
        };
        let qw = get(&format!("{prefix}.q.weight"))?;
        let qb = get(&format!("{prefix}.q.bias"))?;
        let kw = get(&format!("{prefix}.k.weight"))?;
        let kb = get(&format!("{prefix}.k.bias"))?;
        let vw = get(&format!("{prefix}.v.weight"))?;
        let vb = get(&format!("{prefix}.v.bias"))?;
        let q = ctx.conv2d(x, &qw, Some(&qb), 1, 0, 1)?;
        let k = ctx.conv2d(x, &kw, Some(&kb), 1, 0, 1)?;
        let v = ctx.conv2d(x, &vw, Some(&vb), 1, 0, 1)?;

        // Position-major views with unit-normalized q, k.
        let fetch = |t: &Tensor, ni: usize, pos: usize| -> Vec<f64> {
            (0..c)
                .map(|ci| t.data()[((ni * c + ci) * l) + pos] as f64)
                .collect()
        };
        let normalize = |vvec: &mut Vec<f64>| {
            let norm = (vvec.iter().map(|a| a * a).sum::<f64>() + super::L2_EPS).sqrt();
            for a in vvec.iter_mut() {
                *a /= norm;
            }
        };

        let mut out = Tensor::zeros(x.shape());
        let mut all_weights = Vec::new();
        for ni in 0..n {
            let mut ks: Vec<Vec<f64>> = (0..l).map(|p| fetch(&k, ni, p)).collect();
            ks.iter_mut().for_each(normalize);
            let vs: Vec<Vec<f64>> = (0..l).map(|p| fetch(&v, ni, p)).collect();
            let ksum: Vec<f64> = (0..c).map(|ci| ks.iter().map(|kv| kv[ci]).sum()).collect();
            for m in 0..l {
                let mut qm = fetch(&q, ni, m);
                normalize(&mut qm);
                let denom = l as f64 + qm.iter().zip(&ksum).map(|(a, b)| a * b).sum::<f64>();
                let mut row = Vec::with_capacity(l);
                let mut acc = vec![0.0f64; c];
                for (kv, vv) in ks.iter().zip(&vs) {
                    let wmn = (1.0 + qm.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>()) / denom;
                    row.push(wmn);
                    for (a, b) in acc.iter_mut().zip(vv) {
                        *a += wmn * b;
                    }
                }
                for ci in 0..c {
                    out.data_mut()[(ni * c + ci) * l + m] = acc[ci] as f32;
                }
                all_weights.push(row);
            }
        }
        Ok((out, all_weights))
    }
}
