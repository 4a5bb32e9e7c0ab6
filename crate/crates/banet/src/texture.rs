//! Texture path: four conv+BN+ReLU layers producing the textural feature at
//! 1/8 resolution. Kernels 7/3/3/1, strides 2/2/2/1, paddings 3/1/1/0 so
//! even inputs halve exactly.

use crate::error::{ensure, Result};
use crate::nn::{conv_bn_relu, Ctx};

pub fn texture_forward<C: Ctx>(
    ctx: &mut C,
    image: &C::V,
    channels: (usize, usize),
) -> Result<C::V> {
    let s = ctx.shape(image);
    ensure!(
        s.len() == 4 && s[2] % 8 == 0 && s[3] % 8 == 0,
        "texture path input {:?} must have H, W divisible by 8",
        s
    );
    let (mid, out) = channels;
    let y = conv_bn_relu(ctx, "texture.t1", image, mid, 7, 2, 3)?;
    let y = conv_bn_relu(ctx, "texture.t2", &y, mid, 3, 2, 1)?;
    let y = conv_bn_relu(ctx, "texture.t3", &y, mid, 3, 2, 1)?;
    conv_bn_relu(ctx, "texture.t4", &y, out, 1, 1, 0)
}
