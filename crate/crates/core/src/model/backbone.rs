use rand::Rng;

use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};
use crate::tensor::{invalid, Result, Tensor};

/// Unbiased convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::unbiased(store, &format!("{name}.conv"), group, in_ch, out_ch, kernel, stride, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), group, out_ch),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?.relu())
    }
}

/// Backbone stage outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
    pub f32: Tensor,
}

/// Stand-in backbone: a stride-2 stem, then four stages of two 3x3 convs,
/// the first of each stage with stride 2.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBnRelu,
    pub stages: Vec<[ConvBnRelu; 2]>,
    pub channels: [usize; 4],
}

pub const BACKBONE_PREFIX: &str = "backbone.";

pub fn stage_group(i: usize) -> String {
    format!("backbone.stage{}", i + 1)
}

impl Backbone {
    pub fn new(store: &mut ParamStore, channels: [usize; 4], rng: &mut impl Rng) -> Self {
        let stem = ConvBnRelu::new(store, "backbone.stem", &stage_group(0), 3, channels[0], 3, 2, rng);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = channels[0];
        for (i, &ch) in channels.iter().enumerate() {
            let g = stage_group(i);
            let name = format!("backbone.stage{}", i + 1);
            stages.push([
                ConvBnRelu::new(store, &format!("{name}.a"), &g, in_ch, ch, 3, 2, rng),
                ConvBnRelu::new(store, &format!("{name}.b"), &g, ch, ch, 3, 1, rng),
            ]);
            in_ch = ch;
        }
        Backbone { stem, stages, channels }
    }

    pub fn forward(&self, ctx: &Ctx, image: &Tensor) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) || s[2] == 0 || s[3] == 0 {
            return Err(invalid(
                "backbone",
                format!("expected [B, 3, H, W] with H and W positive multiples of 32, got {s:?}"),
            ));
        }
        let mut x = self.stem.forward(ctx, image)?;
        let mut outs = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = b.forward(ctx, &a.forward(ctx, &x)?)?;
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        let mut next = || it.next().expect("four stages");
        Ok(FeaturePyramid {
            f4: next(),
            f8: next(),
            f16: next(),
            f32: next(),
        })
    }
}
