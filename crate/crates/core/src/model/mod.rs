//! The two-branch segmentation network. The teacher is backbone, context
//! encoder and class tokens at stride 32; the student is an FPN-style
//! upsampler that reads backbone and teacher features through
//! stop-gradients and classifies against a frozen view of the same tokens.

mod backbone;
mod car;
mod config;
mod saved;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub use backbone::{stage_group, Backbone, ConvBnRelu, FeaturePyramid, BACKBONE_PREFIX};
pub use car::{car_losses, pixels, CarLosses};
pub use config::{ModelConfig, Upsampler};
pub use saved::{load_model, load_model_config, save_model, SavedModelError, MODEL_CONFIG_FILE};

use crate::config::{ConfigError, KeyValue};
use crate::nn::init::he_normal;
use crate::nn::{bilinear_upsample, AxialAttention, Conv2d, Ctx, ParamKind, ParamStore, SelfAttention};
use crate::tensor::{invalid, ParamId, Result, Tensor, TensorError};
use crate::IGNORE_LABEL;

pub const GROUP_CAE: &str = "cae";
pub const GROUP_TOKENS: &str = "tokens";
pub const GROUP_USFPN: &str = "usfpn";
pub const GROUP_AA: &str = "hfgm_aa";

/// Where the network cuts gradient flow. Each flag places a stop-gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BarrierSet {
    pub lateral4: bool,
    pub lateral8: bool,
    pub lateral16: bool,
    /// Encoder output entering the student's stride-32 branch.
    pub teacher_feat: bool,
    /// Class tokens as seen by the student classifier.
    pub tokens: bool,
    /// Backbone output entering the teacher head (used by the probe runs).
    pub teacher_input: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarrierSite {
    Lateral4,
    Lateral8,
    Lateral16,
    TeacherFeat,
    Tokens,
    TeacherInput,
}

impl BarrierSite {
    /// The sites that separate teacher from student in the default wiring.
    pub const TOPOLOGY: [BarrierSite; 5] = [
        BarrierSite::Lateral4,
        BarrierSite::Lateral8,
        BarrierSite::Lateral16,
        BarrierSite::TeacherFeat,
        BarrierSite::Tokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BarrierSite::Lateral4 => "lateral_os4",
            BarrierSite::Lateral8 => "lateral_os8",
            BarrierSite::Lateral16 => "lateral_os16",
            BarrierSite::TeacherFeat => "teacher_feat",
            BarrierSite::Tokens => "student_tokens",
            BarrierSite::TeacherInput => "teacher_input",
        }
    }
}

impl BarrierSet {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let s = cfg.lateral_stop_grad_enabled;
        BarrierSet {
            lateral4: s,
            lateral8: s,
            lateral16: s,
            teacher_feat: s,
            tokens: true,
            teacher_input: false,
        }
    }

    fn flag(&mut self, site: BarrierSite) -> &mut bool {
        match site {
            BarrierSite::Lateral4 => &mut self.lateral4,
            BarrierSite::Lateral8 => &mut self.lateral8,
            BarrierSite::Lateral16 => &mut self.lateral16,
            BarrierSite::TeacherFeat => &mut self.teacher_feat,
            BarrierSite::Tokens => &mut self.tokens,
            BarrierSite::TeacherInput => &mut self.teacher_input,
        }
    }

    pub fn with(mut self, site: BarrierSite, on: bool) -> Self {
        *self.flag(site) = on;
        self
    }

    pub fn none() -> Self {
        BarrierSet {
            lateral4: false,
            lateral8: false,
            lateral16: false,
            teacher_feat: false,
            tokens: false,
            teacher_input: false,
        }
    }
}

fn cut(x: &Tensor, on: bool) -> Tensor {
    if on {
        x.stop_gradient()
    } else {
        x.clone()
    }
}

/// Context-augmented encoder on the stride-32 map, or a single 1x1 conv
/// when disabled.
#[derive(Clone, Debug)]
pub enum Encoder {
    Identity(Conv2d),
    Cae {
        wide: ConvBnRelu,
        reduce: Conv2d,
        attn: SelfAttention,
        trailing: ConvBnRelu,
    },
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, in_ch: usize, rng: &mut Xoshiro256StarStar) -> Self {
        let d = cfg.d_final();
        if !cfg.cae_enabled {
            return Encoder::Identity(Conv2d::new(store, "cae.proj", GROUP_CAE, in_ch, d, 1, 1, rng));
        }
        let (wide, mid) = (cfg.cae_wide(), cfg.cae_mid());
        Encoder::Cae {
            wide: ConvBnRelu::new(store, "cae.wide", GROUP_CAE, in_ch, wide, 1, 1, rng),
            reduce: Conv2d::new(store, "cae.reduce", GROUP_CAE, wide, mid, 1, 1, rng),
            attn: SelfAttention::new(store, "cae.attn", GROUP_CAE, mid, mid, rng),
            trailing: ConvBnRelu::new(store, "cae.trailing", GROUP_CAE, mid, d, 1, 1, rng),
        }
    }

    /// Returns the teacher feature and, for the full encoder, the attention
    /// output the regularizers act on.
    fn forward(&self, ctx: &Ctx, f32: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Encoder::Identity(conv) => Ok((conv.forward(ctx, f32)?, None)),
            Encoder::Cae {
                wide,
                reduce,
                attn,
                trailing,
            } => {
                let r = reduce.forward(ctx, &wide.forward(ctx, f32)?)?;
                let a = r.add(&attn.forward(ctx, &r)?)?;
                Ok((trailing.forward(ctx, &a)?, Some(a)))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    lead: Conv2d,
    blocks: Vec<ConvBnRelu>,
}

/// FPN-style upsampler producing the student feature at `target_os`.
#[derive(Clone, Debug)]
pub struct Usfpn {
    branches: Vec<Branch>,
    merge: ConvBnRelu,
    aa: Option<AxialAttention>,
}

impl Usfpn {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Xoshiro256StarStar) -> Self {
        let [c4, c8, c16, _] = cfg.backbone_stage_channels;
        let ch = cfg.fpn_channels();
        let lead_k = match cfg.upsampler {
            Upsampler::Sfpn => 1,
            Upsampler::Usfpn => 3,
        };
        let inputs = [(4, c4), (8, c8), (16, c16), (32, cfg.d_final())];
        let branches = inputs
            .iter()
            .map(|&(os, in_ch)| {
                let name = format!("usfpn.os{os}");
                let lead = Conv2d::new(store, &format!("{name}.lead"), GROUP_USFPN, in_ch, ch, lead_k, 1, rng);
                let n = (os / cfg.target_os).trailing_zeros() as usize;
                let blocks = (0..n)
                    .map(|i| ConvBnRelu::new(store, &format!("{name}.block{i}"), GROUP_USFPN, ch, ch, 3, 1, rng))
                    .collect();
                Branch { lead, blocks }
            })
            .collect();
        let merge = ConvBnRelu::new(store, "usfpn.merge", GROUP_USFPN, ch, cfg.d_final(), 3, 1, rng);
        let aa = cfg
            .hfgm_aa_enabled
            .then(|| AxialAttention::new(store, "hfgm_aa", GROUP_AA, cfg.d_final(), rng));
        Usfpn { branches, merge, aa }
    }

    /// `inputs` are the four branch inputs at strides 4, 8, 16, 32.
    fn forward(&self, ctx: &Ctx, inputs: [&Tensor; 4]) -> Result<Tensor> {
        let mut sum: Option<Tensor> = None;
        for (branch, x) in self.branches.iter().zip(inputs) {
            let mut y = branch.lead.forward(ctx, x)?;
            for block in &branch.blocks {
                y = bilinear_upsample(&block.forward(ctx, &y)?, 2)?;
            }
            sum = Some(match sum {
                None => y,
                Some(s) => s.add(&y)?,
            });
        }
        let merged = self.merge.forward(ctx, &sum.expect("four branches"))?;
        match &self.aa {
            Some(aa) => aa.forward(ctx, &merged),
            None => Ok(merged),
        }
    }
}

/// Per-pixel inner products with each class token: `[B, d, h, w] x [C, d] -> [B, C, h, w]`.
pub fn class_logits(feat: &Tensor, tokens: &Tensor) -> Result<Tensor> {
    if feat.ndim() != 4 || tokens.ndim() != 2 || feat.shape()[1] != tokens.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "class_logits",
            lhs: feat.shape().to_vec(),
            rhs: tokens.shape().to_vec(),
        });
    }
    let s = feat.shape();
    let (b, h, w, c) = (s[0], s[2], s[3], tokens.shape()[0]);
    pixels(feat)?
        .matmul(&tokens.permute(&[1, 0])?)?
        .reshape(&[b, h, w, c])?
        .permute(&[0, 3, 1, 2])
}

/// `[B, C, H, W]` logits as `[B*H*W, C]` rows, matching row-major label order.
pub fn logit_rows(logits: &Tensor) -> Result<Tensor> {
    pixels(logits)
}

/// Nearest-neighbour label subsampling by `factor`, sampling the source
/// pixel `i * factor + factor / 2`.
pub fn downsample_labels(labels: &[u16], b: usize, h: usize, w: usize, factor: usize) -> Vec<u16> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(b * oh * ow);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                out.push(labels[(bi * h + y * factor + factor / 2) * w + x * factor + factor / 2]);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub pyramid: FeaturePyramid,
    pub teacher_feat: Tensor,
    /// `[B, C, H/32, W/32]`.
    pub teacher_logits: Tensor,
    pub car: Option<CarLosses>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub teacher_logits: Tensor,
    /// Full input resolution.
    pub student_logits: Tensor,
    pub teacher_feat: Tensor,
    pub student_feat: Tensor,
    pub car: Option<CarLosses>,
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Hfgd {
    pub cfg: ModelConfig,
    pub barriers: BarrierSet,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub tokens: ParamId,
    pub usfpn: Usfpn,
    /// Independent student classifier used when guidance is off.
    pub student_head: Option<Conv2d>,
}

impl Hfgd {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> std::result::Result<(Hfgd, ParamStore), ConfigError> {
        cfg.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone_stage_channels, &mut rng);
        let encoder = Encoder::new(&mut store, cfg, cfg.backbone_stage_channels[3], &mut rng);
        let (c, d) = (cfg.num_classes, cfg.d_final());
        let tokens = store.register(
            "tokens",
            GROUP_TOKENS,
            ParamKind::NoDecay,
            &[c, d],
            he_normal(&mut rng, c * d, d, 1.0),
        );
        let usfpn = Usfpn::new(&mut store, cfg, &mut rng);
        let student_head = (!cfg.hfg_guidance_enabled)
            .then(|| Conv2d::new(&mut store, "usfpn.classifier", GROUP_USFPN, d, c, 1, 1, &mut rng));
        let model = Hfgd {
            cfg: cfg.clone(),
            barriers: BarrierSet::from_config(cfg),
            backbone,
            encoder,
            tokens,
            usfpn,
            student_head,
        };
        Ok((model, store))
    }

    /// Teacher path only. `car_labels` are stride-32 labels; they are
    /// required in train mode when the encoder and regularizers are on.
    pub fn forward_teacher(&self, ctx: &Ctx, image: &Tensor, car_labels: Option<&[u16]>) -> Result<TeacherOutput> {
        let pyramid = self.backbone.forward(ctx, image)?;
        let top = cut(&pyramid.f32, self.barriers.teacher_input);
        let (teacher_feat, attn) = self.encoder.forward(ctx, &top)?;
        let teacher_logits = class_logits(&teacher_feat, &ctx.param(self.tokens))?;
        let car = match (attn, car_labels) {
            (Some(a), Some(l)) => Some(car_losses(&a, l, IGNORE_LABEL)?),
            (Some(_), None) if ctx.training() && self.cfg.car_weight > 0.0 => {
                return Err(invalid("cae_forward", "regularizer labels are required in train mode"));
            }
            _ => None,
        };
        Ok(TeacherOutput {
            pyramid,
            teacher_feat,
            teacher_logits,
            car,
        })
    }

    pub fn forward(&self, ctx: &Ctx, image: &Tensor, car_labels: Option<&[u16]>) -> Result<ModelOutput> {
        let t = self.forward_teacher(ctx, image, car_labels)?;
        let bs = self.barriers;
        let p = &t.pyramid;
        let inputs = [
            cut(&p.f4, bs.lateral4),
            cut(&p.f8, bs.lateral8),
            cut(&p.f16, bs.lateral16),
            cut(&t.teacher_feat, bs.teacher_feat),
        ];
        let student_feat = self.usfpn.forward(ctx, [&inputs[0], &inputs[1], &inputs[2], &inputs[3]])?;
        let logits = match &self.student_head {
            Some(head) => head.forward(ctx, &student_feat)?,
            None => class_logits(&student_feat, &cut(&ctx.param(self.tokens), bs.tokens))?,
        };
        let student_logits = bilinear_upsample(&logits, self.cfg.target_os)?;
        Ok(ModelOutput {
            teacher_logits: t.teacher_logits,
            student_logits,
            teacher_feat: t.teacher_feat,
            student_feat,
            car: t.car,
        })
    }
}

/// Cosine similarity between class tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSimilarity {
    pub classes: usize,
    /// Row-major `C x C`.
    pub matrix: Vec<f64>,
    /// Tokens with zero norm; their rows and columns are defined as 0.
    pub zero_norm: Vec<usize>,
}

pub fn token_similarity_matrix(tokens: &Tensor) -> Result<TokenSimilarity> {
    if tokens.ndim() != 2 {
        return Err(invalid("token_similarity_matrix", format!("expected [C, d], got {:?}", tokens.shape())));
    }
    let (c, d) = (tokens.shape()[0], tokens.shape()[1]);
    let t = tokens.data();
    let norms: Vec<f64> = (0..c)
        .map(|i| t[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_norm: Vec<usize> = (0..c).filter(|&i| norms[i] == 0.0).collect();
    let mut matrix = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = (0..d).map(|k| t[i * d + k] * t[j * d + k]).sum();
                matrix[i * c + j] = if i == j { 1.0 } else { dot / (norms[i] * norms[j]) };
            }
        }
    }
    Ok(TokenSimilarity {
        classes: c,
        matrix,
        zero_norm,
    })
}
