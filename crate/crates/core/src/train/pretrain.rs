//! Backbone pretraining on a whole-image classification task (majority
//! foreground class), the desk-scale stand-in for large-scale pretraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use super::config::{poly_lr, TrainConfig};
use crate::config::{parse_value, ConfigError, KeyValue};
use super::sgd::Sgd;
use crate::data::{classification_view, generate_sample, SceneSpec};
use crate::model::{Backbone, BACKBONE_PREFIX};
use crate::nn::init::he_normal;
use crate::nn::{Checkpoint, Ctx, Mode, ParamKind, ParamStore};
use crate::tensor::{backward, no_grad, ParamId, Result, Tensor};
use crate::IGNORE_LABEL;

/// Seed range of classification scenes, far from segmentation seeds.
pub const PRETRAIN_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub samples: usize,
    pub eval_samples: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
}

const KEYS: &[(&str, &str)] = &[
    ("samples", "classification scenes to train on"),
    ("eval_samples", "held-out scenes for the accuracy report"),
    ("iters", "SGD steps"),
    ("batch_size", "scenes per step"),
    ("lr0", "initial learning rate (poly decay)"),
    ("seed", "seed for initialization, scenes and order"),
];

impl KeyValue for PretrainConfig {
    fn key_docs() -> &'static [(&'static str, &'static str)] {
        KEYS
    }

    fn set(&mut self, key: &str, value: &str) -> crate::config::Result<()> {
        match key {
            "samples" => self.samples = parse_value(key, value)?,
            "eval_samples" => self.eval_samples = parse_value(key, value)?,
            "iters" => self.iters = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Self::unknown(key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("samples", self.samples.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("iters", self.iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", self.lr0.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> crate::config::Result<()> {
        if self.samples == 0 || self.eval_samples == 0 || self.iters == 0 {
            return Err(ConfigError::Invalid("samples, eval_samples and iters must be positive".into()));
        }
        if self.batch_size < 4 {
            return Err(ConfigError::Invalid("batch_size must be at least 4 for batch statistics".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(ConfigError::Invalid("lr0 must be positive".into()));
        }
        Ok(())
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            samples: 1024,
            eval_samples: 256,
            iters: 1500,
            batch_size: 16,
            lr0: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Accuracy of always answering the most frequent eval label.
    pub majority_baseline: f64,
    pub chance: f64,
    pub checkpoint: Checkpoint,
}

struct Classifier {
    backbone: Backbone,
    weight: ParamId,
    bias: ParamId,
}

impl Classifier {
    fn logits(&self, ctx: &Ctx, images: &Tensor) -> Result<Tensor> {
        let f = self.backbone.forward(ctx, images)?.f32.mean_spatial()?;
        let logits = f.matmul(&ctx.param(self.weight))?;
        let bias = ctx.param(self.bias);
        // broadcast the bias over rows through an outer product with ones
        let ones = Tensor::full(&[logits.shape()[0], 1], 1.0);
        logits.add(&ones.matmul(&bias.reshape(&[1, bias.numel()])?)?)
    }
}

/// Classification scenes `(image, label)` for seeds starting at `base`,
/// skipping background-only draws.
pub fn classification_set(n: usize, base: u64, spec: &SceneSpec) -> Vec<(Vec<f64>, u16)> {
    let mut out = Vec::with_capacity(n);
    let mut seed = base;
    while out.len() < n {
        if let Ok(v) = classification_view(&generate_sample(seed, spec), spec.num_classes) {
            out.push(v);
        }
        seed += 1;
    }
    out
}

fn stack(items: &[&(Vec<f64>, u16)], s: usize) -> (Tensor, Vec<u16>) {
    let mut data = Vec::with_capacity(items.len() * 3 * s * s);
    for (img, _) in items {
        data.extend_from_slice(img);
    }
    let labels = items.iter().map(|(_, l)| *l).collect();
    (Tensor::new(&[items.len(), 3, s, s], data).expect("stacked"), labels)
}

fn accuracy(model: &Classifier, store: &ParamStore, set: &[(Vec<f64>, u16)], s: usize) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in set.chunks(32) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, y) = stack(&refs, s);
        let logits = no_grad(|| model.logits(&Ctx::new(store, Mode::Eval), &x))?;
        let c = logits.shape()[1];
        for (i, &label) in y.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            correct += (best == label as usize) as usize;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains backbone + global average pool + linear classifier and returns
/// the backbone parameters (names prefixed `backbone.`).
pub fn pretrain_backbone(channels: [usize; 4], spec: &SceneSpec, cfg: &PretrainConfig) -> Result<PretrainReport> {
    let c = spec.num_classes;
    let s = spec.image_size;
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, channels, &mut rng);
    let d = channels[3];
    let weight = store.register("cls.weight", "cls", ParamKind::Weight, &[d, c], he_normal(&mut rng, d * c, d, 1.0));
    let bias = store.register("cls.bias", "cls", ParamKind::Weight, &[c], vec![0.0; c]);
    let model = Classifier { backbone, weight, bias };

    let base = PRETRAIN_SEED_BASE + cfg.seed.wrapping_mul(1 << 20);
    let train = classification_set(cfg.samples, base, spec);
    let eval = classification_set(cfg.eval_samples, base + (1 << 19), spec);

    let sched = TrainConfig {
        total_iters: cfg.iters,
        lr0: cfg.lr0,
        ..TrainConfig::default()
    };
    let mut sgd = Sgd::new(sched.momentum, sched.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.iters {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if cursor >= order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (x, y) = stack(&picked, s);
        let ctx = Ctx::new(&store, Mode::Train);
        let loss = model.logits(&ctx, &x)?.cross_entropy(&y, IGNORE_LABEL)?;
        let grads = backward(&loss, &store.trainable())?;
        let updates = ctx.take_updates();
        drop(ctx);
        store.apply_stat_updates(updates);
        sgd.step(&mut store, &grads, poly_lr(step, &sched))?;
    }

    let mut freq = vec![0usize; c];
    for (_, l) in &eval {
        freq[*l as usize] += 1;
    }
    Ok(PretrainReport {
        train_accuracy: accuracy(&model, &store, &train, s)?,
        eval_accuracy: accuracy(&model, &store, &eval, s)?,
        majority_baseline: *freq.iter().max().unwrap_or(&0) as f64 / eval.len().max(1) as f64,
        chance: 1.0 / c as f64,
        checkpoint: Checkpoint::from_store(&store, BACKBONE_PREFIX),
    })
}
