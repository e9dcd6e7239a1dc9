use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::config::{poly_lr, TrainConfig};
use super::metrics::{argmax_classes, Confusion, EvalResult};
use super::sgd::Sgd;
use crate::data::{make_batch, Batch, Dataset};
use crate::model::{downsample_labels, logit_rows, Hfgd};
use crate::nn::{bilinear_upsample, Ctx, Mode, ParamStore};
use crate::par;
use crate::tensor::{backward, invalid, no_grad, Result, Tensor};
use crate::IGNORE_LABEL;

/// Unweighted loss terms of one forward pass. A term is `None` when its
/// weight is zero (it is then never built) or the configuration lacks it.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub teacher: Option<Tensor>,
    pub student: Option<Tensor>,
    pub car_intra: Option<Tensor>,
    pub car_inter: Option<Tensor>,
}

/// Which loss terms to build.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub teacher: f64,
    pub student: f64,
    pub car: f64,
}

impl LossWeights {
    pub fn new(model: &Hfgd, cfg: &TrainConfig) -> Self {
        LossWeights {
            teacher: cfg.lambda_teacher,
            student: cfg.lambda_student,
            car: model.cfg.car_weight,
        }
    }

    pub fn all() -> Self {
        LossWeights {
            teacher: 1.0,
            student: 1.0,
            car: 1.0,
        }
    }
}

pub const OS_TEACHER: usize = 32;

pub fn loss_terms(model: &Hfgd, ctx: &Ctx, batch: &Batch, w: LossWeights) -> Result<LossTerms> {
    let (b, s) = (batch.len(), batch.size);
    let small = downsample_labels(&batch.labels, b, s, s, OS_TEACHER);
    let want_car = w.car > 0.0 && model.cfg.cae_enabled;
    let car_labels = want_car.then_some(small.as_slice());
    let mut terms = LossTerms::default();
    let (teacher_logits, student_logits, car) = if w.student > 0.0 {
        let out = model.forward(ctx, &batch.images, car_labels)?;
        (out.teacher_logits, Some(out.student_logits), out.car)
    } else {
        let t = model.forward_teacher(ctx, &batch.images, car_labels)?;
        (t.teacher_logits, None, t.car)
    };
    if w.teacher > 0.0 {
        terms.teacher = Some(ce_or_zero(&teacher_logits, &small)?);
    }
    if let Some(sl) = student_logits {
        terms.student = Some(ce_or_zero(&sl, &batch.labels)?);
    }
    if let (true, Some(car)) = (want_car, car) {
        terms.car_intra = Some(car.intra);
        terms.car_inter = Some(car.inter);
    }
    Ok(terms)
}

/// Cross entropy over non-ignored pixels; a fully ignored batch gives a
/// constant zero instead of an error.
fn ce_or_zero(logits: &Tensor, labels: &[u16]) -> Result<Tensor> {
    if labels.iter().all(|&l| l == IGNORE_LABEL) {
        return Ok(Tensor::scalar(0.0));
    }
    logit_rows(logits)?.cross_entropy(labels, IGNORE_LABEL)
}

impl LossTerms {
    pub fn total(&self, w: LossWeights) -> Result<Tensor> {
        let mut parts = Vec::new();
        if let Some(t) = &self.teacher {
            parts.push(t.scale(w.teacher));
        }
        if let Some(t) = &self.student {
            parts.push(t.scale(w.student));
        }
        for t in [&self.car_intra, &self.car_inter].into_iter().flatten() {
            parts.push(t.scale(w.car));
        }
        let mut it = parts.into_iter();
        let mut total = it.next().ok_or_else(|| invalid("train_step", "every loss weight is zero"))?;
        for p in it {
            total = total.add(&p)?;
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub teacher: Option<f64>,
    pub student: Option<f64>,
    pub car_intra: Option<f64>,
    pub car_inter: Option<f64>,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "step,lr,total,teacher,student,car_intra,car_inter";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{:.17e},{},{},{},{}",
            self.step,
            self.lr,
            self.total,
            f(self.teacher),
            f(self.student),
            f(self.car_intra),
            f(self.car_inter)
        )
    }
}

/// Training state: the model, its parameters, optimizer and data cursor.
pub struct Trainer {
    pub model: Hfgd,
    pub store: ParamStore,
    pub cfg: TrainConfig,
    pub sgd: Sgd,
    pub step: usize,
    rng: Xoshiro256StarStar,
    order: Vec<usize>,
    cursor: usize,
}

/// Offset separating the data-order stream from the initialization stream.
const DATA_STREAM: u64 = 0x5eed_da7a;

impl Trainer {
    pub fn new(model: Hfgd, store: ParamStore, cfg: TrainConfig) -> Self {
        Trainer {
            model,
            store,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng: Xoshiro256StarStar::seed_from_u64(cfg.seed ^ DATA_STREAM),
            cfg,
            step: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// The next minibatch: samples in a reshuffled order each epoch, each
    /// flipped with probability 1/2 when augmentation is on.
    pub fn next_batch(&mut self, data: &Dataset) -> Batch {
        let n = data.len();
        let mut picked = Vec::with_capacity(self.cfg.batch_size);
        let mut flips = Vec::with_capacity(self.cfg.batch_size);
        while picked.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(&data.samples[self.order[self.cursor]]);
            self.cursor += 1;
            flips.push(self.cfg.flip_augment && self.rng.gen_bool(0.5));
        }
        make_batch(&picked, &flips)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let lr = poly_lr(self.step, &self.cfg);
        let w = LossWeights::new(&self.model, &self.cfg);
        let ctx = Ctx::new(&self.store, Mode::Train);
        let terms = loss_terms(&self.model, &ctx, batch, w)?;
        let total = terms.total(w)?;
        let record = StepLosses {
            step: self.step,
            lr,
            total: total.item(),
            teacher: terms.teacher.as_ref().map(Tensor::item),
            student: terms.student.as_ref().map(Tensor::item),
            car_intra: terms.car_intra.as_ref().map(Tensor::item),
            car_inter: terms.car_inter.as_ref().map(Tensor::item),
        };
        drop(terms);
        let grads = backward(&total, &self.store.trainable())?;
        let updates = ctx.take_updates();
        drop(ctx);
        self.store.apply_stat_updates(updates);
        self.sgd.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs the remaining steps, calling `on_step` after each one.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&Trainer, &StepLosses)) -> Result<()> {
        if data.is_empty() {
            return Err(invalid("train", "training set is empty"));
        }
        while self.step < self.cfg.total_iters {
            let batch = self.next_batch(data);
            let rec = self.train_step(&batch)?;
            on_step(self, &rec);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Student,
    /// Stride-32 teacher logits, bilinearly upsampled to full resolution.
    Teacher,
}

pub const EVAL_BATCH: usize = 16;

/// Predicted label maps for `images: [B, 3, H, W]` in eval mode.
pub fn predict(model: &Hfgd, store: &ParamStore, images: &Tensor, head: Head) -> Result<Vec<u16>> {
    no_grad(|| {
        let ctx = Ctx::new(store, Mode::Eval);
        let logits = match head {
            Head::Student => model.forward(&ctx, images, None)?.student_logits,
            Head::Teacher => {
                let t = model.forward_teacher(&ctx, images, None)?;
                bilinear_upsample(&t.teacher_logits, OS_TEACHER)?
            }
        };
        argmax_classes(&logits)
    })
}

/// Single-scale evaluation over a dataset; batches run in parallel when
/// enabled and their confusions are merged in batch order.
pub fn evaluate(model: &Hfgd, store: &ParamStore, data: &Dataset, head: Head) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(invalid("evaluate", "dataset is empty"));
    }
    let c = model.cfg.num_classes;
    let chunks: Vec<&[crate::data::SegSample]> = data.samples.chunks(EVAL_BATCH).collect();
    let parts = par::map(chunks.len(), |i| -> Result<Confusion> {
        let refs: Vec<_> = chunks[i].iter().collect();
        let batch = make_batch(&refs, &[]);
        let pred = predict(model, store, &batch.images, head)?;
        let mut conf = Confusion::new(c);
        conf.add(&pred, &batch.labels);
        Ok(conf)
    });
    let mut total = Confusion::new(c);
    for p in parts {
        total.merge(&p?);
    }
    Ok(EvalResult::from_confusion(total))
}
