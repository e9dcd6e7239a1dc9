//! The finite-difference suite: every differentiable op on random inputs,
//! then each model variant's loss terms against sampled coordinates of
//! every parameter they reach.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::data::SceneSpec;
use crate::model::{car_losses, class_logits, Hfgd, ModelConfig, Upsampler};
use crate::nn::{axial_attention, batch_norm_eval, batch_norm_train, bilinear_upsample, conv2d, self_attention};
use crate::nn::{AttentionParams, Ctx, Mode, BN_EPS};
use crate::tensor::{finite_diff_check, finite_diff_check_smooth, graph_reachability, GradCheckReport, Result, Tensor};
use crate::train::{fuzz_batches, loss_terms, LossWeights};
use crate::IGNORE_LABEL;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

struct Gen(Xoshiro256StarStar);

impl Gen {
    fn new(seed: u64) -> Self {
        Gen(Xoshiro256StarStar::seed_from_u64(seed))
    }

    fn t(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(-1.0..1.0)).collect()).expect("shape")
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.0.gen_range(0.1..1.0);
                if self.0.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape, v).expect("shape")
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(0.5..1.5)).collect()).expect("shape")
    }

    fn labels(&mut self, n: usize, classes: u16) -> Vec<u16> {
        (0..n)
            .map(|i| if i % 7 == 3 { IGNORE_LABEL } else { self.0.gen_range(0..classes) })
            .collect()
    }
}

/// Reduces any output to a scalar through a fixed random projection, so
/// every output element contributes a distinct weight.
fn project(y: &Tensor, probe: &Tensor) -> Result<Tensor> {
    Ok(y.mul(probe)?.sum())
}

fn case(out: &mut Vec<GradCheckCase>, name: &str, f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor) -> Result<()> {
    out.push(GradCheckCase {
        name: name.to_string(),
        report: finite_diff_check(f, x, EPS, None)?,
    });
    Ok(())
}

/// One case per op and differentiable argument.
pub fn op_cases(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut g = Gen::new(seed);
    let mut out = Vec::new();

    let (a, b) = (g.t(&[3, 4]), g.t(&[3, 4]));
    let p34 = g.t(&[3, 4]);
    case(&mut out, "add", |x| project(&x.add(&b)?, &p34), &a)?;
    case(&mut out, "sub", |x| project(&b.sub(x)?, &p34), &a)?;
    case(&mut out, "mul", |x| project(&x.mul(&b)?, &p34), &a)?;
    case(&mut out, "mul_self", |x| project(&x.mul(x)?, &p34), &a)?;
    case(&mut out, "scale", |x| project(&x.scale(-1.7), &p34), &a)?;
    case(&mut out, "add_scalar", |x| project(&x.add_scalar(0.3).mul(x)?, &p34), &a)?;
    let kinked = g.off_zero(&[3, 4]);
    case(&mut out, "relu", |x| project(&x.relu(), &p34), &kinked)?;
    case(&mut out, "sum", |x| Ok(x.mul(x)?.sum()), &a)?;
    case(&mut out, "mean", |x| Ok(x.mul(x)?.mean()), &a)?;
    let p62 = g.t(&[6, 2]);
    case(&mut out, "reshape", |x| project(&x.reshape(&[6, 2])?.mul(&x.reshape(&[6, 2])?)?, &p62), &a)?;
    let pp = g.t(&[2, 2, 3, 2]);
    case(&mut out, "permute", |x| project(&x.permute(&[0, 2, 1, 3])?.relu(), &pp), &g.off_zero(&[2, 3, 2, 2]))?;

    let (m, n) = (g.t(&[3, 5]), g.t(&[5, 2]));
    let p32 = g.t(&[3, 2]);
    case(&mut out, "matmul_lhs", |x| project(&x.matmul(&n)?, &p32), &m)?;
    case(&mut out, "matmul_rhs", |x| project(&m.matmul(x)?, &p32), &n)?;
    let (bm, bn) = (g.t(&[2, 3, 4]), g.t(&[2, 4, 2]));
    let pb = g.t(&[2, 3, 2]);
    case(&mut out, "bmm_lhs", |x| project(&x.bmm(&bn)?, &pb), &bm)?;
    case(&mut out, "bmm_rhs", |x| project(&bm.bmm(x)?, &pb), &bn)?;

    let s3 = g.t(&[2, 3, 4]);
    let ps = g.t(&[2, 3, 4]);
    for axis in 0..3 {
        case(&mut out, &format!("softmax_axis{axis}"), |x| project(&x.softmax(axis)?, &ps), &s3)?;
    }
    let logits = g.t(&[7, 4]);
    let labels = g.labels(7, 4);
    case(&mut out, "cross_entropy", |x| x.cross_entropy(&labels, IGNORE_LABEL), &logits)?;
    let rows = g.t(&[4, 3]);
    let pr = g.t(&[4, 3]);
    case(&mut out, "l2_normalize_rows", |x| project(&x.l2_normalize_rows(1e-12)?, &pr), &rows)?;
    let ms = g.t(&[2, 3, 2, 3]);
    let pm = g.t(&[2, 3]);
    case(&mut out, "mean_spatial", |x| project(&x.mean_spatial()?, &pm), &ms)?;

    // conv: stride 1 pad 1 and stride 2 pad 0 with an odd input
    let (cx, cw, cb) = (g.t(&[2, 2, 5, 5]), g.t(&[3, 2, 3, 3]), g.t(&[3]));
    let pc1 = g.t(&[2, 3, 5, 5]);
    case(&mut out, "conv2d_x", |x| project(&conv2d(x, &cw, &cb, 1, 1)?, &pc1), &cx)?;
    case(&mut out, "conv2d_w", |w| project(&conv2d(&cx, w, &cb, 1, 1)?, &pc1), &cw)?;
    case(&mut out, "conv2d_b", |b| project(&conv2d(&cx, &cw, b, 1, 1)?, &pc1), &cb)?;
    let pc2 = g.t(&[2, 3, 2, 2]);
    case(&mut out, "conv2d_strided_x", |x| project(&conv2d(x, &cw, &cb, 2, 0)?, &pc2), &cx)?;
    case(&mut out, "conv2d_strided_w", |w| project(&conv2d(&cx, w, &cb, 2, 0)?, &pc2), &cw)?;

    let (bx, gamma, beta) = (g.t(&[3, 2, 2, 3]), g.positive(&[2]), g.t(&[2]));
    let pbn = g.t(&[3, 2, 2, 3]);
    case(&mut out, "batch_norm_train_x", |x| project(&batch_norm_train(x, &gamma, &beta, BN_EPS)?.0, &pbn), &bx)?;
    case(&mut out, "batch_norm_train_gamma", |gm| project(&batch_norm_train(&bx, gm, &beta, BN_EPS)?.0, &pbn), &gamma)?;
    case(&mut out, "batch_norm_train_beta", |bt| project(&batch_norm_train(&bx, &gamma, bt, BN_EPS)?.0, &pbn), &beta)?;
    let (rm, rv) = ([0.1, -0.2], [0.8, 1.3]);
    case(&mut out, "batch_norm_eval_x", |x| project(&batch_norm_eval(x, &gamma, &beta, &rm, &rv, BN_EPS)?, &pbn), &bx)?;

    let ux = g.t(&[1, 2, 3, 2]);
    let pu = g.t(&[1, 2, 12, 8]);
    case(&mut out, "bilinear_upsample", |x| project(&bilinear_upsample(x, 4)?, &pu), &ux)?;

    let (sx, wq, wk, wv) = (g.t(&[2, 3, 1, 5]), g.t(&[3, 3]), g.t(&[3, 3]), g.t(&[3, 3]));
    let psa = g.t(&[2, 3, 1, 5]);
    let sa = |x: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor| -> Result<Tensor> {
        project(&self_attention(x, &AttentionParams::new(q.clone(), k.clone(), v.clone())?)?, &psa)
    };
    case(&mut out, "self_attention_x", |x| sa(x, &wq, &wk, &wv), &sx)?;
    case(&mut out, "self_attention_wq", |q| sa(&sx, q, &wk, &wv), &wq)?;
    case(&mut out, "self_attention_wk", |k| sa(&sx, &wq, k, &wv), &wk)?;
    case(&mut out, "self_attention_wv", |v| sa(&sx, &wq, &wk, v), &wv)?;
    let ax = g.t(&[1, 3, 3, 4]);
    let (pr_, pc_) = (
        AttentionParams::new(g.t(&[3, 3]), g.t(&[3, 3]), g.t(&[3, 3]))?,
        AttentionParams::new(g.t(&[3, 3]), g.t(&[3, 3]), g.t(&[3, 3]))?,
    );
    let pax = g.t(&[1, 3, 3, 4]);
    case(&mut out, "axial_attention_x", |x| project(&axial_attention(x, &pr_, &pc_)?, &pax), &ax)?;

    let feat = g.t(&[2, 3, 2, 2]);
    let tokens = g.t(&[4, 3]);
    let pl = g.t(&[2, 4, 2, 2]);
    case(&mut out, "class_logits_feat", |f| project(&class_logits(f, &tokens)?, &pl), &feat)?;
    case(&mut out, "class_logits_tokens", |t| project(&class_logits(&feat, t)?, &pl), &tokens)?;
    // the intra term holds centers fixed through a stop-gradient, so only
    // the inter term is compared against plain differences
    let car_labels = vec![0, 1, 1, 2, 0, 2, 2, 1];
    case(&mut out, "car_inter", |f| Ok(car_losses(f, &car_labels, IGNORE_LABEL)?.inter), &feat)?;
    Ok(out)
}

/// The model configurations the suite differentiates end to end.
pub fn model_variants() -> Vec<(&'static str, ModelConfig)> {
    let full = ModelConfig::default();
    vec![
        ("hfgd_full", full.clone()),
        ("hfgd_os2", ModelConfig { target_os: 2, ..full.clone() }),
        (
            "hfgd_no_guidance",
            ModelConfig {
                hfg_guidance_enabled: false,
                ..full.clone()
            },
        ),
        (
            "hfgd_identity_sfpn",
            ModelConfig {
                cae_enabled: false,
                upsampler: Upsampler::Sfpn,
                ..full.clone()
            },
        ),
        ("sfpn_baseline", ModelConfig::sfpn_baseline()),
    ]
}

/// Every index of `0..n` in a fixed stride-permuted order, so the first
/// few candidates spread over the whole tensor.
fn candidate_coords(n: usize) -> Vec<usize> {
    // 7919 is prime, so the stride visits every index when n is not a multiple
    let stride = if n.is_multiple_of(7919) { 1 } else { 7919 % n.max(1) };
    let stride = if stride == 0 { 1 } else { stride };
    let mut seen = vec![false; n];
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for _ in 0..n {
        while seen[i] {
            i = (i + 1) % n;
        }
        seen[i] = true;
        out.push(i);
        i = (i + stride) % n;
    }
    out
}

/// For each loss term of `cfg` and each parameter it reaches without a
/// barrier, compares `coords_per_param` coordinates where the loss is
/// differentiable (no relu switches within eps). One case per (term,
/// parameter); parameters touched through a barrier are skipped.
pub fn model_cases(name: &str, cfg: &ModelConfig, seed: u64, coords_per_param: usize) -> Result<Vec<GradCheckCase>> {
    let (model, store) = Hfgd::new(cfg, seed).map_err(|e| crate::tensor::invalid("gradcheck", e.to_string()))?;
    // 64 px keeps four values per channel in the stride-32 batch norms;
    // at 32 px they normalize a single pixel and curvature dominates
    let spec = SceneSpec {
        image_size: 64,
        num_classes: cfg.num_classes,
        ..SceneSpec::default()
    };
    let batch = fuzz_batches(1, 2, &spec, seed).remove(0);
    let term_of = |store: &crate::nn::ParamStore, which: usize| -> Result<Tensor> {
        let ctx = Ctx::new(store, Mode::Train);
        // build only what the term reads, so the relu trace covers just that
        let w = LossWeights {
            student: if which == 1 { 1.0 } else { 0.0 },
            ..LossWeights::all()
        };
        let t = loss_terms(&model, &ctx, &batch, w)?;
        let picked = [t.teacher, t.student, t.car_inter][which].clone();
        Ok(picked.unwrap_or_else(|| Tensor::scalar(0.0)))
    };
    let mut out = Vec::new();
    for (which, term) in ["teacher_ce", "student_ce", "car_inter"].iter().enumerate() {
        let reference = term_of(&store, which)?;
        let reach = graph_reachability(&reference);
        for (id, entry) in store.entries() {
            let p = &entry.value;
            if !entry.kind.trainable() || !reach.reaches(p) || reach.via_barrier.contains(&p.id()) {
                continue;
            }
            let report = finite_diff_check_smooth(
                |leaf| term_of(&store.with_override(id, leaf.clone()), which),
                p,
                EPS,
                &candidate_coords(p.numel()),
                coords_per_param,
            )?;
            out.push(GradCheckCase {
                name: format!("{name}/{term}/{}", entry.name),
                report,
            });
        }
    }
    Ok(out)
}

/// Ops plus every model variant.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut all = op_cases(seed)?;
    for (name, cfg) in model_variants() {
        all.extend(model_cases(name, &cfg, seed, 3)?);
    }
    Ok(all)
}
