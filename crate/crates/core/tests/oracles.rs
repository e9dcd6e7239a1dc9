use hfgd::nn::conv2d;
use hfgd::tensor::Tensor;
use hfgd::train::{Confusion, EvalResult};
use hfgd::IGNORE_LABEL;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const INSTANCES: u64 = 120;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
    let mut out = Vec::with_capacity(b * o * oh * ow);
    for bi in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let y = (i * stride + di) as i64 - pad as i64;
                                let xx = (j * stride + dj) as i64 - pad as i64;
                                if y < 0 || xx < 0 || y >= h as i64 || xx >= wd as i64 {
                                    continue;
                                }
                                acc += xd[((bi * c + ic) * h + y as usize) * wd + xx as usize]
                                    * wdat[((oc * c + ic) * k + di) * k + dj];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![b, o, oh, ow], out)
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..INSTANCES {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k.max(2)..10);
        let w = rng.gen_range(k.max(2)..10);
        let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
        let x = random(&mut rng, &[b, c, h, w]);
        let wt = random(&mut rng, &[o, c, k, k]);
        let bias = random(&mut rng, &[o]);
        let y = conv2d(&x, &wt, &bias, stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &wt, &bias, stride, pad);
        assert_eq!(y.shape(), shape.as_slice());
        for (a, e) in y.data().iter().zip(&want) {
            worst = worst.max((a - e).abs());
        }
    }
    assert!(worst <= 1e-12, "max abs diff {worst:e}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(8);
    let mut worst = 0.0_f64;
    for _ in 0..INSTANCES {
        let (m, k, n) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40));
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                worst = worst.max((y.data()[i * n + j] - acc).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "max abs diff {worst:e}");
}

/// Per-class IoU from pixel sets, counted directly.
fn brute_force_miou(pred: &[u16], gt: &[u16], classes: usize) -> (Vec<Option<f64>>, f64) {
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE_LABEL).collect();
    let per: Vec<Option<f64>> = (0..classes as u16)
        .map(|c| {
            let inter = valid.iter().filter(|&&i| pred[i] == c && gt[i] == c).count();
            let union = valid.iter().filter(|&&i| pred[i] == c || gt[i] == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len().max(1) as f64;
    (per, miou)
}

#[test]
fn miou_matches_brute_force_counting() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(9);
    for _ in 0..INSTANCES {
        let classes = rng.gen_range(2..8);
        let n = rng.gen_range(1..300);
        let pred: Vec<u16> = (0..n).map(|_| rng.gen_range(0..classes as u16)).collect();
        let gt: Vec<u16> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    // skew towards low classes so some classes go missing
                    let top = rng.gen_range(1..=classes as u16);
                    rng.gen_range(0..top)
                }
            })
            .collect();
        // split across two confusions to exercise merge
        let cut = rng.gen_range(0..=n);
        let mut a = Confusion::new(classes);
        a.add(&pred[..cut], &gt[..cut]);
        let mut b = Confusion::new(classes);
        b.add(&pred[cut..], &gt[cut..]);
        a.merge(&b);
        let r = EvalResult::from_confusion(a);
        let (per, miou) = brute_force_miou(&pred, &gt, classes);
        assert_eq!(r.per_class_iou, per);
        assert_eq!(r.miou, miou);
    }
}
