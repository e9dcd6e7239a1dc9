use crate::tensor::{invalid, Result, Tensor};
use crate::IGNORE_LABEL;

/// Per-pixel argmax over the class axis of `[B, C, H, W]` logits; ties
/// resolve to the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u16>> {
    if logits.ndim() != 4 {
        return Err(invalid("argmax_classes", format!("expected [B, C, H, W], got {:?}", logits.shape())));
    }
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = x[bi * c * hw + p];
            for k in 1..c {
                let v = x[(bi * c + k) * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best as u16);
        }
    }
    Ok(out)
}

/// Confusion counts, rows indexed by ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds every non-ignored pixel. Ground-truth labels outside the class
    /// range are treated as ignored.
    pub fn add(&mut self, pred: &[u16], gt: &[u16]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL || g as usize >= self.classes {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub confusion: Confusion,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
}

impl EvalResult {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let c = confusion.classes;
        let mut per_class_iou = Vec::with_capacity(c);
        let (mut correct, mut total) = (0u64, 0u64);
        for k in 0..c {
            let tp = confusion.at(k, k);
            let gt: u64 = (0..c).map(|j| confusion.at(k, j)).sum();
            let pred: u64 = (0..c).map(|j| confusion.at(j, k)).sum();
            let union = gt + pred - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
            correct += tp;
            total += gt;
        }
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let pixel_acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        EvalResult {
            confusion,
            per_class_iou,
            miou,
            pixel_acc,
        }
    }
}
