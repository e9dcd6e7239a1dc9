//! Class-aware regularizer pair on an encoder feature map: pull pixels
//! towards their class center, push distinct centers apart.

use crate::tensor::{invalid, Result, Tensor, TensorError};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CarLosses {
    /// Mean over labeled pixels of `1 - cos(pixel, center)`, centers held fixed.
    pub intra: Tensor,
    /// Mean over ordered pairs of distinct present classes of `max(0, cos)`.
    pub inter: Tensor,
}

/// `[B, d, h, w]` to `[B*h*w, d]`, pixel-major.
pub fn pixels(feat: &Tensor) -> Result<Tensor> {
    if feat.ndim() != 4 {
        return Err(invalid("pixels", format!("expected [B, C, H, W], got {:?}", feat.shape())));
    }
    let s = feat.shape();
    feat.permute(&[0, 2, 3, 1])?.reshape(&[s[0] * s[2] * s[3], s[1]])
}

pub fn car_losses(feat: &Tensor, labels: &[u16], ignore: u16) -> Result<CarLosses> {
    let pix = pixels(feat)?;
    let n = pix.shape()[0];
    if labels.len() != n {
        return Err(invalid("car_losses", format!("{} labels for {n} pixels", labels.len())));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore).collect();
    if kept.is_empty() {
        return Err(TensorError::EmptyLoss);
    }
    let mut classes: Vec<u16> = kept.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    let (p, k) = (kept.len(), classes.len());
    let slot = |label: u16| classes.binary_search(&label).expect("present class");

    // row selection of labeled pixels, then class membership
    let mut select = vec![0.0; p * n];
    let mut member = vec![0.0; p * k];
    let mut counts = vec![0usize; k];
    for (r, &i) in kept.iter().enumerate() {
        select[r * n + i] = 1.0;
        let c = slot(labels[i]);
        member[r * k + c] = 1.0;
        counts[c] += 1;
    }
    let mut average = vec![0.0; k * p];
    for r in 0..p {
        for c in 0..k {
            if member[r * k + c] != 0.0 {
                average[c * p + r] = 1.0 / counts[c] as f64;
            }
        }
    }
    let sel = Tensor::new(&[p, n], select)?.matmul(&pix)?;
    let centers = Tensor::new(&[k, p], average)?.matmul(&sel)?;

    let member = Tensor::new(&[p, k], member)?;
    let fixed = centers.stop_gradient().l2_normalize_rows(NORM_EPS)?;
    let cos = sel.l2_normalize_rows(NORM_EPS)?.mul(&member.matmul(&fixed)?)?.sum();
    let intra = cos.scale(-1.0 / p as f64).add_scalar(1.0);

    let inter = if k < 2 {
        Tensor::scalar(0.0)
    } else {
        let hat = centers.l2_normalize_rows(NORM_EPS)?;
        let sim = hat.matmul(&hat.permute(&[1, 0])?)?.relu();
        let off_diag: Vec<f64> = (0..k * k).map(|i| if i / k == i % k { 0.0 } else { 1.0 }).collect();
        sim.mul(&Tensor::new(&[k, k], off_diag)?)?.sum().scale(1.0 / (k * (k - 1)) as f64)
    };
    Ok(CarLosses { intra, inter })
}

#[cfg(test)]
mod tests {
    use super::*;

    const IGNORE: u16 = 255;

    /// `[1, d, h, w]` from pixel-major vectors.
    fn map(h: usize, w: usize, px: &[[f64; 2]]) -> Tensor {
        let mut data = vec![0.0; 2 * h * w];
        for (i, v) in px.iter().enumerate() {
            data[i] = v[0];
            data[h * w + i] = v[1];
        }
        Tensor::new(&[1, 2, h, w], data).unwrap()
    }

    #[test]
    fn pixels_at_their_centers() {
        let f = map(2, 2, &[[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [0.0, 2.0]]);
        let l = car_losses(&f, &[1, 1, 2, 2], IGNORE).unwrap();
        assert!(l.intra.item().abs() < 1e-12);
        // orthogonal centers
        assert!(l.inter.item().abs() < 1e-12);
    }

    #[test]
    fn hand_computed_2x2() {
        // class 1: (1,0) and (0,1) -> center (0.5,0.5); class 2: (1,1) alone
        let f = map(2, 2, &[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [5.0, 5.0]]);
        let l = car_losses(&f, &[1, 1, 2, IGNORE], IGNORE).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let want_intra = 1.0 - (r + r + 1.0) / 3.0;
        assert!((l.intra.item() - want_intra).abs() < 1e-10, "{}", l.intra.item());
        // both centers point along (1,1)
        assert!((l.inter.item() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn anti_aligned_centers_are_hinged() {
        let f = map(1, 2, &[[1.0, 0.0], [-1.0, 0.0]]);
        let l = car_losses(&f, &[0, 3], IGNORE).unwrap();
        assert_eq!(l.inter.item(), 0.0);
        assert!(car_losses(&f, &[IGNORE, IGNORE], IGNORE).is_err());
    }
}
