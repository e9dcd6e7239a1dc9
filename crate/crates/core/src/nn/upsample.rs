use crate::tensor::{invalid, Result, Tensor};

/// Source taps for one output coordinate: `(lo, hi, weight_of_hi)`.
/// Half-pixel centers: `src = (dst + 0.5) / factor - 0.5`, clamped to `[0, len - 1]`.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling of `[B, C, H, W]` by an integer factor. The backward
/// pass applies the exact transpose of the interpolation matrix.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.ndim() != 4 || factor == 0 {
        return Err(invalid("bilinear_upsample", format!("shape {:?}, factor {factor}", x.shape())));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if factor == 1 {
        return x.reshape(x.shape());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_op(vec![b, c, oh, ow], out, vec![x.clone()], move |g| {
        let mut dx = vec![0.0; b * c * h * w];
        for p in 0..b * c {
            let gs = &g[p * oh * ow..(p + 1) * oh * ow];
            let d = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = gs[oy * ow + ox];
                    d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    d[y0 * w + x1] += v * (1.0 - fy) * fx;
                    d[y1 * w + x0] += v * fy * (1.0 - fx);
                    d[y1 * w + x1] += v * fy * fx;
                }
            }
        }
        vec![Some(dx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, finite_diff_check};

    #[test]
    fn constants_are_preserved() {
        for factor in [2, 4, 8, 16] {
            let y = bilinear_upsample(&Tensor::full(&[1, 2, 3, 2], 0.7), factor).unwrap();
            assert_eq!(y.shape(), &[1, 2, 3 * factor, 2 * factor]);
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn half_pixel_row() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn backward_is_exact_transpose() {
        // <U x, g> == <x, U^T g> for random x and g
        let x = Tensor::variable(&[1, 1, 3, 2], vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.25]).unwrap();
        let g: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let gt = Tensor::new(&[1, 1, 6, 4], g.clone()).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        let lhs: f64 = y.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let grads = backward(&y.mul(&gt).unwrap().sum(), &[x.clone()]).unwrap();
        let rhs: f64 = grads.get(&x).unwrap().grad.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let x = Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
        let probe = Tensor::new(&[2, 1, 12, 12], (0..288).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap();
        // linear in x, so a wide step has no truncation error and less rounding noise
        let r = finite_diff_check(|x| Ok(bilinear_upsample(x, 4)?.mul(&probe)?.sum()), &x, 1e-3, None).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }
}
