use rand::Rng;

use super::init::he_normal;
use super::params::{Ctx, ParamKind, ParamStore};
use crate::tensor::gemm::gemm;
use crate::tensor::{invalid, ParamId, Result, Tensor, TensorError};

/// Output extent of a convolution along one axis (floor division), or
/// `None` when the padded input is smaller than the kernel.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: Geometry, col: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: Geometry, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation of `x: [B, C, H, W]` with
/// `weight: [O, C, k, k]` plus `bias: [O]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if x.ndim() != 4 || weight.ndim() != 4 || weight.shape()[2] != weight.shape()[3] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    if weight.shape()[1] != c {
        return Err(invalid(
            "conv2d",
            format!("input has {c} channels, weight {:?} expects {}", weight.shape(), weight.shape()[1]),
        ));
    }
    if bias.shape() != [o] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            lhs: vec![o],
            rhs: bias.shape().to_vec(),
        });
    }
    let (Some(ho), Some(wo)) = (conv_out_len(h, k, stride, padding), conv_out_len(w, k, stride, padding)) else {
        return Err(invalid(
            "conv2d",
            format!("input {h}x{w} too small for kernel {k} with padding {padding} and stride {stride}"),
        ));
    };
    let g = Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let ckk = c * k * k;
    let plane = ho * wo;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0; b * o * plane];
    let keep_cols = weight.requires_grad() && !g.is_pointwise();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { ckk * plane }];
    for bi in 0..b {
        let xb = &xd[bi * c * h * w..(bi + 1) * c * h * w];
        let ob = &mut out[bi * o * plane..(bi + 1) * o * plane];
        for (oc, chunk) in ob.chunks_mut(plane).enumerate() {
            chunk.fill(bd[oc]);
        }
        if g.is_pointwise() {
            gemm(o, ckk, plane, wd, false, xb, false, 1.0, ob);
        } else {
            im2col(xb, g, &mut col);
            gemm(o, ckk, plane, wd, false, &col, false, 1.0, ob);
            if keep_cols {
                cols.push(col.clone());
            }
        }
    }

    let (xs, ws) = (x.clone(), weight.clone());
    let (rx, rw, rb) = (x.requires_grad(), weight.requires_grad(), bias.requires_grad());
    Ok(Tensor::from_op(
        vec![b, o, ho, wo],
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        move |grad| {
            let mut dx = rx.then(|| vec![0.0; b * c * h * w]);
            let mut dw = rw.then(|| vec![0.0; o * ckk]);
            let db = rb.then(|| {
                let mut db = vec![0.0; o];
                for bi in 0..b {
                    for (oc, d) in db.iter_mut().enumerate() {
                        *d += grad[(bi * o + oc) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                db
            });
            let mut dcol = vec![0.0; if g.is_pointwise() { 0 } else { ckk * plane }];
            let mut scratch = Vec::new();
            for bi in 0..b {
                let gb = &grad[bi * o * plane..(bi + 1) * o * plane];
                if let Some(dw) = dw.as_mut() {
                    let colb: &[f64] = if g.is_pointwise() {
                        &xs.data()[bi * c * h * w..(bi + 1) * c * h * w]
                    } else if let Some(saved) = cols.get(bi) {
                        saved
                    } else {
                        scratch.resize(ckk * plane, 0.0);
                        im2col(&xs.data()[bi * c * h * w..(bi + 1) * c * h * w], g, &mut scratch);
                        &scratch
                    };
                    gemm(o, plane, ckk, gb, false, colb, true, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
                    if g.is_pointwise() {
                        gemm(ckk, o, plane, ws.data(), true, gb, false, 0.0, dxb);
                    } else {
                        gemm(ckk, o, plane, ws.data(), true, gb, false, 0.0, &mut dcol);
                        col2im(&dcol, g, dxb);
                    }
                }
            }
            vec![dx, dw, db]
        },
    ))
}

/// Convolution layer with kernel 1 or 3 and "same" padding `(k - 1) / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    /// Absent for convolutions that feed a norm layer.
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
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
        Self::build(store, name, group, in_ch, out_ch, kernel, stride, true, rng)
    }

    /// Same as [`Conv2d::new`] without a bias term.
    #[allow(clippy::too_many_arguments)]
    pub fn unbiased(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::build(store, name, group, in_ch, out_ch, kernel, stride, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "{name}: kernel must be 1 or 3");
        let fan_in = in_ch * kernel * kernel;
        let w = he_normal(rng, out_ch * fan_in, fan_in, 1.0);
        let weight = store.register(
            &format!("{name}.weight"),
            group,
            ParamKind::Weight,
            &[out_ch, in_ch, kernel, kernel],
            w,
        );
        let bias = with_bias
            .then(|| store.register(&format!("{name}.bias"), group, ParamKind::Weight, &[out_ch], vec![0.0; out_ch]));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let bias = match self.bias {
            Some(id) => ctx.param(id),
            None => Tensor::zeros(&[self.out_ch]),
        };
        conv2d(x, &ctx.param(self.weight), &bias, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn det(n: usize, seed: u64) -> Vec<f64> {
        // small deterministic pseudo-random values away from zero
        (0..n)
            .map(|i| {
                let v = ((i as u64 + 1).wrapping_mul(seed.wrapping_mul(2654435761) | 1) % 1000) as f64 / 500.0 - 1.0;
                if v.abs() < 0.05 { 0.3 } else { v }
            })
            .collect()
    }

    #[test]
    fn identity_pointwise_adds_bias() {
        let x = Tensor::new(&[1, 2, 2, 2], det(8, 3)).unwrap();
        let w = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        for i in 0..8 {
            let bias = if i < 4 { 0.5 } else { -1.0 };
            assert!((y.data()[i] - (x.data()[i] + bias)).abs() < 1e-15);
        }
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let c = 2.5;
        let x = Tensor::full(&[1, 1, 4, 4], c);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        let at = |r: usize, col: usize| y.data()[r * 4 + col];
        assert_eq!(at(1, 1), 9.0 * c);
        assert_eq!(at(2, 2), 9.0 * c);
        assert_eq!(at(0, 0), 4.0 * c);
        assert_eq!(at(3, 3), 4.0 * c);
        assert_eq!(at(0, 1), 6.0 * c);
    }

    #[test]
    fn stride_two_halves_even_input() {
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b, 2, 1).unwrap().shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(conv2d(&x, &w, &b, 1, 1).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 2, 1, 1]), &w, &b, 1, 0).is_err());
    }

    #[test]
    fn gradients_match_differences() {
        let xv = det(2 * 2 * 5 * 5, 7);
        let wv = det(3 * 2 * 3 * 3, 11);
        let bv = det(3, 13);
        let probe = Tensor::new(&[2, 3, 3, 3], det(54, 17)).unwrap();
        let x = Tensor::new(&[2, 2, 5, 5], xv.clone()).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], wv.clone()).unwrap();
        let b = Tensor::new(&[3], bv.clone()).unwrap();
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| conv2d(x, w, b, 2, 1)?.mul(&probe).map(|t| t.sum());
        let rx = finite_diff_check(|x| loss(x, &w, &b), &x, 1e-5, None).unwrap();
        let rw = finite_diff_check(|w| loss(&x, w, &b), &w, 1e-5, None).unwrap();
        let rb = finite_diff_check(|b| loss(&x, &w, b), &b, 1e-5, None).unwrap();
        for r in [rx, rw, rb] {
            assert!(r.passes(1e-6), "{r:?}");
        }
    }
}
