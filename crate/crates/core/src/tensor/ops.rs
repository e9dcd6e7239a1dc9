use super::gemm::gemm;
use super::{invalid, numel_of, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Strides for a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = zip_map(self.data(), other.data(), |x, y| x + y);
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = zip_map(self.data(), other.data(), |x, y| x - y);
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = zip_map(self.data(), other.data(), |x, y| x * y);
        let (a, b) = (self.clone(), other.clone());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone(), other.clone()], move |g| {
            vec![
                ra.then(|| zip_map(g, b.data(), |g, y| g * y)),
                rb.then(|| zip_map(g, a.data(), |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |g| vec![Some(g.to_vec())])
    }

    /// Subgradient at zero is zero.
    pub fn relu(&self) -> Tensor {
        super::gradcheck::record_relu_pattern(self.data());
        let out = self.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(zip_map(g, x.data(), |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.view_op(shape.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of {nd} axes")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        // stride in the input for each output axis
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let out = permute_data(self.data(), &out_shape, &gather);
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_strides = strides(&out_shape);
        let back_gather: Vec<usize> = inverse.iter().map(|&i| out_strides[i]).collect();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &in_shape, &back_gather))]
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, 0.0, &mut out);
        let (a, b) = (self.clone(), other.clone());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(vec![m, n], out, vec![self.clone(), other.clone()], move |g| {
            let da = ra.then(|| {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, 0.0, &mut da);
                da
            });
            let db = rb.then(|| {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, 0.0, &mut db);
                db
            });
            vec![da, db]
        }))
    }

    /// Batched product of `[G, M, K]` and `[G, K, N]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let bad = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.ndim() != 3 || other.ndim() != 3 {
            return Err(bad());
        }
        let (g, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[2];
        if other.shape()[0] != g || other.shape()[1] != k {
            return Err(bad());
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                false,
                &other.data()[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let (a, b) = (self.clone(), other.clone());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(vec![g, m, n], out, vec![self.clone(), other.clone()], move |grad| {
            let da = ra.then(|| {
                let mut da = vec![0.0; g * m * k];
                for i in 0..g {
                    gemm(
                        m,
                        n,
                        k,
                        &grad[i * m * n..(i + 1) * m * n],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                da
            });
            let db = rb.then(|| {
                let mut db = vec![0.0; g * k * n];
                for i in 0..g {
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &grad[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(invalid("softmax", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), y, vec![self.clone()], move |g| {
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * saved[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[label]`.
    /// `self` is `[N, C]`; `labels` has length N.
    pub fn cross_entropy(&self, labels: &[u16], ignore_index: u16) -> Result<Tensor> {
        if self.ndim() != 2 || labels.len() != self.shape()[0] {
            return Err(invalid(
                "cross_entropy",
                format!("logits {:?} vs {} labels", self.shape(), labels.len()),
            ));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, &label) in labels.iter().enumerate() {
            if label == ignore_index {
                continue;
            }
            let label = label as usize;
            if label >= c {
                return Err(TensorError::LabelOutOfRange {
                    label,
                    position: row,
                    classes: c,
                });
            }
            let xs = &x[row * c..(row + 1) * c];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = xs.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - xs[label];
            for j in 0..c {
                probs[row * c + j] = (xs[j] - log_z).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let labels = labels.to_vec();
        let inv = 1.0 / count as f64;
        Ok(Tensor::from_op(vec![], vec![total * inv], vec![self.clone()], move |g| {
            let scale = g[0] * inv;
            let mut dx = vec![0.0; n * c];
            for (row, &label) in labels.iter().enumerate() {
                if label == ignore_index {
                    continue;
                }
                for j in 0..c {
                    dx[row * c + j] = probs[row * c + j] * scale;
                }
                dx[row * c + label as usize] -= scale;
            }
            vec![Some(dx)]
        }))
    }

    /// Divides each row of a `[N, D]` tensor by `sqrt(|row|^2 + eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(invalid("l2_normalize_rows", format!("needs 2-D, got {:?}", self.shape())));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let norms: Vec<f64> = (0..n)
            .map(|r| (x[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let y: Vec<f64> = (0..n * d).map(|i| x[i] / norms[i / d]).collect();
        let saved = y.clone();
        Ok(Tensor::from_op(vec![n, d], y, vec![self.clone()], move |g| {
            let mut dx = vec![0.0; n * d];
            for r in 0..n {
                let ys = &saved[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] = (gs[j] - ys[j] * dot) / norms[r];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Global average over the trailing two axes of `[B, C, H, W]`, giving `[B, C]`.
    pub fn mean_spatial(&self) -> Result<Tensor> {
        if self.ndim() != 4 {
            return Err(invalid("mean_spatial", format!("needs 4-D, got {:?}", self.shape())));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        let hw = self.shape()[2] * self.shape()[3];
        let x = self.data();
        let out: Vec<f64> = (0..b * c)
            .map(|i| x[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let inv = 1.0 / hw as f64;
        Ok(Tensor::from_op(vec![b, c], out, vec![self.clone()], move |g| {
            vec![Some((0..b * c * hw).map(|i| g[i / hw] * inv).collect())]
        }))
    }
}

fn permute_data(src: &[f64], out_shape: &[usize], gather: &[usize]) -> Vec<f64> {
    let n = src.len();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    if nd == 0 {
        return src.to_vec();
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        // odometer increment over the output index
        let mut axis = nd;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            offset += gather[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= gather[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::tensor::{backward, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_relu_examples() {
        assert_eq!(t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(t(&[3], &[-1., 0., 2.]).relu().data(), &[0., 0., 2.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[2], &[1., 2.]).add(&t(&[3], &[1., 2., 3.])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
        assert_eq!(t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap().data(), &[11.]);
        assert!(t(&[1, 2], &[1., 2.]).matmul(&t(&[3, 1], &[1., 2., 3.])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[1000., 1000.]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[0., 3f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let x = t(&[2, 3, 2], &[0.1, -0.3, 2.0, 0.5, -1.0, 0.0, 3.0, 1.0, -2.0, 0.4, 0.7, 0.2]);
        let s = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|j| s.data()[o * 6 + j * 2 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let confident = t(&[1, 3], &[0., 1e6, 0.]);
        assert!(confident.cross_entropy(&[1], 255).unwrap().item().abs() < 1e-12);
        let uniform = t(&[2, 4], &[0.0; 8]);
        assert!((uniform.cross_entropy(&[0, 3], 255).unwrap().item() - 4f64.ln()).abs() < 1e-15);
        let mixed = t(&[3, 2], &[0.3, -0.2, 5.0, 1.0, -1.0, 2.0]);
        let with_ignored = mixed.cross_entropy(&[0, 255, 1], 255).unwrap().item();
        let without = t(&[2, 2], &[0.3, -0.2, -1.0, 2.0]).cross_entropy(&[0, 1], 255).unwrap().item();
        assert_eq!(with_ignored, without);
        assert!(matches!(
            mixed.cross_entropy(&[255, 255, 255], 255),
            Err(crate::tensor::TensorError::EmptyLoss)
        ));
        assert!(matches!(
            mixed.cross_entropy(&[0, 2, 1], 255),
            Err(crate::tensor::TensorError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn permute_round_trip_and_grad() {
        let x = Tensor::variable(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
        let w = Tensor::new(&[4, 2, 3], (0..24).map(|v| v as f64 * 0.1).collect()).unwrap();
        let g = backward(&p.mul(&w).unwrap().sum(), &[x.clone()]).unwrap();
        let want = w.permute(&[1, 2, 0]).unwrap();
        assert_eq!(g.get(&x).unwrap().grad, want.to_vec());
    }
}
