use super::params::{Ctx, ParamKind, ParamStore, StatUpdate};
use crate::tensor::{invalid, ParamId, Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 4 || gamma.shape() != [x.shape()[1]] || beta.shape() != gamma.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Batch-statistics normalization of `[B, C, H, W]`. Returns the output,
/// the per-channel batch mean, and the unbiased batch variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (b, c, hw) = check_affine(x, gamma, beta)?;
    let n = b * hw;
    if n < 2 {
        return Err(invalid("batch_norm", "train mode needs at least two values per channel"));
    }
    let xd = x.data();
    let at = move |bi: usize, ci: usize| (bi * c + ci) * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += xd[at(bi, ci)..][..hw].iter().sum::<f64>();
        }
        let m = s / n as f64;
        let mut v = 0.0;
        for bi in 0..b {
            v += xd[at(bi, ci)..][..hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for bi in 0..b {
        for ci in 0..c {
            let o = at(bi, ci);
            for i in o..o + hw {
                xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                out[i] = gd[ci] * xhat[i] + bd[ci];
            }
        }
    }
    let unbiased: Vec<f64> = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
    let g = gamma.clone();
    let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    let y = Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |dy| {
            let gd = g.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let o = at(bi, ci);
                    for i in o..o + hw {
                        dgamma[ci] += dy[i] * xhat[i];
                        dbeta[ci] += dy[i];
                    }
                }
            }
            let dx = rx.then(|| {
                let mut dx = vec![0.0; dy.len()];
                let nf = n as f64;
                for ci in 0..c {
                    // sums of dxhat and dxhat*xhat, with dxhat = dy * gamma
                    let sum_dxhat = dbeta[ci] * gd[ci];
                    let sum_dxhat_xhat = dgamma[ci] * gd[ci];
                    let k = inv_std[ci] / nf;
                    for bi in 0..b {
                        let o = at(bi, ci);
                        for i in o..o + hw {
                            let dxhat = dy[i] * gd[ci];
                            dx[i] = k * (nf * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                        }
                    }
                }
                dx
            });
            vec![dx, rg.then_some(dgamma), rb.then_some(dbeta)]
        },
    );
    Ok((y, mean, unbiased))
}

/// Normalization with fixed statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Result<Tensor> {
    let (b, c, hw) = check_affine(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(invalid("batch_norm", "running statistics do not match channel count"));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for i in o..o + hw {
                out[i] = gd[ci] * (xd[i] - mean[ci]) * inv_std[ci] + bd[ci];
            }
        }
    }
    let (xs, g) = (x.clone(), gamma.clone());
    let mean = mean.to_vec();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |dy| {
            let xd = xs.data();
            let gd = g.data();
            let mut dx = vec![0.0; dy.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let o = (bi * c + ci) * hw;
                    for i in o..o + hw {
                        dx[i] = dy[i] * gd[ci] * inv_std[ci];
                        dgamma[ci] += dy[i] * (xd[i] - mean[ci]) * inv_std[ci];
                        dbeta[ci] += dy[i];
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    ))
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, ch: usize) -> Self {
        BatchNorm2d {
            gamma: store.register(&format!("{name}.gamma"), group, ParamKind::NoDecay, &[ch], vec![1.0; ch]),
            beta: store.register(&format!("{name}.beta"), group, ParamKind::NoDecay, &[ch], vec![0.0; ch]),
            running_mean: store.register(&format!("{name}.running_mean"), group, ParamKind::Buffer, &[ch], vec![0.0; ch]),
            running_var: store.register(&format!("{name}.running_var"), group, ParamKind::Buffer, &[ch], vec![1.0; ch]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.training() {
            let (y, mean, var) = batch_norm_train(x, &gamma, &beta, self.eps)?;
            ctx.push_update(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean: mean,
                batch_var: var,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let rm = ctx.param(self.running_mean);
            let rv = ctx.param(self.running_var);
            batch_norm_eval(x, &gamma, &beta, rm.data(), rv.data(), self.eps)
        }
    }
}
