//! Single-head dot-product attention over feature-map positions, without
//! positional encodings.

use rand::Rng;

use super::init::he_normal;
use super::params::{Ctx, ParamKind, ParamStore};
use crate::tensor::{invalid, ParamId, Result, Tensor};

/// Projection matrices `[d_in, d_attn]` for queries, keys and values.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let shape = wq.shape();
        if shape.len() != 2 || wk.shape() != shape || wv.shape() != shape {
            return Err(invalid(
                "attention",
                format!("projections {:?} {:?} {:?} must share one 2-D shape", wq.shape(), wk.shape(), wv.shape()),
            ));
        }
        Ok(AttentionParams { wq, wk, wv })
    }

    pub fn d_in(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_attn(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_attn() as f64).sqrt()
    }
}

/// Attention among the `L` tokens of each of `G` independent groups.
/// `tokens: [G, L, C]` gives `([G, L, d], weights [G, L, L])`.
fn attend(tokens: &Tensor, p: &AttentionParams) -> Result<(Tensor, Tensor)> {
    let (g, l, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    if c != p.d_in() {
        return Err(invalid("attention", format!("tokens have {c} channels, projections expect {}", p.d_in())));
    }
    let d = p.d_attn();
    let flat = tokens.reshape(&[g * l, c])?;
    let q = flat.matmul(&p.wq)?.reshape(&[g, l, d])?;
    let k = flat.matmul(&p.wk)?.reshape(&[g, l, d])?;
    let v = flat.matmul(&p.wv)?.reshape(&[g, l, d])?;
    let scores = q.bmm(&k.permute(&[0, 2, 1])?)?.scale(p.scale());
    let weights = scores.softmax(2)?;
    Ok((weights.bmm(&v)?, weights))
}

fn check_map(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(invalid("attention", format!("expected [B, C, H, W], got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn full_attention(x: &Tensor, p: &AttentionParams) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = check_map(x)?;
    let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c])?;
    let (out, weights) = attend(&tokens, p)?;
    let out = out.reshape(&[b, h, w, p.d_attn()])?.permute(&[0, 3, 1, 2])?;
    Ok((out, weights))
}

/// `softmax(Q K^T / sqrt(d)) V` over all `H*W` positions; `[B, d_attn, H, W]`.
pub fn self_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    Ok(full_attention(x, p)?.0)
}

/// The `[B, HW, HW]` attention matrix of [`self_attention`].
pub fn attention_weights(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    Ok(full_attention(x, p)?.1)
}

/// Residual attention along rows: each row's `W` positions attend to one another.
fn row_pass(x: &Tensor, p: &AttentionParams) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = check_map(x)?;
    let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[b * h, w, c])?;
    let (out, weights) = attend(&tokens, p)?;
    let out = out.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])?;
    Ok((x.add(&out)?, weights))
}

/// Residual attention along columns.
fn col_pass(x: &Tensor, p: &AttentionParams) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = check_map(x)?;
    let tokens = x.permute(&[0, 3, 2, 1])?.reshape(&[b * w, h, c])?;
    let (out, weights) = attend(&tokens, p)?;
    let out = out.reshape(&[b, w, h, c])?.permute(&[0, 3, 2, 1])?;
    Ok((x.add(&out)?, weights))
}

/// Row pass then column pass, each with a residual connection. Both
/// projections must map `C -> C`.
pub fn axial_attention(x: &Tensor, p_row: &AttentionParams, p_col: &AttentionParams) -> Result<Tensor> {
    Ok(axial_attention_with_weights(x, p_row, p_col)?.0)
}

/// Like [`axial_attention`], also returning the row weights `[B*H, W, W]`
/// and column weights `[B*W, H, H]`.
pub fn axial_attention_with_weights(
    x: &Tensor,
    p_row: &AttentionParams,
    p_col: &AttentionParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = check_map(x)?.1;
    for p in [p_row, p_col] {
        if p.d_in() != c || p.d_attn() != c {
            return Err(invalid(
                "axial_attention",
                format!("residual passes need {c}->{c} projections, got {}->{}", p.d_in(), p.d_attn()),
            ));
        }
    }
    let (y, row_w) = row_pass(x, p_row)?;
    let (z, col_w) = col_pass(&y, p_col)?;
    Ok((z, row_w, col_w))
}

/// Row pass alone, exposed for equivariance checks.
pub fn axial_row_pass(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    Ok(row_pass(x, p)?.0)
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d_in: usize,
    pub d_attn: usize,
}

/// Gain applied on top of He-normal so the attention branch starts small.
pub const ATTENTION_INIT_GAIN: f64 = 0.1;

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, d_in: usize, d_attn: usize, rng: &mut impl Rng) -> Self {
        let mut proj = |suffix: &str, rng: &mut _| {
            let w = he_normal(rng, d_in * d_attn, d_in, ATTENTION_INIT_GAIN);
            store.register(&format!("{name}.{suffix}"), group, ParamKind::Weight, &[d_in, d_attn], w)
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        SelfAttention {
            wq,
            wk,
            wv,
            d_in,
            d_attn,
        }
    }

    pub fn params(&self, ctx: &Ctx) -> AttentionParams {
        AttentionParams {
            wq: ctx.param(self.wq),
            wk: ctx.param(self.wk),
            wv: ctx.param(self.wv),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self_attention(x, &self.params(ctx))
    }
}

#[derive(Clone, Debug)]
pub struct AxialAttention {
    pub row: SelfAttention,
    pub col: SelfAttention,
}

impl AxialAttention {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, ch: usize, rng: &mut impl Rng) -> Self {
        AxialAttention {
            row: SelfAttention::new(store, &format!("{name}.row"), group, ch, ch, rng),
            col: SelfAttention::new(store, &format!("{name}.col"), group, ch, ch, rng),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        axial_attention(x, &self.row.params(ctx), &self.col.params(ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, finite_diff_check};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn rand_params(d_in: usize, d: usize, seed: u64, gain: f64) -> AttentionParams {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut m = || Tensor::new(&[d_in, d], he_normal(&mut rng, d_in * d, d_in, gain)).unwrap();
        AttentionParams::new(m(), m(), m()).unwrap()
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, he_normal(&mut rng, n, 2, 1.0)).unwrap()
    }

    #[test]
    fn single_token_returns_value_projection() {
        let p = rand_params(3, 2, 1, 1.0);
        let x = rand_map(&[1, 3, 1, 1], 2);
        let y = self_attention(&x, &p).unwrap();
        let v = x.reshape(&[1, 3]).unwrap().matmul(&p.wv).unwrap();
        for (a, b) in y.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let p = rand_params(4, 3, 3, 1.0);
        let x = rand_map(&[2, 4, 3, 2], 4);
        let w = attention_weights(&x, &p).unwrap();
        for row in w.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let pr = rand_params(4, 4, 5, 1.0);
        let pc = rand_params(4, 4, 6, 1.0);
        let (_, rw, cw) = axial_attention_with_weights(&x, &pr, &pc).unwrap();
        for row in rw.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for row in cw.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_tokens_match_closed_form() {
        // identity projections, d = 1: tokens a, b
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let p = AttentionParams::new(one.clone(), one.clone(), one).unwrap();
        let (a, b) = (0.5_f64, 2.0_f64);
        let x = Tensor::new(&[1, 1, 1, 2], vec![a, b]).unwrap();
        let y = self_attention(&x, &p).unwrap();
        let row = |q: f64| {
            let (ea, eb) = ((q * a).exp(), (q * b).exp());
            (ea * a + eb * b) / (ea + eb)
        };
        assert!((y.data()[0] - row(a)).abs() < 1e-14);
        assert!((y.data()[1] - row(b)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_axes_reduce_to_value_terms() {
        let pr = rand_params(3, 3, 7, 1.0);
        let pc = rand_params(3, 3, 8, 1.0);
        let x = rand_map(&[1, 3, 1, 1], 9);
        let y = axial_attention(&x, &pr, &pc).unwrap();
        let xr = x.reshape(&[1, 3]).unwrap();
        let y1 = xr.add(&xr.matmul(&pr.wv).unwrap()).unwrap();
        let y2 = y1.add(&y1.matmul(&pc.wv).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn row_pass_is_row_equivariant() {
        let p = rand_params(2, 2, 10, 1.0);
        let x = rand_map(&[1, 2, 3, 4], 11);
        let perm = [2usize, 0, 1];
        let permute_rows = |t: &Tensor| {
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            for c in 0..2 {
                for (dst, &src) in perm.iter().enumerate() {
                    out[(c * 3 + dst) * 4..][..4].copy_from_slice(&d[(c * 3 + src) * 4..][..4]);
                }
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let a = permute_rows(&axial_row_pass(&x, &p).unwrap());
        let b = axial_row_pass(&permute_rows(&x), &p).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn axial_gradient_matches_differences() {
        let pr = rand_params(3, 3, 12, 1.0);
        let pc = rand_params(3, 3, 13, 1.0);
        let x = rand_map(&[1, 3, 3, 4], 14);
        let probe = rand_map(&[1, 3, 3, 4], 15);
        let r = finite_diff_check(|x| Ok(axial_attention(x, &pr, &pc)?.mul(&probe)?.sum()), &x, 1e-5, None).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        let r = finite_diff_check(
            |wq| {
                let p = AttentionParams::new(wq.clone(), pr.wk.clone(), pr.wv.clone())?;
                Ok(axial_attention(&x, &p, &pc)?.mul(&probe)?.sum())
            },
            &pr.wq,
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn one_hot_output_gradient_reaches_every_position() {
        let (h, w, c) = (8, 8, 4);
        let pr = rand_params(c, c, 16, 1.0);
        let pc = rand_params(c, c, 17, 1.0);
        let x = Tensor::variable(&[1, c, h, w], rand_map(&[1, c, h, w], 18).to_vec()).unwrap();
        let y = axial_attention(&x, &pr, &pc).unwrap();
        let mut onehot = vec![0.0; c * h * w];
        onehot[2 * w + 5] = 1.0; // channel 0, pixel (2, 5)
        let loss = y.mul(&Tensor::new(&[1, c, h, w], onehot).unwrap()).unwrap().sum();
        let g = backward(&loss, &[x.clone()]).unwrap();
        let grad = &g.get(&x).unwrap().grad;
        for pos in 0..h * w {
            let mag: f64 = (0..c).map(|ch| grad[ch * h * w + pos].abs()).sum();
            assert!(mag > 0.0, "position {pos} received no gradient");
        }
    }
}
