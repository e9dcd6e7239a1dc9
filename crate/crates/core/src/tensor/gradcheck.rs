use std::cell::Cell;

use super::{backward, graph_reachability, no_grad, Result, Tensor};

thread_local! {
    static RELU_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Folds the sign pattern of a relu input into the active trace, if any.
pub(crate) fn record_relu_pattern(x: &[f64]) {
    RELU_TRACE.with(|t| {
        if let Some(mut h) = t.get() {
            // FNV-1a over one bit per element
            for &v in x {
                h ^= (v > 0.0) as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            h ^= x.len() as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
            t.set(Some(h));
        }
    });
}

/// Runs `f` and returns a hash of every relu activation pattern it
/// computed on this thread. Equal hashes at two inputs mean (up to hash
/// collisions) that no relu switched between them.
pub fn relu_pattern<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = RELU_TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let h = RELU_TRACE.with(|t| t.replace(prev)).expect("trace active");
    (out, h)
}

/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckStatus {
    /// Analytic and numeric gradients were compared.
    Checked,
    /// The input feeds the output through a stop-gradient barrier, so the
    /// analytic gradient intentionally differs from the numeric one.
    BarrierExcluded,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub barriers: usize,
    /// Candidate coordinates skipped because a relu switched inside
    /// `[x - eps, x + eps]`, where no derivative exists to compare.
    pub kinks_skipped: usize,
    pub status: GradCheckStatus,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.status == GradCheckStatus::Checked && self.max_rel_err < tol
    }

    /// Folds another report into this one (worst case wins).
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.kinks_skipped += other.kinks_skipped;
        self.barriers = self.barriers.max(other.barriers);
        if other.status == GradCheckStatus::BarrierExcluded {
            self.status = GradCheckStatus::BarrierExcluded;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `backward` against central differences
/// `(f(x+eps e_i) - f(x-eps e_i)) / 2eps` for every coordinate of `x`
/// (or only `coords`, when given). `f` must return a one-element tensor.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let leaf = Tensor::variable(x.shape(), x.to_vec())?;
    let out = f(&leaf)?;
    let reach = graph_reachability(&out);
    let through_barrier = reach.via_barrier.contains(&leaf.id());
    let grads = backward(&out, std::slice::from_ref(&leaf))?;
    let analytic = &grads.get(&leaf).expect("requested leaf").grad;

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let base = x.to_vec();
    let eval = |delta: f64, i: usize| -> Result<f64> {
        let mut v = base.clone();
        v[i] += delta;
        let probe = Tensor::new(x.shape(), v)?;
        Ok(no_grad(|| f(&probe))?.item())
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        barriers: reach.barriers,
        kinks_skipped: 0,
        status: if through_barrier {
            GradCheckStatus::BarrierExcluded
        } else {
            GradCheckStatus::Checked
        },
    };
    for &i in coords {
        let numeric = (eval(eps, i)? - eval(-eps, i)?) / (2.0 * eps);
        let a = analytic[i];
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
        report.checked += 1;
    }
    Ok(report)
}

/// Like [`finite_diff_check`], for functions with relu kinks: walks
/// `candidates` in order and compares up to `want` coordinates whose whole
/// `[x - eps, x + eps]` segment keeps every relu on the side it takes at
/// `x`. Rejected coordinates are counted in `kinks_skipped`.
pub fn finite_diff_check_smooth(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
    candidates: &[usize],
    want: usize,
) -> Result<GradCheckReport> {
    let leaf = Tensor::variable(x.shape(), x.to_vec())?;
    let out = f(&leaf)?;
    let reach = graph_reachability(&out);
    let through_barrier = reach.via_barrier.contains(&leaf.id());
    let grads = backward(&out, std::slice::from_ref(&leaf))?;
    let analytic = &grads.get(&leaf).expect("requested leaf").grad;

    let base = x.to_vec();
    let eval = |delta: f64, i: usize| -> Result<(f64, u64)> {
        let mut v = base.clone();
        v[i] += delta;
        let probe = Tensor::new(x.shape(), v)?;
        let (y, h) = relu_pattern(|| no_grad(|| f(&probe)));
        Ok((y?.item(), h))
    };
    let (at_x, pattern) = relu_pattern(|| no_grad(|| f(x)));
    at_x?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        barriers: reach.barriers,
        kinks_skipped: 0,
        status: if through_barrier {
            GradCheckStatus::BarrierExcluded
        } else {
            GradCheckStatus::Checked
        },
    };
    for &i in candidates {
        if report.checked == want {
            break;
        }
        let (hi, h_hi) = eval(eps, i)?;
        let (lo, h_lo) = eval(-eps, i)?;
        if h_hi != pattern || h_lo != pattern {
            report.kinks_skipped += 1;
            continue;
        }
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic[i];
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
        report.checked += 1;
    }
    Ok(report)
}
