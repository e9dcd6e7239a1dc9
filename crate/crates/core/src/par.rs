//! Data-parallel helpers. Work is spread over a rayon pool when the
//! `parallel` feature is on and `HFGD_THREADS` asks for more than one
//! worker; otherwise everything runs on the calling thread. Results are
//! always returned in index order, so output never depends on scheduling.

pub const THREADS_ENV: &str = "HFGD_THREADS";

/// Worker cap from `HFGD_THREADS`; 0, absent or unparsable means one.
pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
        .max(1)
}

#[cfg(feature = "parallel")]
fn pool() -> Option<&'static rayon::ThreadPool> {
    use std::sync::OnceLock;
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = threads();
        (n > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool"))
    })
    .as_ref()
}

/// `(0..n).map(f)`, in parallel when enabled.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if let Some(p) = pool() {
        use rayon::prelude::*;
        return p.install(|| (0..n).into_par_iter().map(&f).collect());
    }
    (0..n).map(f).collect()
}

/// Always sequential; the reference the parallel path is compared with.
pub fn map_sequential<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Whether [`map`] would fan out.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        pool().is_some()
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}
