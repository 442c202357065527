//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, [`Parallelism::Parallel`] runs on the current
//! rayon pool. Without it every mode runs sequentially. Results are collected
//! in input order either way, so callers see identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

/// Maps `f` over mutable items, preserving order.
pub fn map_mut<T, R, F>(items: &mut [T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Parallelism::Parallel {
        use rayon::prelude::*;
        return items.par_iter_mut().map(f).collect();
    }
    let _ = mode;
    items.iter_mut().map(f).collect()
}

/// Maps `f` over indices `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Parallelism::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Runs `f` with at most `threads` workers (0 = all cores).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Whether this build can run phases in parallel.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut a: Vec<u64> = (0..100).collect();
        let mut b = a.clone();
        let f = |x: &mut u64| {
            *x *= 3;
            *x + 1
        };
        let ra = map_mut(&mut a, Parallelism::Parallel, f);
        let rb = map_mut(&mut b, Parallelism::Sequential, f);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let ra = with_threads(2, || map_range(50, Parallelism::Parallel, |i| i * i));
        assert_eq!(ra, map_range(50, Parallelism::Sequential, |i| i * i));
    }
}
