//! Per-machine fan-out. With the `parallel` feature the work is spread over
//! a rayon pool; without it (or with `Execution::Sequential`) the same
//! closures run in a plain loop. Each item is computed independently and
//! results are collected in input order, so the output never depends on the
//! worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How per-machine work inside a synchronous round is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Use the ambient rayon pool (or a dedicated one, see [`with_workers`]).
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel if items.len() > 1 => items
                .par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect(),
            _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }

    pub fn map_mut<T, R, F>(self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel if items.len() > 1 => items
                .par_iter_mut()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect(),
            _ => items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel if n > 1 => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Runs `op` with `workers` threads. `None` or a build without the
/// `parallel` feature runs it on the current thread configuration.
pub fn with_workers<R: Send>(workers: Option<usize>, op: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => return pool.install(op),
            Err(e) => log::warn!("could not build a {n}-thread pool ({e}); using the global pool"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    op()
}
