//! Scoped-thread executor.

use std::num::NonZeroUsize;
use std::thread;

use miqrec_core::exec::Executor;

pub const THREADS_ENV: &str = "MIQREC_THREADS";

/// Splits the index range into contiguous runs, one per thread, and
/// concatenates the results in index order.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self { threads: threads.max(1) }
    }

    /// Thread count from `MIQREC_THREADS`, else the available parallelism.
    pub fn from_env() -> Self {
        let fallback = thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1);
        let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(fallback);
        Self::new(n)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }
}

impl Executor for Threaded {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        let workers = self.threads.min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        let per = n.div_ceil(workers);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| s.spawn(move || (w * per..((w + 1) * per).min(n)).map(f).collect::<Vec<R>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        for threads in [1, 2, 3, 8, 40] {
            let out = Threaded::new(threads).map(17, |i| i * i);
            assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(Threaded::new(4).map(0, |i| i).is_empty());
    }
}
