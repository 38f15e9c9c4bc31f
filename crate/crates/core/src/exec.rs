//! Client-level data parallelism.
//!
//! With the `parallel` feature, work is spread over a rayon pool whose size
//! comes from `PRFL_THREADS` (0 or unset = all cores). Without the feature,
//! or with [`Executor::sequential`], everything runs on the caller's thread.
//! Results are always returned in input order.

pub const THREADS_ENV: &str = "PRFL_THREADS";

pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("threads", &self.threads()).finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `threads == 0` means one worker per available core.
    #[cfg(feature = "parallel")]
    pub fn parallel(threads: usize) -> Self {
        if threads == 1 {
            return Self::sequential();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("prfl-worker-{i}"))
            .build()
            .map_err(|e| log::warn!("thread pool unavailable ({e}); running sequentially"))
            .ok();
        Self { pool }
    }

    #[cfg(not(feature = "parallel"))]
    pub fn parallel(_threads: usize) -> Self {
        Self::sequential()
    }

    /// Reads `PRFL_THREADS`.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        Self::parallel(threads)
    }

    pub fn threads(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.current_num_threads();
        }
        1
    }

    /// Applies `f` to every item, possibly concurrently.
    pub fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter_mut().map(&f).collect());
        }
        items.iter_mut().map(f).collect()
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}
