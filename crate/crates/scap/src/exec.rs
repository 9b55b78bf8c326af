use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use scap_core::Executor;

use crate::error::{Error, Result};

/// Runs tasks on a dedicated rayon pool. Order of results follows input order.
pub struct Rayon {
    pool: ThreadPool,
}

impl Rayon {
    /// `threads == 0` lets rayon pick from the available cores.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Rayon {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}
