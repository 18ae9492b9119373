//! Worker pool setup.
//!
//! All parallel sections run on one global rayon pool whose size is capped by
//! the `RTGS_THREADS` environment variable. Results are accumulated in a
//! fixed tile/chunk order, so outputs are bit-identical for any worker count.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Number of workers requested through `RTGS_THREADS`, if set and valid.
fn env_thread_cap() -> Option<usize> {
    std::env::var("RTGS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// The global pool. Built on first use; honors `RTGS_THREADS` at that point.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(cap) = env_thread_cap() {
            builder = builder.num_threads(cap);
        }
        builder.build().expect("failed to build worker pool")
    })
}

/// Runs `op` on the global pool.
pub fn run<R: Send>(op: impl FnOnce() -> R + Send) -> R {
    pool().install(op)
}
