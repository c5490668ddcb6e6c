//! Worker-count control. Parallel loops collect results by index, so the
//! output never depends on the number of threads.

use rayon::ThreadPoolBuilder;

/// Run `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers` is `None`.
pub fn with_workers<T, F>(workers: Option<usize>, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match workers {
        Some(n) => ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool construction")
            .install(f),
        None => f(),
    }
}
