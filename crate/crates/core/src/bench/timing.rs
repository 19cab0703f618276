use std::time::Instant;

/// Run `task` on a single-thread pool and return its output with the elapsed
/// wall time in seconds. Pool construction is not timed.
pub fn time_execution<T: Send>(task: impl FnOnce() -> T + Send) -> (T, f64) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    pool.install(|| {
        let start = Instant::now();
        let out = task();
        (out, start.elapsed().as_secs_f64())
    })
}
