//! Data-parallel helpers. With the `parallel` feature (default) these fan
//! work out over rayon; without it they fall back to plain sequential
//! iteration with the same signatures. Results are always collected in
//! input order and no floating-point reduction crosses item boundaries,
//! so outputs are identical under either mode and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable capping the rayon worker count.
pub const THREADS_ENV: &str = "CLOUDVISION_THREADS";

/// Builds the global thread pool from `CLOUDVISION_THREADS` when set.
/// Call once at process start; later calls are no-ops. Without the
/// `parallel` feature this does nothing.
pub fn init_thread_cap_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(raw) = std::env::var(THREADS_ENV) {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Name of the active execution mode, used to label benchmark results.
pub fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<U: Send, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U: Send, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}
