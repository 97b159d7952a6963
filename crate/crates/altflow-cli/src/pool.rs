//! Tiny fixed-size worker pool for multi-seed runs. Jobs are independent
//! and internally deterministic, so results are identical for any thread
//! count; ALTFLOW_THREADS caps the parallelism.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use altflow::error::{Error, Result};

pub fn threads_from_env() -> Result<usize> {
    match std::env::var("ALTFLOW_THREADS") {
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::invalid_spec(format!(
                    "ALTFLOW_THREADS must be a positive integer, got {raw:?}"
                ))
            }),
        Err(_) => Ok(1),
    }
}

/// Run `job(0..n_jobs)` on up to `threads` workers and return the results in
/// job order. The first error in job order wins, regardless of which worker
/// hit it first.
pub fn run_jobs<T, F>(n_jobs: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, n_jobs.max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n_jobs).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_jobs {
                    break;
                }
                let result = job(i);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("job ran"))
        .collect()
}
