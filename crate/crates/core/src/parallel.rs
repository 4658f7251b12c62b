//! Deterministic fan-out over independent work items.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;

/// Environment variable that caps worker threads.
pub const WORKERS_ENV: &str = "MECHBENCH_WORKERS";

/// Worker threads to use: `MECHBENCH_WORKERS` if set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates `f(0..n)` on up to `workers` threads. Results come back in index
/// order; on failure the error of the lowest failing index is returned, so
/// the outcome does not depend on scheduling.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::MechError;

    #[test]
    fn results_keep_index_order() {
        let out = par_map(100, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn lowest_failing_index_wins() {
        let err = par_map(50, 8, |i| if i % 7 == 3 { Err(MechError::InvalidConfig(i.to_string())) } else { Ok(i) }).unwrap_err();
        assert!(matches!(err, MechError::InvalidConfig(s) if s == "3"));
    }
}
