//! Worker pool sizing and order-stable parallel maps.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable holding the worker count; `1` gives single-threaded
/// runs.
pub const WORKERS_ENV: &str = "DDIM_ANOMALY_WORKERS";

/// Worker count from `requested`, else from [`WORKERS_ENV`], else rayon's
/// default.
pub fn worker_count(requested: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = requested {
        return positive(n).map(Some);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v} is not a worker count")))?;
            positive(n).map(Some)
        }
        Err(_) => Ok(None),
    }
}

fn positive(n: usize) -> Result<usize> {
    if n == 0 {
        Err(Error::Config("worker count must be > 0".into()))
    } else {
        Ok(n)
    }
}

/// Runs `f` inside a pool of `workers` threads.
pub fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Maps `f` over `items` in parallel; results keep the input order and the
/// first error in input order wins.
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let results: Vec<Result<U>> = items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<usize> = (0..200).collect();
        let out = with_pool(Some(4), || ordered_map(&items, |i, &x| Ok(i * 1000 + x * x))).unwrap().unwrap();
        assert_eq!(out, items.iter().map(|&x| x * 1000 + x * x).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_in_input_order() {
        let items: Vec<usize> = (0..50).collect();
        let err = ordered_map(&items, |_, &x| {
            if x % 7 == 3 {
                Err(Error::Config(format!("bad {x}")))
            } else {
                Ok(x)
            }
        })
        .unwrap_err();
        assert_eq!(err.to_string(), "invalid config: bad 3");
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(worker_count(Some(0)).is_err());
        assert_eq!(worker_count(Some(3)).unwrap(), Some(3));
    }
}
