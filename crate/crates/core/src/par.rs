//! Task-level parallelism for batch evaluation.
//!
//! With the `parallel` feature, [`map_tasks`] runs on a dedicated rayon
//! pool of `jobs` threads. Without it, tasks run in order on the caller's
//! thread. Results always come back in input order.

#[cfg(feature = "parallel")]
use crate::Error;
use crate::Result;

/// Map `f` over `items`, returning results in input order.
/// The first error in input order wins.
#[cfg(feature = "parallel")]
pub fn map_tasks<I, O, F>(items: Vec<I>, jobs: usize, f: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<O>> = pool.install(|| items.into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_tasks<I, O, F>(items: Vec<I>, jobs: usize, f: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    let _ = jobs;
    items.into_iter().map(f).collect()
}

/// Whether this build can actually run tasks concurrently.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn order_is_preserved() {
        let out = map_tasks((0..100).collect(), 4, |x: u64| Ok(x * x)).unwrap();
        assert_eq!(out, (0..100).map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_in_order() {
        let r = map_tasks((0..20).collect(), 8, |x: usize| {
            if x == 7 || x == 13 {
                Err(Error::Config(format!("bad {x}")))
            } else {
                Ok(x)
            }
        });
        assert_eq!(
            r.unwrap_err().to_string(),
            Error::Config("bad 7".into()).to_string()
        );
    }

    #[test]
    fn empty_input() {
        let out: Vec<u8> = map_tasks(Vec::<u8>::new(), 3, Ok).unwrap();
        assert!(out.is_empty());
    }
}
