//! Sequential and data-parallel execution of independent work items.
//!
//! Algorithms take an [`Exec`] and call [`Exec::map`]; results always come
//! back in input order, and every item derives its own random stream from
//! its index, so both strategies produce bit-identical output. Without the
//! `parallel` feature, [`Exec::Parallel`] runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this strategy actually fans out to a thread pool.
    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && *self == Exec::Parallel
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps over `0..n`.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` inside a pool of `workers` threads (or directly when sequential).
    pub fn install<R, F>(&self, workers: usize, f: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() && workers > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
        let _ = workers;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn strategies_agree_bitwise() {
        let root = Rng::new(11);
        let work = |i: usize| {
            let mut r = root.split_index(i as u64);
            (0..100).map(|_| r.normal()).sum::<f64>()
        };
        let a = Exec::Sequential.map_range(64, work);
        let b = Exec::Parallel.map_range(64, work);
        assert_eq!(a, b);
    }

    #[test]
    fn order_preserved() {
        let items: Vec<usize> = (0..1000).collect();
        let out = Exec::Parallel.map(&items, |&i| i * 2);
        assert!(out.iter().enumerate().all(|(i, &v)| v == 2 * i));
    }
}
