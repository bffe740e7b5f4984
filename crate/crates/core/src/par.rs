//! Data-parallel helpers.
//!
//! With the `parallel` feature the batch loops (map generation, probability
//! sweeps, Monte-Carlo seeds, exhaustive ECC checks, JSD grids) fan out over
//! rayon. Without it every call runs sequentially. Results are collected in
//! input order either way, so output never depends on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch loop executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let items: Vec<u64> = (0..1000).collect();
        let a = Exec::Sequential.map(&items, |x| x * x);
        let b = Exec::Parallel.map(&items, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(
            Exec::Sequential.map_range(50, |i| i + 1),
            Exec::Parallel.map_range(50, |i| i + 1)
        );
    }
}
