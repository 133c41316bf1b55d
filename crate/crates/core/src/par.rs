//! Data-parallel helpers. With the `parallel` feature the default executor
//! uses rayon; without it everything runs on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
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

/// Applies `f(index, chunk)` to consecutive `chunk`-byte slices of `data`.
pub fn map_chunks<T, F>(data: &[u8], chunk: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &[u8]) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => data.par_chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
        _ => data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
    }
}

/// Applies `f` to every item, preserving order.
pub fn map<I, T, F>(items: &[I], exec: Exec, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executors_agree() {
        let data: Vec<u8> = (0..10_000u32).map(|i| (i % 251) as u8).collect();
        let sum = |_: usize, c: &[u8]| c.iter().map(|&b| b as u64).sum::<u64>();
        assert_eq!(map_chunks(&data, 333, Exec::Sequential, sum), map_chunks(&data, 333, Exec::Parallel, sum));
        let items: Vec<u32> = (0..1000).collect();
        assert_eq!(map(&items, Exec::Sequential, |x| x * 3), map(&items, Exec::Parallel, |x| x * 3));
    }
}
