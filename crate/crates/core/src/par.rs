//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon once the
//! workload passes a size threshold; without it everything runs on the
//! calling thread. Results never depend on the thread count: every helper
//! computes each output element independently.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of scalar multiply-adds before a kernel goes parallel.
pub const PARALLEL_WORK_THRESHOLD: usize = 1 << 15;

/// Whether this build was compiled with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `out`.
///
/// `work` is the caller's estimate of the total cost; small jobs stay serial.
pub fn for_each_row_mut<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if work >= PARALLEL_WORK_THRESHOLD && out.len() > row_len {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fallible order-preserving map; returns the first error by index order.
pub fn try_map<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_visited_once_in_place() {
        let mut data = vec![0usize; 12];
        for_each_row_mut(&mut data, 3, usize::MAX, |i, row| {
            for v in row.iter_mut() {
                *v += i;
            }
        });
        assert_eq!(data, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert!(ys.iter().enumerate().all(|(i, &y)| y == 2 * i as u32));
        assert_eq!(map_range(4, |i| i + 1), vec![1, 2, 3, 4]);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> = try_map(&xs, |&x| if x >= 3 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(3));
    }
}
