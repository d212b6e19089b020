//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they are plain loops with identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
const MIN_CHUNK: usize = 64;

/// `(0..count).map(f).collect()`, one task per index.
pub fn map_range<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().with_max_len(1).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Ordered map over a slice.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
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

/// `Σ_{i<count} term(i)` for vectors of length `len`, where `term` adds its
/// contribution into the accumulator it is handed.
pub fn sum_vectors<F>(count: usize, len: usize, term: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if count >= 4 * MIN_CHUNK {
            return (0..count)
                .into_par_iter()
                .with_min_len(MIN_CHUNK)
                .fold(
                    || vec![0.0; len],
                    |mut acc, i| {
                        term(i, &mut acc);
                        acc
                    },
                )
                .reduce(
                    || vec![0.0; len],
                    |mut x, y| {
                        x.iter_mut().zip(&y).for_each(|(u, v)| *u += v);
                        x
                    },
                );
        }
    }
    let mut acc = vec![0.0; len];
    for i in 0..count {
        term(i, &mut acc);
    }
    acc
}

/// Builds `count` zero-initialized blocks of length `len`, filling block `i`
/// with `fill(i, block)`.
pub fn map_blocks<F>(count: usize, len: usize, fill: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut out = vec![0.0; count * len];
    if len == 0 {
        return out;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(len)
            .with_min_len(MIN_CHUNK)
            .enumerate()
            .for_each(|(i, blk)| fill(i, blk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(len).enumerate().for_each(|(i, blk)| fill(i, blk));
    }
    out
}

/// Runs `f` on a pool with `workers` threads (`0` means the global default).
/// Without the `parallel` feature `f` simply runs on the caller's thread.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_matches_serial() {
        let s = sum_vectors(1000, 3, |i, acc| {
            acc[0] += i as f64;
            acc[1] += 1.0;
            acc[2] += (i % 7) as f64;
        });
        assert_eq!(s[0], 499500.0);
        assert_eq!(s[1], 1000.0);
        let expect: f64 = (0..1000).map(|i| (i % 7) as f64).sum();
        assert_eq!(s[2], expect);
    }

    #[test]
    fn blocks_are_ordered() {
        let v = map_blocks(300, 2, |i, b| {
            b[0] = i as f64;
            b[1] = -(i as f64);
        });
        assert_eq!(v[2 * 299], 299.0);
        assert_eq!(v[2 * 17 + 1], -17.0);
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn single_worker_pool_runs() {
        assert_eq!(with_workers(1, || map_range(3, |i| i + 1)), vec![1, 2, 3]);
    }
}
