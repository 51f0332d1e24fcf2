//! Data-parallel helpers. With the `parallel` feature the work is spread over the
//! rayon pool; without it, or when [`Execution::Sequential`] is requested, the
//! same closures run in order on the calling thread. Every helper writes each
//! output slot from exactly one closure call, so results do not depend on the
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

// Minimum items per rayon task; keeps per-level overhead small on short rows.
#[cfg(feature = "parallel")]
const MIN_LEN: usize = 64;

/// Calls `f(i, &mut out[i])` for every slot.
pub fn for_each_mut<T, F>(exec: Execution, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        out.par_iter_mut()
            .enumerate()
            .with_min_len(MIN_LEN)
            .for_each(|(i, slot)| f(i, slot));
        return;
    }
    let _ = exec;
    out.iter_mut().enumerate().for_each(|(i, slot)| f(i, slot));
}

/// Calls `f(i, &mut a[i], &mut b[i*stride..(i+1)*stride])`.
pub fn for_each_mut_with_chunks<T, U, F>(
    exec: Execution,
    a: &mut [T],
    b: &mut [U],
    stride: usize,
    f: F,
) where
    T: Send,
    U: Send,
    F: Fn(usize, &mut T, &mut [U]) + Sync + Send,
{
    debug_assert_eq!(a.len() * stride, b.len());
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        a.par_iter_mut()
            .zip(b.par_chunks_mut(stride))
            .enumerate()
            .with_min_len(MIN_LEN)
            .for_each(|(i, (x, c))| f(i, x, c));
        return;
    }
    let _ = exec;
    a.iter_mut()
        .zip(b.chunks_mut(stride))
        .enumerate()
        .for_each(|(i, (x, c))| f(i, x, c));
}

/// Collects `f(0..n)` in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let a = map_indexed(Execution::Parallel, 1000, f);
        let b = map_indexed(Execution::Sequential, 1000, f);
        assert_eq!(a, b);

        let mut x = vec![0.0; 500];
        let mut y = vec![0.0; 1000];
        for_each_mut_with_chunks(Execution::Parallel, &mut x, &mut y, 2, |i, v, c| {
            *v = i as f64;
            c[0] = 2.0 * i as f64;
            c[1] = -(i as f64);
        });
        assert_eq!(x[499], 499.0);
        assert_eq!(y[998], 998.0);
        assert_eq!(y[999], -499.0);
    }
}
