//! Elementwise kernel bodies and batch sweeps.
//!
//! With the `parallel` feature the bodies split large slices across the
//! global rayon pool, and batch sweeps run on a dedicated pool (so a sweep
//! item that blocks, e.g. a multi-rank simulation, never starves kernel
//! work). Without it everything runs sequentially. Results are bitwise
//! identical either way: only order-independent work is split.

/// Slices shorter than this are always processed sequentially.
pub const PAR_THRESHOLD: usize = 1 << 15;

pub mod seq {
    pub fn map_inplace<F: Fn(usize, &mut f64) + Sync + Send>(y: &mut [f64], f: F) {
        y.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }

    pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
        map_inplace(y, |i, v| *v += alpha * x[i]);
    }

    /// Row-wise CSR product; each row sums in column order.
    pub fn csr_mult(offsets: &[usize], cols: &[usize], vals: &[f64], x: &[f64], y: &mut [f64]) {
        map_inplace(y, |i, v| {
            let mut s = 0.0;
            for k in offsets[i]..offsets[i + 1] {
                s += vals[k] * x[cols[k]];
            }
            *v = s;
        });
    }

    pub fn sweep<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
        items.iter().map(f).collect()
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;
    use std::sync::OnceLock;

    const CHUNK: usize = 1 << 13;

    pub fn map_inplace<F: Fn(usize, &mut f64) + Sync + Send>(y: &mut [f64], f: F) {
        y.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let base = c * CHUNK;
            chunk.iter_mut().enumerate().for_each(|(i, v)| f(base + i, v));
        });
    }

    pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
        map_inplace(y, |i, v| *v += alpha * x[i]);
    }

    pub fn csr_mult(offsets: &[usize], cols: &[usize], vals: &[f64], x: &[f64], y: &mut [f64]) {
        map_inplace(y, |i, v| {
            let mut s = 0.0;
            for k in offsets[i]..offsets[i + 1] {
                s += vals[k] * x[cols[k]];
            }
            *v = s;
        });
    }

    fn sweep_pool() -> &'static rayon::ThreadPool {
        static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
        POOL.get_or_init(|| {
            rayon::ThreadPoolBuilder::new()
                .thread_name(|i| format!("sweep-{i}"))
                .stack_size(16 << 20)
                .build()
                .expect("build sweep pool")
        })
    }

    pub fn sweep<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
        sweep_pool().install(|| items.par_iter().map(f).collect())
    }
}

pub fn map_inplace<F: Fn(usize, &mut f64) + Sync + Send>(y: &mut [f64], f: F) {
    #[cfg(feature = "parallel")]
    if y.len() >= PAR_THRESHOLD {
        return par::map_inplace(y, f);
    }
    seq::map_inplace(y, f)
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len());
    map_inplace(y, |i, v| *v += alpha * x[i]);
}

pub fn csr_mult(offsets: &[usize], cols: &[usize], vals: &[f64], x: &[f64], y: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if y.len() >= PAR_THRESHOLD / 4 {
        return par::csr_mult(offsets, cols, vals, x, y);
    }
    seq::csr_mult(offsets, cols, vals, x, y)
}

/// Maps `f` over independent items (benchmark sizes, random trials).
pub fn sweep<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    #[cfg(feature = "parallel")]
    return par::sweep(items, f);
    #[cfg(not(feature = "parallel"))]
    seq::sweep(items, f)
}

/// Sequential dot product in index order.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |acc, (a, b)| acc + a * b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_matches_sequential_bitwise() {
        let n = PAR_THRESHOLD * 3 + 17;
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut a: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut b = a.clone();
        axpy(&mut a, 0.3, &x);
        seq::axpy(&mut b, 0.3, &x);
        assert_eq!(a, b);

        let offsets: Vec<usize> = (0..=n).map(|i| 2 * i).collect();
        let cols: Vec<usize> = (0..n).flat_map(|i| [i, (i * 7) % n]).collect();
        let vals: Vec<f64> = (0..2 * n).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        let mut y1 = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        csr_mult(&offsets, &cols, &vals, &x, &mut y1);
        seq::csr_mult(&offsets, &cols, &vals, &x, &mut y2);
        assert_eq!(y1, y2);
        assert_eq!(sweep(&[1, 2, 3], |v| v * 2), vec![2, 4, 6]);
    }
}
