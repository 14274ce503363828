//! Order-preserving data-parallel map. With the `parallel` feature (the
//! default) the work fans out over rayon; without it the same code runs
//! sequentially. Results are collected in input order and reduced
//! deterministically, so both paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential reference implementation; always available (benchmarks
/// compare it against the rayon path).
pub fn map_seq<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_par<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Feature-dispatched map used by training, evaluation and rollout scoring.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        map_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

/// Caps the rayon worker count for this process. No-op without the
/// `parallel` feature or when a pool already exists.
pub fn configure_jobs(jobs: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let out = map(&items, |&x| x * x);
        let expect: Vec<u64> = items.iter().map(|&x| x * x).collect();
        assert_eq!(out, expect);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_and_seq_agree_bitwise_on_floats() {
        let items: Vec<f64> = (0..500).map(|i| i as f64 * 0.37).collect();
        let f = |x: &f64| (x.sin() * 1e6).mul_add(*x, 1.0 / (x + 0.5));
        assert_eq!(map_par(&items, f), map_seq(&items, f));
    }
}
