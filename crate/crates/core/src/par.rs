//! Worker-pool mapping used by experiment sweeps.
//!
//! The `parallel` feature (default on) backs this with a rayon pool; without
//! it the same API runs sequentially. Output order always matches input
//! order, and callers aggregate from the collected vector, so results are
//! identical for any worker count.

/// Map `f` over `items`, preserving order. `workers == 1` always runs the
/// sequential path; `workers == 0` means "let the pool pick".
pub fn map_ordered<T, U, F>(workers: usize, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers != 1 {
            use rayon::prelude::*;
            let run = || items.par_iter().map(&f).collect();
            return if workers == 0 {
                run()
            } else {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("worker pool")
                    .install(run)
            };
        }
    }
    let _ = workers;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_all_worker_counts() {
        let items: Vec<u64> = (0..200).collect();
        let seq = map_ordered(1, &items, |v| v * v);
        for workers in [0, 2, 8] {
            let par = map_ordered(workers, &items, |v| v * v);
            assert_eq!(seq, par);
        }
    }
}
