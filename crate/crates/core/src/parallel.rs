//! Deterministic fan-out over indexed work items.

/// Applies `f` to `0..n` on up to `jobs` threads with a fixed strided
/// assignment. Results come back in index order regardless of `jobs`.
pub fn map_indexed<R, F>(n: usize, jobs: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                scope.spawn(move || (j..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_jobs() {
        let one = map_indexed(17, 1, |i| i * i);
        assert_eq!(one, map_indexed(17, 4, |i| i * i));
        assert_eq!(one, map_indexed(17, 40, |i| i * i));
        assert!(map_indexed(0, 3, |i| i).is_empty());
    }
}
