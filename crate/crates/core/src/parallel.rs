//! Minimal deterministic parallel map.
//!
//! Work items are independent and results land in per-index slots, so the
//! output is identical for any thread count or scheduling order. Used for
//! embarrassingly parallel per-sample stages (dataset generation,
//! evaluation); training itself is single-threaded.

/// Apply `f` to `0..n`, returning results in index order. `threads == 1`
/// runs inline.
pub fn map_indexed<T, F>(threads: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let threads = threads.min(n);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ptr = SlotsPtr(slots.as_mut_ptr());

    std::thread::scope(|scope| {
        for _ in 0..threads {
            let next = &next;
            let f = &f;
            let slots_ptr = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                // Each index is claimed exactly once, so the write is unaliased.
                unsafe { *slots_ptr.0.add(i) = Some(value) };
            });
        }
    });

    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

struct SlotsPtr<T>(*mut Option<T>);
unsafe impl<T: Send> Sync for SlotsPtr<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_independent_of_thread_count() {
        let a = map_indexed(1, 100, |i| i * i);
        let b = map_indexed(4, 100, |i| i * i);
        let c = map_indexed(16, 100, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(map_indexed(4, 0, |i| i), Vec::<usize>::new());
        assert_eq!(map_indexed(4, 1, |i| i + 7), vec![7]);
    }
}
