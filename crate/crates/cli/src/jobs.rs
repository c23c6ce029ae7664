//! Deterministic fan-out over sequences.

/// Applies `f` to every item on up to `threads` OS threads and returns the
/// results in input order. Items are handed out as contiguous index chunks,
/// so the output is identical for every thread count; `f` receives the
/// item's original index.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut per_chunk: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, slice) in items.chunks(chunk).enumerate() {
            let f = &f;
            let base = ci * chunk;
            handles.push(scope.spawn(move || {
                slice
                    .iter()
                    .enumerate()
                    .map(|(j, t)| f(base + j, t))
                    .collect::<Vec<R>>()
            }));
        }
        per_chunk = handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
    });
    per_chunk.into_iter().flatten().collect()
}
