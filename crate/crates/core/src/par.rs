//! Order-preserving parallel map over independent work items.

use std::thread;

use crate::error::Result;

/// Applies `f` to every item, splitting the slice into `threads` contiguous
/// chunks. Results come back in input order; the first error wins.
pub fn try_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Worker count to use when parallelism is requested.
pub fn available_threads() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn preserves_order() {
        let v: Vec<usize> = (0..103).collect();
        let out = try_map(&v, 4, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn propagates_errors() {
        let v = [1, 2, 3];
        let r = try_map(&v, 2, |&x| if x == 2 { Err(Error::InvalidArgument("x".into())) } else { Ok(x) });
        assert!(r.is_err());
    }
}
