//! Scoped fan-out capped by `WILDGROUND_THREADS`; results keep input order.

use anyhow::Result;

pub const ENV: &str = "WILDGROUND_THREADS";

/// Worker count from the environment, 1 when unset or invalid.
pub fn count() -> usize {
    std::env::var(ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn map<I: Sync, R: Send>(items: &[I], f: impl Fn(usize, &I) -> Result<R> + Sync) -> Result<Vec<R>> {
    let n = count().min(items.len().max(1));
    if n <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(n);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, x)| f(c * chunk + j, x))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}
