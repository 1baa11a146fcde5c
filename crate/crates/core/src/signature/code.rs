//! Lexicographic ranking of compositions of `k` into six parts.

use crate::ingest::CellType;

/// Largest neighborhood size whose codes are guaranteed to fit in `u64`.
pub const MAX_CODE_K: u32 = 4096;

const PARTS: usize = CellType::COUNT;

fn binomial(n: u64, r: u64) -> u64 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u64 = 1;
    for i in 0..r {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Number of ways to write `total` as an ordered sum of `parts` non-negative
/// integers (stars and bars).
pub fn composition_count(total: u32, parts: usize) -> u64 {
    if parts == 0 {
        return u64::from(total == 0);
    }
    binomial(u64::from(total) + parts as u64 - 1, parts as u64 - 1)
}

pub(super) fn rank(counts: &[u32; PARTS]) -> u64 {
    let mut remaining: u32 = counts.iter().sum();
    let mut code = 0;
    for (i, &c) in counts.iter().enumerate().take(PARTS - 1) {
        let tail_parts = PARTS - 1 - i;
        for v in 0..c {
            code += composition_count(remaining - v, tail_parts);
        }
        remaining -= c;
    }
    code
}

pub(super) fn unrank(mut code: u64, k: u32) -> Option<[u32; PARTS]> {
    if k > MAX_CODE_K || code >= composition_count(k, PARTS) {
        return None;
    }
    let mut counts = [0u32; PARTS];
    let mut remaining = k;
    for (i, slot) in counts.iter_mut().enumerate().take(PARTS - 1) {
        let tail_parts = PARTS - 1 - i;
        let mut v = 0;
        loop {
            let block = composition_count(remaining - v, tail_parts);
            if code < block {
                break;
            }
            code -= block;
            v += 1;
        }
        *slot = v;
        remaining -= v;
    }
    counts[PARTS - 1] = remaining;
    Some(counts)
}
