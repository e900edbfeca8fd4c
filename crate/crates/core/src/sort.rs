//! Stable least-significant-digit radix sort of 64-bit keys with payloads.

const RADIX_BITS: u32 = 8;
const BUCKETS: usize = 1 << RADIX_BITS;

/// Sort `(key, value)` pairs ascending by key. Equal keys keep their input
/// order. Byte positions where every key agrees are skipped.
pub fn radix_sort_pairs(pairs: &mut Vec<(u64, u32)>) {
    let n = pairs.len();
    if n < 2 {
        return;
    }
    let mut counts = [[0usize; BUCKETS]; 8];
    for &(k, _) in pairs.iter() {
        for (pass, c) in counts.iter_mut().enumerate() {
            c[((k >> (pass as u32 * RADIX_BITS)) & 0xff) as usize] += 1;
        }
    }
    let mut src = std::mem::take(pairs);
    let mut dst = vec![(0u64, 0u32); n];
    for (pass, count) in counts.iter().enumerate() {
        if count.contains(&n) {
            continue;
        }
        let mut offsets = [0usize; BUCKETS];
        let mut acc = 0;
        for (o, &c) in offsets.iter_mut().zip(count) {
            *o = acc;
            acc += c;
        }
        let shift = pass as u32 * RADIX_BITS;
        for &item in &src {
            let b = ((item.0 >> shift) & 0xff) as usize;
            dst[offsets[b]] = item;
            offsets[b] += 1;
        }
        std::mem::swap(&mut src, &mut dst);
    }
    *pairs = src;
}
