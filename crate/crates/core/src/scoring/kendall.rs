use crate::error::{validation, Result};

fn check_permutation(r: &[usize]) -> Result<()> {
    let mut seen = vec![false; r.len()];
    for &x in r {
        if x >= r.len() || std::mem::replace(&mut seen[x], true) {
            return Err(validation("ranking is not a permutation of 0..n"));
        }
    }
    Ok(())
}

/// Count pairs `i < j` with `v[i] > v[j]` by merge sort.
fn count_inversions(v: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall tau-a between two rankings of the same `n` items, where
/// `rank_a[i]` is the position of item `i`. O(n log n).
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    let n = rank_a.len();
    if n < 2 {
        return Err(validation("Kendall tau needs at least two items"));
    }
    if rank_b.len() != n {
        return Err(validation("rankings cover different numbers of items"));
    }
    check_permutation(rank_a)?;
    check_permutation(rank_b)?;
    // Items in a-order, then count b-order inversions = discordant pairs.
    let mut by_a = vec![0usize; n];
    for (item, &pos) in rank_a.iter().enumerate() {
        by_a[pos] = item;
    }
    let mut seq: Vec<usize> = by_a.iter().map(|&item| rank_b[item]).collect();
    let discordant = count_inversions(&mut seq, &mut Vec::with_capacity(n));
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    Ok((pairs as f64 - 2.0 * discordant as f64) / pairs as f64)
}

/// Rank positions for scores: the highest score gets position 0, ties go
/// to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; scores.len()];
    for (pos, item) in order.into_iter().enumerate() {
        rank[item] = pos;
    }
    rank
}
