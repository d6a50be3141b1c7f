//! k-fold partitioning of document indices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffles `0..n` with `seed` and cuts it into `k` contiguous folds whose
/// sizes differ by at most one. Every index lands in exactly one fold.
pub fn partition(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(k >= 1, "at least one fold");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let mut fold = idx[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    folds
}

/// Indices outside fold `i`, in ascending order.
pub fn complement(folds: &[Vec<usize>], i: usize) -> Vec<usize> {
    let mut rest: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    rest.sort_unstable();
    rest
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_folds_cover_everything_once() {
        for n in [10, 23, 101] {
            let folds = partition(n, 10, 3);
            assert_eq!(folds.len(), 10);
            let mut seen = vec![0; n];
            for f in &folds {
                for &i in f {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            assert_eq!(complement(&folds, 0).len(), n - folds[0].len());
        }
    }

    #[test]
    fn seed_controls_assignment() {
        assert_eq!(partition(30, 3, 1), partition(30, 3, 1));
        assert_ne!(partition(30, 3, 1), partition(30, 3, 2));
    }
}
