use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Scalar;

pub const KMEANS_ITERS: usize = 20;

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (squared L2), ties to the lower index.
pub(crate) fn nearest<T: Scalar>(row: &[T], centroids: &[T], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (c, cen) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(row, cen);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// k-means++ seeding followed by a fixed number of Lloyd iterations.
/// Returns the flat `k×dim` centroid matrix and each row's assignment.
pub(crate) fn kmeans<T: Scalar>(
    rows: &[T],
    dim: usize,
    k: usize,
    seed: u64,
) -> (Vec<T>, Vec<usize>) {
    let n = rows.len() / dim;
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<T> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first)).f64()).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let new = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), new).f64());
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(row(i), &centroids, dim);
        }
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                let inv = T::one() / T::c(counts[c] as f64);
                for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
    }
    for (i, a) in assign.iter_mut().enumerate() {
        *a = nearest(row(i), &centroids, dim);
    }
    (centroids, assign)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_clusters() {
        let rows = [0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0];
        let (_, assign) = kmeans::<f64>(&rows, 2, 2, 3);
        assert_eq!(assign[0], assign[1]);
        assert_eq!(assign[2], assign[3]);
        assert_ne!(assign[0], assign[2]);
    }

    #[test]
    fn deterministic_for_seed() {
        let rows: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64).collect();
        assert_eq!(kmeans(&rows, 2, 4, 9), kmeans(&rows, 2, 4, 9));
    }
}
