//! Seeded k-means with k-means++ starts.
//!
//! Samples are sorted lexicographically before seeding, so the result depends
//! on the sample multiset and the seed but not on the order samples arrive in.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Centroids, sorted lexicographically.
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Lloyd stopped because assignments no longer changed.
    pub stable: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Sorts rows lexicographically with a total order on `f64`.
pub fn canonicalize(rows: &mut [Vec<f64>]) {
    rows.sort_by(|a, b| lex_cmp(a, b));
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus(samples: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![samples[rng.random_range(0..samples.len())].to_vec()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = samples.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..samples.len())
        };
        let c = samples[pick].to_vec();
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from k-means++ starts, at most [`MAX_LLOYD_ITERS`].
///
/// A cluster that loses all its samples is moved to the sample farthest from
/// its own centroid.
pub fn kmeans(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    if samples.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least {k} samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::InvalidArgument("k-means samples must share a non-zero dimension".into()));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means samples".into()));
    }
    let mut sorted: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
    sorted.sort_by(|a, b| lex_cmp(a, b));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(&sorted, k, &mut rng);
    let mut assign = vec![usize::MAX; sorted.len()];
    let mut iterations = 0;
    let mut stable = false;
    while iterations < MAX_LLOYD_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; sorted.len()];
        for (i, s) in sorted.iter().enumerate() {
            let (c, dd) = nearest(s, &centroids);
            dist[i] = dd;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            stable = true;
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in sorted.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(s.iter()).for_each(|(acc, v)| *acc += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("non-empty samples");
                centroids[c] = sorted[far].to_vec();
                dist[far] = 0.0;
                // force another pass
                assign[far] = usize::MAX;
            } else {
                let n = counts[c] as f64;
                centroids[c] = sums[c].iter().map(|v| v / n).collect();
            }
        }
    }
    canonicalize(&mut centroids);
    Ok(KMeans {
        centroids,
        iterations,
        stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let s = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
        let r = kmeans(&s, 1, 0).unwrap();
        assert_eq!(r.centroids, vec![vec![3.0, 1.0]]);
        assert!(r.stable);
    }

    #[test]
    fn too_few_samples() {
        assert!(kmeans(&[vec![1.0]], 2, 0).is_err());
        assert!(kmeans(&[vec![1.0]], 0, 0).is_err());
    }

    #[test]
    fn order_does_not_matter() {
        let mut s: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i * i % 11) as f64]).collect();
        let a = kmeans(&s, 4, 3).unwrap();
        s.reverse();
        let b = kmeans(&s, 4, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicates_do_not_break_seeding() {
        let s = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&s, 3, 1).unwrap();
        assert!(r.centroids.iter().all(|c| c == &vec![1.0, 1.0]));
    }
}
