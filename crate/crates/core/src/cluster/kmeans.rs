//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{nearest_euclidean, sq_dist, Codebook, Method, VectorSet};
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Sum of squared distances to assigned centers: first after the
    /// seeding assignment, then after every center update.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn kmeans_fit(vectors: &VectorSet, k: usize, seed: u64) -> Result<Codebook> {
    Ok(kmeans_fit_traced(vectors, k, seed, KMEANS_MAX_ITER)?.codebook)
}

/// k-means++ seeding: the first center uniformly, every further one with
/// probability proportional to its squared distance from the chosen set.
fn seed_centers(vectors: &VectorSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = vectors.len();
    let dim = vectors.dim();
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(vectors.row(first));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(vectors.row(i), vectors.row(first)))
        .collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            // Rounding can leave the cursor on a zero-weight tail.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            }
            pick
        } else {
            // Every remaining point coincides with a center.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = vectors.row(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_dist(vectors.row(i), &c);
            if nd < *d {
                *d = nd;
            }
        });
        centers.extend_from_slice(&c);
    }
    centers
}

fn assign(vectors: &VectorSet, centers: &[f64]) -> Vec<(usize, f64)> {
    let dim = vectors.dim();
    (0..vectors.len())
        .into_par_iter()
        .map(|i| nearest_euclidean(centers, dim, vectors.row(i)))
        .collect()
}

fn objective(vectors: &VectorSet, centers: &[f64], labels: &[usize]) -> f64 {
    let dim = vectors.dim();
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(vectors.row(i), &centers[c * dim..(c + 1) * dim]))
        .sum()
}

/// Lloyd iterations until no assignment changes or `max_iter` updates.
/// Empty clusters are re-seeded with the point farthest from its center.
pub fn kmeans_fit_traced(vectors: &VectorSet, k: usize, seed: u64, max_iter: usize) -> Result<KmeansFit> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if vectors.len() < k {
        return Err(Error::TooFewVectors {
            k,
            got: vectors.len(),
        });
    }
    let dim = vectors.dim();
    let n = vectors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(vectors, k, &mut rng);

    let mut assigned = assign(vectors, &centers);
    let mut labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    let mut history = vec![objective(vectors, &centers, &labels)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        let mut counts = vec![0usize; k];
        for &c in &labels {
            counts[c] += 1;
        }
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                .expect("n >= k leaves a cluster with two members");
            counts[labels[far]] -= 1;
            counts[empty] = 1;
            labels[far] = empty;
            assigned[far] = (empty, 0.0);
        }

        let mut sums = vec![0.0f64; k * dim];
        for (i, &c) in labels.iter().enumerate() {
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(vectors.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *dst = s * inv;
            }
        }
        iterations += 1;
        history.push(objective(vectors, &centers, &labels));

        assigned = assign(vectors, &centers);
        let mut changed = false;
        for (i, (l, a)) in labels.iter_mut().zip(assigned.iter_mut()).enumerate() {
            if *l == a.0 {
                continue;
            }
            // A point tied between its current center and a lower-indexed one
            // stays put, so coincident centers cannot make Lloyd cycle.
            let current = sq_dist(vectors.row(i), &centers[*l * dim..(*l + 1) * dim]);
            if current <= a.1 {
                *a = (*l, current);
            } else {
                *l = a.0;
                changed = true;
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }

    let codebook = Codebook::new(
        Method::Kmeans,
        dim,
        centers,
        None,
        seed,
        serde_json::json!({ "k": k, "max_iter": max_iter, "iterations": iterations }),
    )?;
    Ok(KmeansFit {
        codebook,
        objective_history: history,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(rows: &[[f64; 2]]) -> VectorSet {
        VectorSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_center_is_the_mean() {
        let v = set(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.25], [7.0, 1.0]]);
        let cb = kmeans_fit(&v, 1, 3).unwrap();
        assert!((cb.center(0)[0] - 11.5 / 4.0).abs() < 1e-10);
        assert!((cb.center(0)[1] - 2.25 / 4.0).abs() < 1e-10);
    }

    /// Exhaustive search over 2-partitions of a small point set.
    fn best_two_partition(points: &[[f64; 2]]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64; 2]> = (0..n).filter(|&i| (mask >> i & 1 == 1) == side).map(|i| &points[i]).collect();
                let m = members.len() as f64;
                let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
                let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
                cost += members.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn two_separated_pairs() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]];
        assert_eq!(best_two_partition(&pts), 1.0);
        for seed in 0..10 {
            let fit = kmeans_fit_traced(&set(&pts), 2, seed, KMEANS_MAX_ITER).unwrap();
            let mut centers: Vec<Vec<f64>> = (0..2).map(|i| fit.codebook.center(i).to_vec()).collect();
            centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(centers, [vec![0.0, 0.5], vec![10.0, 10.5]]);
            assert_eq!(*fit.objective_history.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let v = set(&[[0.0, 0.0], [1.0, 5.0], [2.0, -3.0], [8.0, 8.0]]);
        let fit = kmeans_fit_traced(&v, 4, 1, KMEANS_MAX_ITER).unwrap();
        assert_eq!(*fit.objective_history.last().unwrap(), 0.0);
    }

    #[test]
    fn too_few_vectors() {
        let v = set(&[[0.0, 0.0]]);
        assert!(matches!(kmeans_fit(&v, 2, 0), Err(Error::TooFewVectors { k: 2, got: 1 })));
    }

    #[test]
    fn duplicates_and_empty_clusters() {
        // Five identical points and one outlier, k = 3: seeding must fall back
        // to coincident points and the fit must still produce 3 centers.
        let v = set(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [4.0, 4.0]]);
        let fit = kmeans_fit_traced(&v, 3, 2, KMEANS_MAX_ITER).unwrap();
        assert_eq!(fit.codebook.k(), 3);
        assert!(fit.converged);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let v = VectorSet::from_rows(&rows).unwrap();
        assert_eq!(kmeans_fit(&v, 8, 9).unwrap(), kmeans_fit(&v, 8, 9).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn objective_never_increases(seed in any::<u64>(), n in 5usize..120, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let v = VectorSet::from_rows(&rows).unwrap();
            let fit = kmeans_fit_traced(&v, k.min(n), seed, KMEANS_MAX_ITER).unwrap();
            for w in fit.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.objective_history);
            }
        }
    }
}
