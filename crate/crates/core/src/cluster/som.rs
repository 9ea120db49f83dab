//! Self-organizing map on a rectangular grid, used as a density-aware
//! clusterer.
//!
//! Units start at `k` distinct training vectors drawn uniformly at random.
//! Every epoch presents all vectors in a freshly shuffled order; the
//! best-matching unit is the one with the largest cosine similarity and all
//! units move toward the input by `lr * theta * (x - w)`, where
//! `theta = exp(-d^2 / (2 sigma^2))` over grid distance `d`. `sigma` decays
//! linearly from `radius_start` to `radius_end` across epochs; the learning
//! rate is constant.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dot, most_similar_cosine, Codebook, Method, VectorSet};
use crate::error::{Error, Result};

/// Neighborhood weights below this are skipped; their updates are far below
/// f64 resolution of the weights.
const MIN_NEIGHBORHOOD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomConfig {
    pub k: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub radius_start: f64,
    pub radius_end: f64,
}

impl SomConfig {
    /// A `rows x cols` map with learning rate 0.25, 200 epochs and a
    /// neighborhood radius shrinking from half the longer side to 0.5.
    pub fn new(grid_rows: usize, grid_cols: usize, seed: u64) -> Self {
        SomConfig {
            k: grid_rows * grid_cols,
            grid_rows,
            grid_cols,
            learning_rate: 0.25,
            epochs: 200,
            seed,
            radius_start: grid_rows.max(grid_cols) as f64 / 2.0,
            radius_end: 0.5,
        }
    }

    /// Near-square grid holding exactly `k` units (25 x 20 for k = 500).
    pub fn for_k(k: usize, seed: u64) -> Self {
        let (rows, cols) = near_square_grid(k);
        SomConfig::new(rows, cols, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.grid_rows * self.grid_cols != self.k {
            return Err(Error::InvalidConfig(format!(
                "SOM grid {}x{} does not hold k = {} units",
                self.grid_rows, self.grid_cols, self.k
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("SOM learning rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("SOM needs at least one epoch".into()));
        }
        if !(self.radius_start > 0.0 && self.radius_end > 0.0) {
            return Err(Error::InvalidConfig("SOM radii must be > 0".into()));
        }
        Ok(())
    }

    /// Neighborhood radius used during `epoch` (0-based).
    pub fn radius_at(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.radius_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.radius_start + (self.radius_end - self.radius_start) * t
    }
}

/// The divisor pair of `k` closest to a square, rows >= cols.
pub fn near_square_grid(k: usize) -> (usize, usize) {
    let mut cols = (k as f64).sqrt().floor() as usize;
    while cols > 1 && k % cols != 0 {
        cols -= 1;
    }
    let cols = cols.max(1);
    (k / cols, cols)
}

pub fn som_fit(vectors: &VectorSet, config: &SomConfig) -> Result<Codebook> {
    config.validate()?;
    let k = config.k;
    if vectors.len() < k {
        return Err(Error::TooFewVectors {
            k,
            got: vectors.len(),
        });
    }
    if let Some(i) = vectors.iter().position(|v| dot(v, v) == 0.0) {
        return Err(Error::ZeroNormVector(i));
    }
    let dim = vectors.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let init = rand::seq::index::sample(&mut rng, vectors.len(), k);
    let mut weights: Vec<f64> = Vec::with_capacity(k * dim);
    for i in init.iter() {
        weights.extend_from_slice(vectors.row(i));
    }
    let mut norms: Vec<f64> = weights.chunks_exact(dim).map(|w| dot(w, w).sqrt()).collect();

    let coords: Vec<(i64, i64)> = (0..k)
        .map(|u| ((u / config.grid_cols) as i64, (u % config.grid_cols) as i64))
        .collect();
    let max_d2 = ((config.grid_rows - 1).pow(2) + (config.grid_cols - 1).pow(2)) as usize;

    let mut order: Vec<usize> = (0..vectors.len()).collect();
    let mut theta = vec![0.0f64; max_d2 + 1];
    for epoch in 0..config.epochs {
        let sigma = config.radius_at(epoch);
        for (d2, t) in theta.iter_mut().enumerate() {
            *t = (-(d2 as f64) / (2.0 * sigma * sigma)).exp();
        }
        order.shuffle(&mut rng);
        for &i in &order {
            let x = vectors.row(i);
            let bmu = most_similar_cosine(&weights, &norms, x);
            let (br, bc) = coords[bmu];
            for (u, &(r, c)) in coords.iter().enumerate() {
                let d2 = ((r - br) * (r - br) + (c - bc) * (c - bc)) as usize;
                let h = theta[d2];
                if h < MIN_NEIGHBORHOOD {
                    continue;
                }
                let step = config.learning_rate * h;
                let w = &mut weights[u * dim..(u + 1) * dim];
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj += step * (xj - *wj);
                }
                norms[u] = dot(w, w).sqrt();
            }
        }
    }

    Codebook::new(
        Method::Som,
        dim,
        weights,
        Some((config.grid_rows, config.grid_cols)),
        config.seed,
        serde_json::to_value(config)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0;
                for &t in &idx[i..=j] {
                    r[t] = avg;
                }
                i = j + 1;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(near_square_grid(500), (25, 20));
        assert_eq!(near_square_grid(50), (10, 5));
        assert_eq!(near_square_grid(7), (7, 1));
        assert_eq!(near_square_grid(1), (1, 1));
        let c = SomConfig::for_k(500, 0);
        assert_eq!((c.learning_rate, c.epochs, c.radius_start, c.radius_end), (0.25, 200, 12.5, 0.5));
    }

    #[test]
    fn grid_must_hold_k_units() {
        let mut c = SomConfig::new(5, 4, 0);
        c.k = 21;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let v = VectorSet::from_rows(&vec![vec![1.0, 0.0]; 30]).unwrap();
        assert!(matches!(som_fit(&v, &c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn input_errors() {
        let c = SomConfig::new(2, 2, 0);
        let v = VectorSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(som_fit(&v, &c), Err(Error::TooFewVectors { k: 4, got: 2 })));
        let v = VectorSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(som_fit(&v, &c), Err(Error::ZeroNormVector(2))));
    }

    #[test]
    fn single_unit_moves_toward_mean_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![3.0 + rng.random_range(-1.0..1.0), 1.0 + rng.random_range(-1.0..1.0)])
            .collect();
        let v = VectorSet::from_rows(&rows).unwrap();
        let cfg = SomConfig {
            epochs: 20,
            ..SomConfig::new(1, 1, 3)
        };
        let cb = som_fit(&v, &cfg).unwrap();
        let w = cb.center(0);
        let cos = (w[0] * 3.0 + w[1]) / (dot(w, w).sqrt() * 10f64.sqrt());
        assert!(cos > 0.98, "cosine to mean direction {cos}");
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let v = VectorSet::from_rows(&rows).unwrap();
        let cfg = SomConfig {
            epochs: 15,
            ..SomConfig::new(3, 2, 8)
        };
        let a = som_fit(&v, &cfg).unwrap();
        let b = som_fit(&v, &cfg).unwrap();
        assert_eq!(a.centers(), b.centers());
        assert_eq!(a.grid(), Some((3, 2)));
    }

    #[test]
    fn chain_preserves_topology() {
        // Points on a half annulus: the angle orders them along the chain.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::PI);
                let r = rng.random_range(0.9..1.1);
                vec![r * a.cos(), r * a.sin()]
            })
            .collect();
        let v = VectorSet::from_rows(&rows).unwrap();
        let cfg = SomConfig {
            epochs: 30,
            ..SomConfig::new(12, 1, 5)
        };
        let cb = som_fit(&v, &cfg).unwrap();
        let bmus = cb.assign_all(&v).unwrap();
        let (mut input_d, mut grid_d) = (Vec::new(), Vec::new());
        for _ in 0..500 {
            let (i, j) = (rng.random_range(0..400), rng.random_range(0..400));
            input_d.push(super::super::sq_dist(v.row(i), v.row(j)).sqrt());
            grid_d.push((bmus[i] as f64 - bmus[j] as f64).abs());
        }
        let rho = spearman(&input_d, &grid_d);
        assert!(rho > 0.0, "spearman {rho}");
    }
}
