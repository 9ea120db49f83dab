//! Vector quantization of word vectors into `k` clusters, by Lloyd's k-means
//! ([`kmeans`]) or a self-organizing map ([`som`]), plus cluster occupancy
//! reports against a Zipf reference distribution.
//!
//! Codebook files are one compact JSON header line followed by a `KMAT1`
//! block holding the `k x dim` centers (same numeric layout as the kernel
//! cache, without the ID trailer).

pub mod kmeans;
pub mod som;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::DocTokenVectors;
use crate::error::{Error, Result};
use crate::kernel::{read_block, write_block};

pub use kmeans::{kmeans_fit, kmeans_fit_traced, KmeansFit, KMEANS_MAX_ITER};
pub use som::{som_fit, SomConfig};

/// Upper bound on the number of vectors a codebook is fitted on.
pub const MAX_FIT_VECTORS: usize = 2_000_000;

/// A dense set of equal-length vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f64>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Format(format!("{} values do not split into dim {dim}", data.len())));
        }
        Ok(VectorSet { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        VectorSet::new(dim, data)
    }

    /// Pools the token vectors of every document in order.
    pub fn pool(docs: &[DocTokenVectors]) -> Result<Self> {
        let dim = docs.iter().map(DocTokenVectors::dim).find(|&d| d > 0).unwrap_or(0);
        let mut data = Vec::new();
        for d in docs {
            if !d.is_empty() && d.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: d.dim(),
                });
            }
            data.extend_from_slice(d.data());
        }
        VectorSet::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Uniform subsample without replacement when more than `cap` vectors
    /// are present; kept vectors stay in their original order.
    pub fn subsample(&self, cap: usize, seed: u64) -> VectorSet {
        if self.len() <= cap {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, self.len(), cap).into_vec();
        keep.sort_unstable();
        let mut data = Vec::with_capacity(cap * self.dim);
        for i in keep {
            data.extend_from_slice(self.row(i));
        }
        VectorSet { dim: self.dim, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Som,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Method {
    /// k-means assigns by Euclidean distance, SOM by cosine similarity.
    pub fn metric(self) -> Metric {
        match self {
            Method::Kmeans => Metric::Euclidean,
            Method::Som => Metric::Cosine,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` cluster representatives and the rule used to assign vectors to them.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    method: Method,
    k: usize,
    dim: usize,
    centers: Vec<f64>,
    norms: Vec<f64>,
    grid: Option<(usize, usize)>,
    seed: u64,
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    method: Method,
    k: usize,
    dim: usize,
    grid: Option<(usize, usize)>,
    metric: Metric,
    seed: u64,
    config: serde_json::Value,
}

impl Codebook {
    pub fn new(
        method: Method,
        dim: usize,
        centers: Vec<f64>,
        grid: Option<(usize, usize)>,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return Err(Error::Format(format!("{} center values for dim {dim}", centers.len())));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Format("non-finite codebook center".into()));
        }
        let k = centers.len() / dim;
        if let Some((r, c)) = grid {
            if r * c != k {
                return Err(Error::InvalidConfig(format!("grid {r}x{c} does not hold {k} units")));
            }
        }
        let norms = centers.chunks_exact(dim).map(|c| dot(c, c).sqrt()).collect();
        Ok(Codebook {
            method,
            k,
            dim,
            centers,
            norms,
            grid,
            seed,
            config,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn metric(&self) -> Metric {
        self.method.metric()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &serde_json::Value {
        &self.config
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Nearest center (Euclidean) or most similar center (cosine); ties go
    /// to the lowest index.
    pub fn assign(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        match self.metric() {
            Metric::Euclidean => Ok(nearest_euclidean(&self.centers, self.dim, v).0),
            Metric::Cosine => {
                if dot(v, v) == 0.0 {
                    return Err(Error::ZeroNormVector(0));
                }
                Ok(most_similar_cosine(&self.centers, &self.norms, v))
            }
        }
    }

    /// Assigns every vector, in parallel. Zero vectors under cosine report
    /// their index in the set.
    pub fn assign_all(&self, vectors: &VectorSet) -> Result<Vec<usize>> {
        (0..vectors.len())
            .into_par_iter()
            .map(|i| {
                self.assign(vectors.row(i)).map_err(|e| match e {
                    Error::ZeroNormVector(_) => Error::ZeroNormVector(i),
                    other => other,
                })
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CodebookHeader {
            method: self.method,
            k: self.k,
            dim: self.dim,
            grid: self.grid,
            metric: self.metric(),
            seed: self.seed,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        write_block(&mut w, self.k, self.dim, &self.centers)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        let header: CodebookHeader = serde_json::from_slice(&line)
            .map_err(|e| Error::Format(format!("codebook header: {e}")))?;
        if header.metric != header.method.metric() {
            return Err(Error::Format(format!(
                "{:?} codebook cannot use {:?} assignment",
                header.method, header.metric
            )));
        }
        let (rows, cols, centers) = read_block(&mut r)?;
        if rows != header.k || cols != header.dim {
            return Err(Error::Format(format!(
                "center block {rows}x{cols} disagrees with header {}x{}",
                header.k, header.dim
            )));
        }
        Codebook::new(header.method, header.dim, centers, header.grid, header.seed, header.config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Codebook::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Index and squared distance of the nearest row of `centers`.
pub(crate) fn nearest_euclidean(centers: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Index of the row with the largest cosine similarity to `v`. `norms`
/// holds the row norms; zero rows never win against a non-zero row.
pub(crate) fn most_similar_cosine(centers: &[f64], norms: &[f64], v: &[f64]) -> usize {
    let dim = v.len();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let s = if norms[i] > 0.0 {
            dot(c, v) / norms[i]
        } else {
            f64::NEG_INFINITY
        };
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Cluster occupancy sorted by size, compared with a Zipf distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSizeReport {
    pub sizes_sorted: Vec<usize>,
    /// `sum_r |p_r - q_r|` with `p_r = size_r / total` and
    /// `q_r = (1/r) / H_k`.
    pub zipf_l1: f64,
}

impl ClusterSizeReport {
    pub fn from_sizes(mut sizes: Vec<usize>) -> Self {
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let zipf_l1 = zipf_l1(&sizes);
        ClusterSizeReport {
            sizes_sorted: sizes,
            zipf_l1,
        }
    }

    pub fn total(&self) -> usize {
        self.sizes_sorted.iter().sum()
    }

    /// Observed shares `p_r`.
    pub fn shares(&self) -> Vec<f64> {
        let total = self.total();
        self.sizes_sorted
            .iter()
            .map(|&s| if total == 0 { 0.0 } else { s as f64 / total as f64 })
            .collect()
    }

    /// CSV with columns `rank,size,p_r,q_r`, ranks starting at 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rank,size,p_r,q_r")?;
        let q = zipf_reference(self.sizes_sorted.len());
        for (r, (size, p)) in self.sizes_sorted.iter().zip(self.shares()).enumerate() {
            writeln!(w, "{},{},{},{}", r + 1, size, p, q[r])?;
        }
        Ok(())
    }
}

/// Zipf shares `q_r = (1/r) / H_k` for ranks `1..=k`.
pub fn zipf_reference(k: usize) -> Vec<f64> {
    let harmonic: f64 = (1..=k).map(|r| 1.0 / r as f64).sum();
    (1..=k).map(|r| 1.0 / r as f64 / harmonic).collect()
}

/// L1 distance between the normalized, descending `sizes` and the Zipf
/// reference of the same length.
pub fn zipf_l1(sizes_sorted: &[usize]) -> f64 {
    let total: usize = sizes_sorted.iter().sum();
    zipf_reference(sizes_sorted.len())
        .iter()
        .zip(sizes_sorted)
        .map(|(q, &s)| {
            let p = if total == 0 { 0.0 } else { s as f64 / total as f64 };
            (p - q).abs()
        })
        .sum()
}

/// Assigns `vectors` and reports the occupancy distribution.
pub fn cluster_size_report(codebook: &Codebook, vectors: &VectorSet) -> Result<ClusterSizeReport> {
    let mut sizes = vec![0usize; codebook.k()];
    for c in codebook.assign_all(vectors)? {
        sizes[c] += 1;
    }
    Ok(ClusterSizeReport::from_sizes(sizes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(method: Method, centers: &[&[f64]]) -> Codebook {
        let dim = centers[0].len();
        Codebook::new(method, dim, centers.concat(), None, 0, serde_json::Value::Null).unwrap()
    }

    #[test]
    fn assign_examples() {
        let centers: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let refs: Vec<&[f64]> = centers.iter().map(Vec::as_slice).collect();
        let cb = book(Method::Kmeans, &refs);
        assert_eq!(cb.assign(&[7.0, 0.0]).unwrap(), 7);
        assert!(matches!(cb.assign(&[1.0]), Err(Error::DimMismatch { expected: 2, got: 1 })));

        let cb = book(Method::Kmeans, &[&[0.0, 0.0], &[9.0, 9.0], &[-1.0, 0.0], &[9.0, 9.0], &[9.0, 9.0], &[1.0, 0.0]]);
        assert_eq!(cb.assign(&[0.0, 0.0]).unwrap(), 0);
        // Equidistant from centers 2 and 5.
        let cb = book(Method::Kmeans, &[&[5.0, 5.0], &[6.0, 6.0], &[-1.0, 0.0], &[7.0, 7.0], &[8.0, 8.0], &[1.0, 0.0]]);
        assert_eq!(cb.assign(&[0.0, 0.0]).unwrap(), 2);
    }

    #[test]
    fn cosine_assignment() {
        let cb = book(Method::Som, &[&[1.0, 0.0], &[0.0, 5.0], &[0.0, 1.0]]);
        assert_eq!(cb.metric(), Metric::Cosine);
        assert_eq!(cb.assign(&[0.1, 3.0]).unwrap(), 1);
        assert!(matches!(cb.assign(&[0.0, 0.0]), Err(Error::ZeroNormVector(_))));
        let set = VectorSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(cb.assign_all(&set), Err(Error::ZeroNormVector(1))));
    }

    #[test]
    fn size_report_examples() {
        let r = ClusterSizeReport::from_sizes(vec![0, 0, 9, 0]);
        assert_eq!(r.sizes_sorted, [9, 0, 0, 0]);
        assert_eq!(r.shares(), [1.0, 0.0, 0.0, 0.0]);

        let r = ClusterSizeReport::from_sizes(vec![5, 5]);
        assert!((r.zipf_l1 - 1.0 / 3.0).abs() < 1e-15);

        // 60/30/20 is exactly Zipf for k = 3.
        let r = ClusterSizeReport::from_sizes(vec![20, 60, 30]);
        assert!(r.zipf_l1.abs() < 1e-15);
    }

    #[test]
    fn report_counts_assignments() {
        let cb = book(Method::Kmeans, &[&[0.0], &[10.0]]);
        let set = VectorSet::from_rows(&[vec![0.1], vec![9.0], vec![11.0], vec![12.0]]).unwrap();
        let r = cluster_size_report(&cb, &set).unwrap();
        assert_eq!(r.sizes_sorted, [3, 1]);
        assert_eq!(r.total(), set.len());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("rank,size,p_r,q_r\n1,3,0.75,"));
    }

    #[test]
    fn codebook_file_round_trip() {
        let cb = Codebook::new(
            Method::Som,
            2,
            vec![1.0, 2.0, 3.0, 4.5],
            Some((2, 1)),
            7,
            serde_json::json!({"epochs": 3}),
        )
        .unwrap();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[nl + 1..nl + 6], b"KMAT1");
        assert_eq!(Codebook::read_from(buf.as_slice()).unwrap(), cb);
    }

    #[test]
    fn pool_and_subsample() {
        let a = DocTokenVectors::new("a".into(), 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DocTokenVectors::new("b".into(), 2, vec![]).unwrap();
        let c = DocTokenVectors::new("c".into(), 2, vec![5.0, 6.0]).unwrap();
        let set = VectorSet::pool(&[a, b, c]).unwrap();
        assert_eq!(set.len(), 3);
        let sub = set.subsample(2, 1);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub, set.subsample(2, 1));
        assert_eq!(set.subsample(10, 1), set);
    }
}
