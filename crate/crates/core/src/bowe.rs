//! Bag-of-word-embeddings histograms and the PQ kernel.
//!
//! A document's histogram counts how many of its token vectors a codebook
//! assigns to each cluster. The PQ kernel compares two histograms by the
//! ordering of their components: every pair of bins `(i, j)` contributes
//! `sign(h_i - h_j) * sign(g_i - g_j)`, summed over ordered pairs, which is
//! `2 (P - Q)` for `P` concordant and `Q` discordant unordered pairs.
//! `P` and `Q` come from a merge-sort inversion count with explicit tie
//! groups, so the value is exact in `O(k log k)`.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::Codebook;
use crate::embed::DocTokenVectors;
use crate::error::{Error, Result};
use crate::kernel::{normalize_kernel_lenient, CrossKernel, KernelMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoweHistogram {
    pub doc_id: String,
    pub h: Vec<u32>,
}

impl BoweHistogram {
    pub fn total(&self) -> u64 {
        self.h.iter().map(|&c| c as u64).sum()
    }
}

pub fn build_histogram(doc: &DocTokenVectors, codebook: &Codebook) -> Result<BoweHistogram> {
    let mut h = vec![0u32; codebook.k()];
    for v in doc.iter() {
        h[codebook.assign(v)?] += 1;
    }
    Ok(BoweHistogram {
        doc_id: doc.doc_id.clone(),
        h,
    })
}

pub fn build_histograms(docs: &[DocTokenVectors], codebook: &Codebook) -> Result<Vec<BoweHistogram>> {
    docs.par_iter().map(|d| build_histogram(d, codebook)).collect()
}

fn tie_pairs(run: u64) -> u64 {
    run * run.saturating_sub(1) / 2
}

/// Pairs sharing the same value over consecutive runs of a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for x in sorted {
        if prev.as_ref() == Some(&x) {
            run += 1;
        } else {
            total += tie_pairs(run);
            run = 1;
            prev = Some(x);
        }
    }
    total + tie_pairs(run)
}

/// Number of pairs `i < j` with `a[i] > a[j]`, sorting `a` ascending.
fn count_inversions(a: &mut [u32], buf: &mut Vec<u32>) -> u64 {
    let n = a.len();
    buf.clear();
    buf.resize(n, 0);
    let mut inversions = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                // Equal values are not inversions: take from the left first.
                if a[i] <= a[j] {
                    buf[k] = a[i];
                    i += 1;
                } else {
                    buf[k] = a[j];
                    inversions += (mid - i) as u64;
                    j += 1;
                }
                k += 1;
            }
            buf[k..k + mid - i].copy_from_slice(&a[i..mid]);
            k += mid - i;
            buf[k..k + hi - j].copy_from_slice(&a[j..hi]);
            lo = hi;
        }
        a.copy_from_slice(buf);
        width *= 2;
    }
    inversions
}

/// `2 (P - Q)` over the given `(h, g)` component pairs. Reorders `pairs`.
fn pq_pairs(pairs: &mut [(u32, u32)], scratch: &mut Vec<u32>, buf: &mut Vec<u32>) -> i64 {
    let n = pairs.len() as u64;
    let n0 = tie_pairs(n);
    pairs.sort_unstable();
    let n1 = tied_pairs(pairs.iter().map(|p| p.0));
    let n3 = tied_pairs(pairs.iter().copied());
    scratch.clear();
    scratch.extend(pairs.iter().map(|p| p.1));
    // Sorted by (h, g): an inversion in g is exactly a discordant pair.
    let q = count_inversions(scratch, buf);
    let n2 = tied_pairs(scratch.iter());
    let p = n0 + n3 - n1 - n2 - q;
    2 * (p as i64 - q as i64)
}

pub fn pq_kernel_value(h: &[u32], g: &[u32]) -> Result<i64> {
    if h.len() != g.len() {
        return Err(Error::DimMismatch {
            expected: h.len(),
            got: g.len(),
        });
    }
    let mut pairs: Vec<(u32, u32)> = h.iter().copied().zip(g.iter().copied()).collect();
    Ok(pq_pairs(&mut pairs, &mut Vec::new(), &mut Vec::new()))
}

/// Nonzero bins of a histogram, ascending by index.
struct Support {
    idx: Vec<u32>,
    val: Vec<u32>,
}

impl Support {
    fn new(h: &[u32]) -> Self {
        let (idx, val) = h.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| (i as u32, c)).unzip();
        Support { idx, val }
    }
}

#[derive(Default)]
struct Scratch {
    pairs: Vec<(u32, u32)>,
    seq: Vec<u32>,
    buf: Vec<u32>,
}

/// PQ value using only the union of both supports. A bin that is zero in
/// both histograms ties with every other zero-zero bin; against a bin with
/// `h_j > 0` and `g_j > 0` it is concordant, against anything else tied.
fn pq_sparse(k: usize, a: &Support, b: &Support, s: &mut Scratch) -> i64 {
    s.pairs.clear();
    let (mut i, mut j) = (0, 0);
    let mut both = 0i64;
    while i < a.idx.len() || j < b.idx.len() {
        let ai = a.idx.get(i).copied().unwrap_or(u32::MAX);
        let bj = b.idx.get(j).copied().unwrap_or(u32::MAX);
        if ai == bj {
            s.pairs.push((a.val[i], b.val[j]));
            both += 1;
            i += 1;
            j += 1;
        } else if ai < bj {
            s.pairs.push((a.val[i], 0));
            i += 1;
        } else {
            s.pairs.push((0, b.val[j]));
            j += 1;
        }
    }
    let zeros = (k - s.pairs.len()) as i64;
    pq_pairs(&mut s.pairs, &mut s.seq, &mut s.buf) + 2 * zeros * both
}

fn check_lengths(histograms: &[&BoweHistogram]) -> Result<usize> {
    let k = histograms.first().map_or(0, |h| h.h.len());
    for h in histograms {
        if h.h.len() != k {
            return Err(Error::DimMismatch {
                expected: k,
                got: h.h.len(),
            });
        }
    }
    Ok(k)
}

/// Raw (unnormalized) square PQ matrix.
pub fn pq_kernel_matrix_raw(histograms: &[BoweHistogram]) -> Result<KernelMatrix> {
    let k = check_lengths(&histograms.iter().collect::<Vec<_>>())?;
    let supports: Vec<Support> = histograms.iter().map(|h| Support::new(&h.h)).collect();
    let n = histograms.len();
    let mut values = vec![0.0f64; n * n];
    values.par_chunks_mut(n.max(1)).enumerate().for_each_init(Scratch::default, |s, (i, row)| {
        for j in 0..=i {
            row[j] = pq_sparse(k, &supports[i], &supports[j], s) as f64;
        }
    });
    for i in 0..n {
        for j in (i + 1)..n {
            values[i * n + j] = values[j * n + i];
        }
    }
    KernelMatrix::square(histograms.iter().map(|h| h.doc_id.clone()).collect(), values)
}

/// Normalized square PQ matrix. Constant histograms (zero self-similarity)
/// get unit self-similarity and zero similarity to every other document.
pub fn pq_kernel_matrix(histograms: &[BoweHistogram]) -> Result<KernelMatrix> {
    normalize_kernel_lenient(&pq_kernel_matrix_raw(histograms)?)
}

/// PQ block between two histogram sets (typically test rows x train columns).
pub fn pq_kernel_cross(rows: &[BoweHistogram], cols: &[BoweHistogram]) -> Result<CrossKernel> {
    let k = check_lengths(&rows.iter().chain(cols).collect::<Vec<_>>())?;
    let rs: Vec<Support> = rows.iter().map(|h| Support::new(&h.h)).collect();
    let cs: Vec<Support> = cols.iter().map(|h| Support::new(&h.h)).collect();
    let c = cols.len();
    let mut values = vec![0.0f64; rows.len() * c];
    if c > 0 {
        values.par_chunks_mut(c).enumerate().for_each_init(Scratch::default, |s, (i, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                *out = pq_sparse(k, &rs[i], &cs[j], s) as f64;
            }
        });
    }
    let mut s = Scratch::default();
    let row_self = rs.iter().map(|a| pq_sparse(k, a, a, &mut s) as f64).collect();
    let col_self = cs.iter().map(|a| pq_sparse(k, a, a, &mut s) as f64).collect();
    Ok(CrossKernel {
        matrix: KernelMatrix::new(
            rows.iter().map(|h| h.doc_id.clone()).collect(),
            cols.iter().map(|h| h.doc_id.clone()).collect(),
            values,
        )?,
        row_self,
        col_self,
    })
}

pub fn write_histograms<W: Write>(histograms: &[BoweHistogram], mut w: W) -> Result<()> {
    for h in histograms {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_histograms<R: BufRead>(reader: R) -> Result<Vec<BoweHistogram>> {
    let mut out: Vec<BoweHistogram> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    check_lengths(&out.iter().collect::<Vec<_>>())?;
    Ok(out)
}

pub fn save_histograms(histograms: &[BoweHistogram], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_histograms(histograms, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_histograms(path: impl AsRef<Path>) -> Result<Vec<BoweHistogram>> {
    read_histograms(std::io::BufReader::new(std::fs::File::open(path)?))
}
