//! Character n-gram histograms and the histogram intersection string kernel.
//!
//! `k(x, y) = sum over n in N, sum over n-grams g of min(#(x, g), #(y, g))`
//!
//! N-grams are windows of Unicode scalar values. Kernel values are
//! accumulated as `u64` and converted to `f64` only when the matrix is
//! assembled, so results do not depend on the number of worker threads.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{CrossKernel, KernelMatrix};

/// A non-empty, sorted, duplicate-free set of n-gram lengths.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NgramRange(Vec<usize>);

impl NgramRange {
    pub fn new(mut lengths: Vec<usize>) -> Result<Self> {
        lengths.sort_unstable();
        lengths.dedup();
        if lengths.is_empty() || lengths[0] == 0 {
            return Err(Error::InvalidConfig("n-gram lengths must be non-empty and >= 1".into()));
        }
        Ok(NgramRange(lengths))
    }

    pub fn lengths(&self) -> &[usize] {
        &self.0
    }

    /// Parses a comma-separated list such as `3,4,5`.
    pub fn parse(s: &str) -> Result<Self> {
        let lengths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad n-gram length {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lengths)
    }
}

impl Default for NgramRange {
    fn default() -> Self {
        NgramRange(vec![3, 4, 5])
    }
}

impl TryFrom<Vec<usize>> for NgramRange {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        NgramRange::new(v)
    }
}

impl From<NgramRange> for Vec<usize> {
    fn from(r: NgramRange) -> Self {
        r.0
    }
}

/// Occurrence counts of every length-`n` character window of a string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramHistogram {
    n: usize,
    counts: HashMap<String, u32>,
}

impl NgramHistogram {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &HashMap<String, u32> {
        &self.counts
    }

    pub fn get(&self, gram: &str) -> u32 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `sum_g min(#(self, g), #(other, g))`, iterating the smaller map.
    pub fn intersection(&self, other: &NgramHistogram) -> u64 {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .map(|(g, &c)| c.min(large.get(g)) as u64)
            .sum()
    }
}

/// Counts the contiguous length-`n` character windows of `text`.
///
/// # Panics
///
/// Panics if `n == 0`.
pub fn extract_ngrams(text: &str, n: usize) -> NgramHistogram {
    assert!(n >= 1, "n-gram length must be >= 1");
    let chars: Vec<char> = text.chars().collect();
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    NgramHistogram { n, counts }
}

/// Histogram intersection string kernel summed over the n-gram lengths.
pub fn hisk_value(x: &str, y: &str, range: &NgramRange) -> u64 {
    range
        .lengths()
        .iter()
        .map(|&n| extract_ngrams(x, n).intersection(&extract_ngrams(y, n)))
        .sum()
}

/// A document as sorted `(ngram id, count)` pairs over all lengths in a range.
type SparseCounts = Vec<(u32, u32)>;

/// Interns the n-grams of every document into a shared id space. Ids are
/// assigned in document order, so the result is deterministic.
fn featurize(docs: &[&str], range: &NgramRange) -> Vec<SparseCounts> {
    let mut vocab: HashMap<String, u32> = HashMap::new();
    let mut gram = String::new();
    docs.iter()
        .map(|doc| {
            let chars: Vec<char> = doc.chars().collect();
            let mut ids = Vec::new();
            for &n in range.lengths() {
                if chars.len() < n {
                    continue;
                }
                for w in chars.windows(n) {
                    gram.clear();
                    gram.extend(w);
                    let next = vocab.len() as u32;
                    let id = match vocab.get(gram.as_str()) {
                        Some(&id) => id,
                        None => {
                            vocab.insert(gram.clone(), next);
                            next
                        }
                    };
                    ids.push(id);
                }
            }
            ids.sort_unstable();
            let mut sparse: SparseCounts = Vec::new();
            for id in ids {
                match sparse.last_mut() {
                    Some((last, c)) if *last == id => *c += 1,
                    _ => sparse.push((id, 1)),
                }
            }
            sparse
        })
        .collect()
}

fn intersect(a: &[(u32, u32)], b: &[(u32, u32)]) -> u64 {
    let (mut i, mut j, mut sum) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += a[i].1.min(b[j].1) as u64;
                i += 1;
                j += 1;
            }
        }
    }
    sum
}

fn self_similarity(a: &[(u32, u32)]) -> u64 {
    a.iter().map(|&(_, c)| c as u64).sum()
}

/// Square HISK matrix over `docs`. Histograms are built once; the lower
/// triangle is computed in parallel row blocks and mirrored.
pub fn compute_hisk_matrix(ids: Vec<String>, docs: &[String], range: &NgramRange) -> Result<KernelMatrix> {
    if docs.is_empty() {
        return Err(Error::InvalidConfig("no documents".into()));
    }
    if ids.len() != docs.len() {
        return Err(Error::DimMismatch {
            expected: docs.len(),
            got: ids.len(),
        });
    }
    let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    let feats = featurize(&refs, range);
    let n = feats.len();
    let mut values = vec![0.0f64; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for j in 0..=i {
            row[j] = intersect(&feats[i], &feats[j]) as f64;
        }
    });
    for i in 0..n {
        for j in (i + 1)..n {
            values[i * n + j] = values[j * n + i];
        }
    }
    KernelMatrix::square(ids, values)
}

/// HISK block between two document sets (typically test rows x train columns).
pub fn compute_hisk_cross(
    row_ids: Vec<String>,
    row_docs: &[String],
    col_ids: Vec<String>,
    col_docs: &[String],
    range: &NgramRange,
) -> Result<CrossKernel> {
    if row_ids.len() != row_docs.len() || col_ids.len() != col_docs.len() {
        return Err(Error::DimMismatch {
            expected: row_docs.len() + col_docs.len(),
            got: row_ids.len() + col_ids.len(),
        });
    }
    let refs: Vec<&str> = row_docs.iter().chain(col_docs).map(String::as_str).collect();
    let feats = featurize(&refs, range);
    let (rows, cols) = feats.split_at(row_docs.len());
    let c = cols.len();
    let mut values = vec![0.0f64; rows.len() * c];
    if c > 0 {
        values.par_chunks_mut(c).enumerate().for_each(|(i, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                *out = intersect(&rows[i], &cols[j]) as f64;
            }
        });
    }
    Ok(CrossKernel {
        matrix: KernelMatrix::new(row_ids, col_ids, values)?,
        row_self: rows.iter().map(|f| self_similarity(f) as f64).collect(),
        col_self: cols.iter().map(|f| self_similarity(f) as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: for every pair of equal windows (p in x, q in y) that has
    /// not been matched yet, match greedily. Equivalent to sum of mins.
    fn brute_force(x: &str, y: &str, lengths: &[usize]) -> u64 {
        let xc: Vec<char> = x.chars().collect();
        let yc: Vec<char> = y.chars().collect();
        let mut total = 0;
        for &n in lengths {
            if xc.len() < n || yc.len() < n {
                continue;
            }
            let mut used = vec![false; yc.len() - n + 1];
            for p in 0..=xc.len() - n {
                for q in 0..=yc.len() - n {
                    if !used[q] && xc[p..p + n] == yc[q..q + n] {
                        used[q] = true;
                        total += 1;
                        break;
                    }
                }
            }
        }
        total
    }

    fn range(v: &[usize]) -> NgramRange {
        NgramRange::new(v.to_vec()).unwrap()
    }

    #[test]
    fn extract_examples() {
        let h = extract_ngrams("abab", 2);
        assert_eq!(h.len(), 2);
        assert_eq!((h.get("ab"), h.get("ba")), (2, 1));
        assert!(extract_ngrams("abc", 5).is_empty());
        assert_eq!(extract_ngrams("aaaa", 1).get("a"), 4);
        assert_eq!(extract_ngrams("șăț", 2).get("ăț"), 1);
    }

    #[test]
    fn hisk_examples() {
        assert_eq!(hisk_value("abc", "abc", &range(&[2])), 2);
        assert_eq!(brute_force("abab", "abba", &[2]), 2);
        assert_eq!(hisk_value("abab", "abba", &range(&[2])), 2);
        assert_eq!(hisk_value("xxxx", "yyyy", &range(&[2, 3])), 0);
    }

    #[test]
    fn matrix_examples() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let k = compute_hisk_matrix(ids.clone(), &["ab".into(), "ab".into()], &range(&[2])).unwrap();
        assert_eq!(k.values(), [1.0, 1.0, 1.0, 1.0]);
        let k = compute_hisk_matrix(ids, &["abab".into(), "abba".into()], &range(&[2])).unwrap();
        assert_eq!(k.values(), [3.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_matches_square() {
        let docs: Vec<String> = ["ana are mere", "mere rele", "are ana", "x"].iter().map(|s| s.to_string()).collect();
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let r = NgramRange::default();
        let full = compute_hisk_matrix(ids.clone(), &docs, &r).unwrap();
        let cross = compute_hisk_cross(ids[..2].to_vec(), &docs[..2], ids[2..].to_vec(), &docs[2..], &r).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cross.matrix.get(i, j), full.get(i, j + 2));
            }
            assert_eq!(cross.row_self[i], full.get(i, i));
        }
        assert_eq!(cross.col_self[1], 0.0);
    }

    #[test]
    fn range_parsing() {
        assert_eq!(NgramRange::parse("5, 3,4,3").unwrap().lengths(), [3, 4, 5]);
        assert!(NgramRange::parse("0,1").is_err());
        assert!(NgramRange::parse("").is_err());
    }

    proptest! {
        #[test]
        fn histogram_total_matches_window_count(s in "[abcd ]{0,50}", n in 1usize..6) {
            let h = extract_ngrams(&s, n);
            let len = s.chars().count();
            prop_assert_eq!(h.total(), len.saturating_sub(n - 1) as u64);
            prop_assert!(h.counts().iter().all(|(g, &c)| g.chars().count() == n && c >= 1));
        }

        #[test]
        fn hisk_equals_brute_force(x in "[a-h]{0,60}", y in "[a-h]{0,60}", n in 1usize..6) {
            prop_assert_eq!(hisk_value(&x, &y, &range(&[n])), brute_force(&x, &y, &[n]));
        }

        #[test]
        fn min_property(x in "[abc]{0,40}", y in "[abc]{0,40}") {
            let r = NgramRange::default();
            let kxy = hisk_value(&x, &y, &r);
            prop_assert!(kxy <= hisk_value(&x, &x, &r).min(hisk_value(&y, &y, &r)));
            prop_assert_eq!(kxy, hisk_value(&y, &x, &r));
        }
    }
}
