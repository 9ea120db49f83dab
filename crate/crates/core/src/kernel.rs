//! Dense kernel matrices in dual form, their normalization, and the binary
//! cache format.
//!
//! Cache layout (little-endian):
//!
//! ```text
//! "KMAT1" | u32 rows | u32 cols | rows*cols f64, row-major | JSON trailer
//! ```
//!
//! The trailer is `{"row_ids": [...], "col_ids": [...]}` and runs to EOF.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KMAT_MAGIC: &[u8; 5] = b"KMAT1";

/// A rows x cols similarity block with sample-ID manifests. Square kernels
/// have `row_ids == col_ids`; cross blocks (test x train) do not.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

impl KernelMatrix {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != row_ids.len() * col_ids.len() {
            return Err(Error::Format(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        Ok(KernelMatrix {
            row_ids,
            col_ids,
            values,
        })
    }

    pub fn square(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(ids.clone(), ids, values)
    }

    pub fn identity(ids: Vec<String>) -> Self {
        let n = ids.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        KernelMatrix {
            row_ids: ids.clone(),
            col_ids: ids,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn is_square(&self) -> bool {
        self.row_ids == self.col_ids
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// Extracts the block at the given row and column indices.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> KernelMatrix {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            let r = self.row(i);
            values.extend(cols.iter().map(|&j| r[j]));
        }
        KernelMatrix {
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            col_ids: cols.iter().map(|&j| self.col_ids[j].clone()).collect(),
            values,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let rows = u32::try_from(self.rows()).map_err(|_| Error::Format("too many rows".into()))?;
        let cols = u32::try_from(self.cols()).map_err(|_| Error::Format("too many cols".into()))?;
        w.write_all(KMAT_MAGIC)?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&cols.to_le_bytes())?;
        write_f64s(&mut w, &self.values)?;
        let manifest = Manifest {
            row_ids: self.row_ids.clone(),
            col_ids: self.col_ids.clone(),
        };
        serde_json::to_writer(&mut w, &manifest)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let (rows, cols, values) = read_block(&mut r)?;
        let mut trailer = Vec::new();
        r.read_to_end(&mut trailer)?;
        let manifest: Manifest = serde_json::from_slice(&trailer)
            .map_err(|e| Error::Format(format!("kernel trailer: {e}")))?;
        if manifest.row_ids.len() != rows || manifest.col_ids.len() != cols {
            return Err(Error::Format(format!(
                "manifest sizes {}x{} disagree with header {rows}x{cols}",
                manifest.row_ids.len(),
                manifest.col_ids.len()
            )));
        }
        KernelMatrix::new(manifest.row_ids, manifest.col_ids, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KernelMatrix::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in values.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads the magic, the two u32 dimensions and the f64 payload.
pub(crate) fn read_block<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != KMAT_MAGIC {
        return Err(Error::Format("bad magic, expected KMAT1".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((rows, cols, values))
}

pub(crate) fn write_block<W: Write>(w: &mut W, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    w.write_all(KMAT_MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    write_f64s(w, values)
}

/// A raw rows x cols kernel block together with the self-similarities
/// needed to normalize it.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossKernel {
    pub matrix: KernelMatrix,
    pub row_self: Vec<f64>,
    pub col_self: Vec<f64>,
}

impl CrossKernel {
    pub fn normalized(&self) -> Result<KernelMatrix> {
        normalize_cross(&self.matrix, &self.row_self, &self.col_self)
    }
}

/// Cosine normalization `K'_ij = K_ij / sqrt(K_ii K_jj)` of a square kernel.
pub fn normalize_kernel(k: &KernelMatrix) -> Result<KernelMatrix> {
    if !k.is_square() {
        return Err(Error::ManifestMismatch("normalize_kernel needs a square kernel".into()));
    }
    let diag = k.diagonal();
    if let Some((index, &value)) = diag.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(Error::DegenerateDiagonal { index, value });
    }
    Ok(scale_by_diagonals(k, &diag, &diag, true))
}

/// Normalization that tolerates zero self-similarity: such samples get unit
/// self-similarity and zero similarity to everything else.
pub fn normalize_kernel_lenient(k: &KernelMatrix) -> Result<KernelMatrix> {
    if !k.is_square() {
        return Err(Error::ManifestMismatch("normalize_kernel needs a square kernel".into()));
    }
    let diag = k.diagonal();
    if let Some((index, &value)) = diag.iter().enumerate().find(|(_, &d)| d < 0.0 || d.is_nan()) {
        return Err(Error::DegenerateDiagonal { index, value });
    }
    Ok(scale_by_diagonals(k, &diag, &diag, true))
}

/// Normalizes a cross block given the self-similarities of its row samples
/// and of its column samples. Zero self-similarities map to zero entries.
pub fn normalize_cross(k: &KernelMatrix, row_self: &[f64], col_self: &[f64]) -> Result<KernelMatrix> {
    if row_self.len() != k.rows() || col_self.len() != k.cols() {
        return Err(Error::DimMismatch {
            expected: k.rows() + k.cols(),
            got: row_self.len() + col_self.len(),
        });
    }
    for (index, &value) in row_self.iter().chain(col_self).enumerate() {
        if value < 0.0 || value.is_nan() {
            return Err(Error::DegenerateDiagonal { index, value });
        }
    }
    Ok(scale_by_diagonals(k, row_self, col_self, false))
}

fn scale_by_diagonals(k: &KernelMatrix, row_self: &[f64], col_self: &[f64], unit_diagonal: bool) -> KernelMatrix {
    let cols = k.cols();
    let mut values = Vec::with_capacity(k.values.len());
    for (i, rs) in row_self.iter().enumerate() {
        let row = k.row(i);
        for (j, cs) in col_self.iter().enumerate() {
            // One square root of the product keeps identical samples at
            // exactly 1 for integer-valued kernels.
            let v = if unit_diagonal && i == j {
                1.0
            } else if *rs == 0.0 || *cs == 0.0 {
                0.0
            } else {
                row[j] / (rs * cs).sqrt()
            };
            values.push(v);
        }
    }
    debug_assert_eq!(values.len(), k.rows() * cols);
    KernelMatrix {
        row_ids: k.row_ids.clone(),
        col_ids: k.col_ids.clone(),
        values,
    }
}
