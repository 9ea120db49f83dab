//! Word vectors: static embedding tables in word2vec text format, contextual
//! per-token dumps, and a CBOW trainer ([`cbow`]).

pub mod cbow;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

pub use cbow::{train_cbow, CbowConfig, TrainMode, TrainStats};

/// Token -> `dim`-dimensional vector map with a stable vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: Vec<String>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vocab: Vec<String>, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != dim * vocab.len() {
            return Err(Error::Format(format!(
                "{} components for {} tokens of dim {dim}",
                vectors.len(),
                vocab.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite component in vector of {:?}",
                vocab[pos / dim.max(1)]
            )));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::DuplicateToken(tok.clone()));
            }
        }
        Ok(EmbeddingTable {
            dim,
            vocab,
            vectors,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vector(i))
    }

    /// Writes the word2vec text format: a `vocab_size dim` header, then one
    /// `token v1 ... v_dim` line per token with 17 significant digits.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.vocab.len(), self.dim)?;
        for (i, tok) in self.vocab.iter().enumerate() {
            w.write_all(tok.as_bytes())?;
            for v in self.vector(i) {
                write!(w, " {v:.16e}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing header".into()))??;
        let mut parts = header.split_whitespace();
        let mut field = |name: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Format(format!("header: bad {name}")))
        };
        let size = field("vocab_size")?;
        let dim = field("dim")?;
        let mut vocab = Vec::with_capacity(size);
        let mut vectors = Vec::with_capacity(size * dim);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let tok = it.next().expect("non-blank line has a token");
            let before = vectors.len();
            for p in it {
                let v: f64 = p
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad number {p:?}", lineno + 2)))?;
                vectors.push(v);
            }
            if vectors.len() - before != dim {
                return Err(Error::Format(format!(
                    "line {}: {} values, expected {dim}",
                    lineno + 2,
                    vectors.len() - before
                )));
            }
            vocab.push(tok.to_string());
        }
        if vocab.len() != size {
            return Err(Error::Format(format!(
                "header announces {size} tokens, found {}",
                vocab.len()
            )));
        }
        EmbeddingTable::new(dim, vocab, vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_text(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Loads a table in word2vec text format.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::read_text(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// The ordered token vectors of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTokenVectors {
    pub doc_id: String,
    dim: usize,
    data: Vec<f64>,
}

impl DocTokenVectors {
    pub fn new(doc_id: String, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() || dim > 0 && data.len() % dim != 0 {
            return Err(Error::Format(format!(
                "document {doc_id:?}: {} components do not split into dim {dim}",
                data.len()
            )));
        }
        Ok(DocTokenVectors { doc_id, dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Looks up every token; out-of-vocabulary tokens are dropped. Returns the
/// vectors and the number of skipped tokens.
pub fn doc_vectors(doc_id: &str, doc: &TokenSeq, table: &EmbeddingTable) -> (DocTokenVectors, usize) {
    let mut data = Vec::with_capacity(doc.len() * table.dim());
    let mut skipped = 0;
    for tok in doc.tokens() {
        match table.get(tok) {
            Some(v) => data.extend_from_slice(v),
            None => skipped += 1,
        }
    }
    let vectors = DocTokenVectors {
        doc_id: doc_id.to_string(),
        dim: table.dim(),
        data,
    };
    (vectors, skipped)
}

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    doc_id: String,
    vectors: Vec<Vec<f64>>,
}

/// Reads a JSONL dump of `{"doc_id": ..., "vectors": [[...], ...]}` lines.
/// Every vector in the file must have the same dimension.
pub fn read_contextual_dump<R: BufRead>(reader: R) -> Result<Vec<DocTokenVectors>> {
    let mut dim: Option<usize> = None;
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dump line {}: {e}", lineno + 1)))?;
        let mut data = Vec::new();
        for v in &rec.vectors {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(Error::Format(format!(
                    "dump line {}: vector of dim {} where {d} was established",
                    lineno + 1,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("dump line {}: non-finite component", lineno + 1)));
            }
            data.extend_from_slice(v);
        }
        docs.push(DocTokenVectors {
            doc_id: rec.doc_id,
            dim: 0,
            data,
        });
    }
    let dim = dim.unwrap_or(0);
    for d in &mut docs {
        d.dim = dim;
    }
    Ok(docs)
}

pub fn load_contextual_dump(path: impl AsRef<Path>) -> Result<Vec<DocTokenVectors>> {
    read_contextual_dump(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_contextual_dump<W: Write>(docs: &[DocTokenVectors], mut w: W) -> Result<()> {
    for d in docs {
        let rec = DumpRecord {
            doc_id: d.doc_id.clone(),
            vectors: d.iter().filter(|_| d.dim > 0).map(<[f64]>::to_vec).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_contextual_dump(docs: &[DocTokenVectors], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_contextual_dump(docs, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Picks the dump entry of every requested document, in request order.
pub fn join_dump(dump: &[DocTokenVectors], ids: &[String]) -> Result<Vec<DocTokenVectors>> {
    let by_id: HashMap<&str, &DocTokenVectors> = dump.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|d| (*d).clone())
                .ok_or_else(|| Error::MissingDocument(id.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::preprocess;
    use proptest::prelude::*;

    #[test]
    fn read_small_table() {
        let t = EmbeddingTable::read_text("2 3\na 1 0 0\nb 0 1 0".as_bytes()).unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get("a").unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(t.get("b").unwrap(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn table_format_errors() {
        assert!(matches!(
            EmbeddingTable::read_text("2 3\na 1 0 0\nb 0 1".as_bytes()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            EmbeddingTable::read_text("3 1\na 1\nb 0".as_bytes()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            EmbeddingTable::read_text("2 1\na 1\na 0".as_bytes()),
            Err(Error::DuplicateToken(_))
        ));
        assert!(matches!(
            EmbeddingTable::read_text("1 1\na NaN".as_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wide_table_loads() {
        let mut text = String::from("1 768\nbun");
        for i in 0..768 {
            text.push_str(&format!(" {}", i as f64 * 0.001));
        }
        let t = EmbeddingTable::read_text(text.as_bytes()).unwrap();
        assert_eq!(t.dim(), 768);
        assert_eq!(t.get("bun").unwrap().len(), 768);
    }

    #[test]
    fn lookup_skips_oov() {
        let t = EmbeddingTable::new(2, vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (v, skipped) = doc_vectors("d", &preprocess("a b"), &t);
        assert_eq!((v.len(), skipped), (2, 0));
        let (v, skipped) = doc_vectors("d", &preprocess("a zzz b"), &t);
        assert_eq!((v.len(), skipped), (2, 1));
        assert_eq!(v.vector(1), [3.0, 4.0]);
        let (v, skipped) = doc_vectors("d", &preprocess(""), &t);
        assert_eq!((v.len(), skipped), (0, 0));
    }

    #[test]
    fn contextual_dump() {
        let text = concat!(
            "{\"doc_id\":\"x\",\"vectors\":[[1,2],[3,4]]}\n",
            "{\"doc_id\":\"y\",\"vectors\":[[1,2],[0.5,4],[1,1]]}\n",
            "{\"doc_id\":\"z\",\"vectors\":[]}\n",
        );
        let docs = read_contextual_dump(text.as_bytes()).unwrap();
        assert_eq!(docs.iter().map(|d| d.len()).collect::<Vec<_>>(), [2, 3, 0]);
        assert_eq!(docs[2].dim(), 2);
        // Same position, different context: kept distinct.
        assert_ne!(docs[0].vector(1), docs[1].vector(1));

        let mut buf = Vec::new();
        write_contextual_dump(&docs, &mut buf).unwrap();
        assert_eq!(read_contextual_dump(buf.as_slice()).unwrap(), docs);

        let bad = "{\"doc_id\":\"x\",\"vectors\":[[1,2]]}\n{\"doc_id\":\"y\",\"vectors\":[[1,2,3]]}\n";
        assert!(matches!(read_contextual_dump(bad.as_bytes()), Err(Error::Format(_))));

        let joined = join_dump(&docs, &["z".into(), "x".into()]).unwrap();
        assert_eq!(joined[1].doc_id, "x");
        assert!(matches!(join_dump(&docs, &["w".into()]), Err(Error::MissingDocument(_))));
    }

    proptest! {
        #[test]
        fn text_format_round_trips_bit_exactly(vals in prop::collection::vec(-1e3f64..1e3, 12)) {
            let vocab = vec!["unu".to_string(), "doi".into(), "trei".into()];
            let t = EmbeddingTable::new(4, vocab, vals).unwrap();
            let mut buf = Vec::new();
            t.write_text(&mut buf).unwrap();
            let back = EmbeddingTable::read_text(buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
