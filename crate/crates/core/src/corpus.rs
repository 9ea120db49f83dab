//! Labeled review corpora: ingestion, polarity labels, text preprocessing,
//! stratified splits and word statistics.
//!
//! Corpora are stored as JSONL, one review per line:
//!
//! ```text
//! {"id": "r1", "text": "Foarte bun!", "stars": 5}
//! {"id": "r2", "text": "Nu recomand.", "label": "negative"}
//! {"id": "d7", "text": "...", "label": 3}
//! ```
//!
//! `label` is optional when `stars` is present and derived from it.
//! Three-star reviews are neutral: they are skipped at load time and counted
//! in the [`LoadReport`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_general_category::get_general_category;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a star rating to a polarity: 4–5 stars are positive, 1–2 negative.
pub fn label_from_stars(stars: i64) -> Result<Polarity> {
    match stars {
        4 | 5 => Ok(Polarity::Positive),
        1 | 2 => Ok(Polarity::Negative),
        3 => Err(Error::NeutralExcluded),
        other => Err(Error::InvalidStars(other)),
    }
}

/// Lowercased tokens of a text with punctuation and symbols removed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces; this is the document string the
    /// string kernels operate on.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

/// Whitespace and every character of Unicode category P* or S* ends a token.
pub fn is_separator(c: char) -> bool {
    if c.is_whitespace() {
        return true;
    }
    matches!(
        get_general_category(c).abbreviation().as_bytes()[0],
        b'P' | b'S'
    )
}

/// Lowercases `text` and splits it into maximal runs of non-separator
/// characters. Digits and diacritics are kept.
pub fn preprocess(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_separator(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenSeq(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Review {
    pub id: String,
    pub text: String,
    pub stars: Option<u8>,
    pub label: String,
}

/// An ordered, immutable collection of reviews with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    reviews: Vec<Review>,
    label_set: Vec<String>,
}

/// Diagnostics collected while loading a corpus file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub neutral_skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Scalar {
    Str(String),
    Int(i64),
}

impl Scalar {
    fn into_string(self) -> String {
        match self {
            Scalar::Str(s) => s,
            Scalar::Int(i) => i.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReviewRecord {
    id: Scalar,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stars: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Scalar>,
}

fn sort_labels(labels: &mut Vec<String>) {
    let numeric: Option<Vec<i64>> = labels.iter().map(|l| l.parse().ok()).collect();
    match numeric {
        Some(_) => labels.sort_by_key(|l| l.parse::<i64>().unwrap_or_default()),
        None => labels.sort(),
    }
}

impl Corpus {
    /// Builds a corpus, checking id uniqueness and non-empty text. The label
    /// set is sorted (numerically when every label is an integer).
    pub fn new(reviews: Vec<Review>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(reviews.len());
        let mut labels = Vec::new();
        for r in &reviews {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.text.trim().is_empty() {
                return Err(Error::EmptyText(r.id.clone()));
            }
            if let Some(stars) = r.stars {
                let expected = label_from_stars(stars as i64)?;
                if expected.as_str() != r.label {
                    return Err(Error::LabelMismatch {
                        id: r.id.clone(),
                        label: r.label.clone(),
                        stars,
                    });
                }
            }
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
        sort_labels(&mut labels);
        Ok(Corpus {
            reviews,
            label_set: labels,
        })
    }

    pub fn reviews(&self) -> &[Review] {
        &self.reviews
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.reviews.iter().map(|r| r.id.clone()).collect()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Class index of every review, in corpus order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.reviews
            .iter()
            .map(|r| self.label_index(&r.label).expect("label in label_set"))
            .collect()
    }

    /// Space-joined preprocessed text of every review.
    pub fn documents(&self) -> Vec<String> {
        self.reviews.iter().map(|r| preprocess(&r.text).joined()).collect()
    }

    /// Concatenates corpora; ids must stay unique.
    pub fn concat(parts: &[&Corpus]) -> Result<Corpus> {
        Corpus::new(
            parts
                .iter()
                .flat_map(|c| c.reviews.iter().cloned())
                .collect(),
        )
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<(Corpus, LoadReport)> {
        let mut report = LoadReport::default();
        let mut reviews = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReviewRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            let id = rec.id.into_string();
            let stars = match rec.stars {
                Some(s) => match label_from_stars(s) {
                    Ok(_) => Some(s as u8),
                    Err(Error::NeutralExcluded) => {
                        report.neutral_skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                },
                None => None,
            };
            let label = match (rec.label, stars) {
                (Some(l), _) => l.into_string(),
                (None, Some(s)) => label_from_stars(s as i64)?.as_str().to_string(),
                (None, None) => return Err(Error::MissingLabel(id)),
            };
            reviews.push(Review {
                id,
                text: rec.text,
                stars,
                label,
            });
        }
        report.loaded = reviews.len();
        Ok((Corpus::new(reviews)?, report))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Corpus, LoadReport)> {
        let file = std::fs::File::open(path)?;
        Corpus::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for r in &self.reviews {
            let rec = ReviewRecord {
                id: Scalar::Str(r.id.clone()),
                text: r.text.clone(),
                stars: r.stars.map(i64::from),
                label: Some(Scalar::Str(r.label.clone())),
            };
            serde_json::to_writer(&mut writer, &rec)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Converts the released LaRoSeDa JSON layout
    /// (`{"reviews": [{"index", "title", "content", "starRating"}]}`) into
    /// reviews; the text is the title followed by the content.
    pub fn from_laroseda_json(json: &str) -> Result<(Corpus, LoadReport)> {
        #[derive(Deserialize)]
        struct File {
            reviews: Vec<Entry>,
        }
        #[derive(Deserialize)]
        #[serde(rename_all = "camelCase")]
        struct Entry {
            index: Scalar,
            #[serde(default)]
            title: String,
            content: String,
            star_rating: Scalar,
        }
        let file: File = serde_json::from_str(json)?;
        let mut report = LoadReport::default();
        let mut reviews = Vec::with_capacity(file.reviews.len());
        for e in file.reviews {
            let stars: i64 = e
                .star_rating
                .into_string()
                .trim()
                .parse()
                .map_err(|_| Error::Format("non-numeric starRating".into()))?;
            let label = match label_from_stars(stars) {
                Ok(p) => p,
                Err(Error::NeutralExcluded) => {
                    report.neutral_skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let text = match e.title.trim() {
                "" => e.content,
                title => format!("{title} {}", e.content),
            };
            reviews.push(Review {
                id: e.index.into_string(),
                text,
                stars: Some(stars as u8),
                label: label.as_str().to_string(),
            });
        }
        report.loaded = reviews.len();
        Ok((Corpus::new(reviews)?, report))
    }

    fn subset(&self, mut indices: Vec<usize>) -> Corpus {
        indices.sort_unstable();
        let reviews = indices.iter().map(|&i| self.reviews[i].clone()).collect();
        let mut c = Corpus {
            reviews,
            label_set: Vec::new(),
        };
        let mut labels: Vec<String> = Vec::new();
        for r in &c.reviews {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
        sort_labels(&mut labels);
        c.label_set = labels;
        c
    }
}

/// Stratified train/test split. Each label is shuffled independently with a
/// seeded ChaCha stream; `floor(n * (1 - train_fraction))` of its samples go
/// to the test part. Both parts keep the original corpus order.
pub fn split_train_test(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut members) in members_by_label(corpus) {
        if members.len() < 2 {
            return Err(Error::StratificationImpossible(format!(
                "label {label:?} has {} sample(s)",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        // The epsilon keeps exact products such as 7500 * 0.2 from flooring to 1499.
        let n_test = (members.len() as f64 * (1.0 - train_fraction) + 1e-9).floor() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    Ok((corpus.subset(train), corpus.subset(test)))
}

/// Indices of each label's reviews, in label-set order.
pub(crate) fn members_by_label(corpus: &Corpus) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = corpus
        .label_set
        .iter()
        .map(|l| (l.clone(), Vec::new()))
        .collect();
    for (i, idx) in corpus.label_indices().into_iter().enumerate() {
        groups[idx].1.push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelStats {
    pub label: String,
    pub samples: usize,
    pub words: usize,
    /// Fraction of all corpus words that belong to this label.
    pub word_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub samples: usize,
    pub total_words: usize,
    pub mean_words: f64,
    pub per_label: Vec<LabelStats>,
    /// Star rating histogram, keyed by rating; empty for unrated corpora.
    pub stars: BTreeMap<u8, usize>,
}

/// Per-label sample and word counts. Words are tokens of [`preprocess`].
pub fn corpus_stats(corpus: &Corpus) -> StatsReport {
    let mut per_label: Vec<LabelStats> = corpus
        .label_set
        .iter()
        .map(|l| LabelStats {
            label: l.clone(),
            samples: 0,
            words: 0,
            word_share: 0.0,
        })
        .collect();
    let mut stars = BTreeMap::new();
    let mut total_words = 0;
    for r in &corpus.reviews {
        let words = preprocess(&r.text).len();
        let entry = &mut per_label[corpus.label_index(&r.label).expect("known label")];
        entry.samples += 1;
        entry.words += words;
        total_words += words;
        if let Some(s) = r.stars {
            *stars.entry(s).or_insert(0) += 1;
        }
    }
    for l in &mut per_label {
        l.word_share = if total_words == 0 {
            0.0
        } else {
            l.words as f64 / total_words as f64
        };
    }
    let samples = corpus.len();
    StatsReport {
        samples,
        total_words,
        mean_words: if samples == 0 {
            0.0
        } else {
            total_words as f64 / samples as f64
        },
        per_label,
        stars,
    }
}
