//! Continuous bag-of-words word2vec with negative sampling.
//!
//! For every position the mean of the context input vectors `h` scores the
//! center word against sampled negatives:
//!
//! ```text
//! L = -ln s(u_target . h) - sum_k ln s(-u_k . h)
//! ```
//!
//! Negatives are drawn from the unigram distribution raised to 0.75. The
//! learning rate decays linearly from `initial_lr` to `initial_lr / 100`
//! over all updates.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingTable;
use crate::corpus::{preprocess, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One thread, bit-reproducible for a given seed.
    Deterministic,
    /// Lock-free asynchronous updates from several threads. Results vary
    /// between runs.
    Hogwild { workers: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub min_count: u64,
    pub subsample_threshold: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 300,
            window: 5,
            negatives: 5,
            epochs: 5,
            initial_lr: 0.025,
            min_count: 5,
            subsample_threshold: 1e-3,
            seed: 1,
            mode: TrainMode::Deterministic,
        }
    }
}

impl CbowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("cbow: {m}")));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.negatives == 0 {
            return bad("negatives must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.initial_lr > 0.0) {
            return bad("initial_lr must be > 0");
        }
        if let TrainMode::Hogwild { workers: 0 } = self.mode {
            return bad("workers must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainStats {
    /// Mean negative-sampling loss per example, one entry per epoch.
    pub epoch_loss: Vec<f64>,
    pub examples: u64,
    pub vocab_size: usize,
}

/// One training example: the context words predict `target`, contrasted
/// against `negatives`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbowExample {
    pub context: Vec<u32>,
    pub target: u32,
    pub negatives: Vec<u32>,
}

/// Dense input (context) and output (scoring) matrices, row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct CbowParams {
    pub dim: usize,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln s(x)`, stable for large |x|.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss of one example and its gradients with respect to `h` and to each
/// output row (`outputs[0]` is the target, the rest are negatives).
fn example_loss_grad(h: &[f64], outputs: &[&[f64]], grad_h: &mut [f64], grad_out: &mut [f64]) -> f64 {
    let dim = h.len();
    grad_h.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (t, out) in outputs.iter().enumerate() {
        let s = dot(h, out);
        let (l, g) = if t == 0 {
            (neg_log_sigmoid(s), sigmoid(s) - 1.0)
        } else {
            (neg_log_sigmoid(-s), sigmoid(s))
        };
        loss += l;
        for (gh, o) in grad_h.iter_mut().zip(out.iter()) {
            *gh += g * o;
        }
        for (go, x) in grad_out[t * dim..(t + 1) * dim].iter_mut().zip(h) {
            *go = g * x;
        }
    }
    loss
}

/// Summed loss of a batch and its exact gradients with respect to the input
/// and output matrices (same layout as `params`).
pub fn batch_loss_and_grad(params: &CbowParams, batch: &[CbowExample]) -> (f64, Vec<f64>, Vec<f64>) {
    let dim = params.dim;
    let row = |m: &[f64], i: u32| -> Vec<f64> { m[i as usize * dim..(i as usize + 1) * dim].to_vec() };
    let mut grad_in = vec![0.0; params.input.len()];
    let mut grad_out = vec![0.0; params.output.len()];
    let mut total = 0.0;
    let mut h = vec![0.0; dim];
    let mut gh = vec![0.0; dim];
    for ex in batch {
        mean_rows(&ex.context, |i| row(&params.input, i), &mut h);
        let ids: Vec<u32> = std::iter::once(ex.target).chain(ex.negatives.iter().copied()).collect();
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| row(&params.output, i)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut go = vec![0.0; ids.len() * dim];
        total += example_loss_grad(&h, &refs, &mut gh, &mut go);
        for (t, &id) in ids.iter().enumerate() {
            let dst = &mut grad_out[id as usize * dim..(id as usize + 1) * dim];
            for (d, g) in dst.iter_mut().zip(&go[t * dim..(t + 1) * dim]) {
                *d += g;
            }
        }
        let scale = 1.0 / ex.context.len() as f64;
        for &c in &ex.context {
            let dst = &mut grad_in[c as usize * dim..(c as usize + 1) * dim];
            for (d, g) in dst.iter_mut().zip(&gh) {
                *d += g * scale;
            }
        }
    }
    (total, grad_in, grad_out)
}

fn mean_rows<F, R>(ids: &[u32], mut row: F, h: &mut [f64])
where
    F: FnMut(u32) -> R,
    R: AsRef<[f64]>,
{
    h.iter_mut().for_each(|x| *x = 0.0);
    for &c in ids {
        for (a, b) in h.iter_mut().zip(row(c).as_ref()) {
            *a += b;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    h.iter_mut().for_each(|x| *x *= inv);
}

/// Row-major f64 matrix that several threads may update without locks.
/// Relaxed loads and stores: concurrent writers may overwrite each other,
/// which asynchronous SGD tolerates.
struct SharedRows {
    dim: usize,
    data: Vec<AtomicU64>,
}

impl SharedRows {
    fn from_values(dim: usize, values: Vec<f64>) -> Self {
        SharedRows {
            dim,
            data: values.into_iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        }
    }

    fn read(&self, r: u32, out: &mut [f64]) {
        let base = r as usize * self.dim;
        for (o, a) in out.iter_mut().zip(&self.data[base..base + self.dim]) {
            *o = f64::from_bits(a.load(Ordering::Relaxed));
        }
    }

    fn add_scaled(&self, r: u32, v: &[f64], scale: f64) {
        let base = r as usize * self.dim;
        for (a, x) in self.data[base..base + self.dim].iter().zip(v) {
            let cur = f64::from_bits(a.load(Ordering::Relaxed));
            a.store((cur + scale * x).to_bits(), Ordering::Relaxed);
        }
    }

    fn into_values(self) -> Vec<f64> {
        self.data.into_iter().map(|a| f64::from_bits(a.into_inner())).collect()
    }
}

struct Vocab {
    words: Vec<String>,
    counts: Vec<u64>,
}

/// Words with at least `min_count` occurrences, most frequent first (ties
/// broken lexicographically).
fn build_vocab(sentences: &[Vec<String>], min_count: u64) -> Vocab {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for w in s {
            *counts.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab {
        words: entries.iter().map(|(w, _)| w.to_string()).collect(),
        counts: entries.iter().map(|&(_, c)| c).collect(),
    }
}

struct Trainer<'a> {
    config: &'a CbowConfig,
    input: SharedRows,
    output: SharedRows,
    keep_prob: Vec<f64>,
    negatives: WeightedIndex<f64>,
    processed: AtomicU64,
    total_words: u64,
}

impl Trainer<'_> {
    fn learning_rate(&self) -> f64 {
        let lr0 = self.config.initial_lr;
        let progress = self.processed.load(Ordering::Relaxed) as f64 / self.total_words.max(1) as f64;
        (lr0 - (lr0 - lr0 / 100.0) * progress.min(1.0)).max(lr0 / 100.0)
    }

    /// One pass over `sentences`; returns (summed loss, examples).
    fn run(&self, sentences: &[Vec<u32>], rng: &mut ChaCha8Rng) -> (f64, u64) {
        let dim = self.config.dim;
        let mut h = vec![0.0; dim];
        let mut gh = vec![0.0; dim];
        let mut row = vec![0.0; dim];
        let mut outs: Vec<f64> = Vec::new();
        let mut go: Vec<f64> = Vec::new();
        let mut ids: Vec<u32> = Vec::new();
        let mut context: Vec<u32> = Vec::new();
        let mut kept: Vec<u32> = Vec::new();
        let (mut loss, mut examples) = (0.0, 0u64);

        for sentence in sentences {
            kept.clear();
            kept.extend(
                sentence
                    .iter()
                    .copied()
                    .filter(|&w| self.keep_prob[w as usize] >= 1.0 || rng.random::<f64>() < self.keep_prob[w as usize]),
            );
            let lr = self.learning_rate();
            for pos in 0..kept.len() {
                let reach = self.config.window - rng.random_range(0..self.config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(kept.len() - 1);
                context.clear();
                context.extend((lo..=hi).filter(|&p| p != pos).map(|p| kept[p]));
                if context.is_empty() {
                    continue;
                }
                let target = kept[pos];
                ids.clear();
                ids.push(target);
                for _ in 0..self.config.negatives {
                    let neg = self.negatives.sample(rng) as u32;
                    if neg != target {
                        ids.push(neg);
                    }
                }

                h.iter_mut().for_each(|x| *x = 0.0);
                for &c in &context {
                    self.input.read(c, &mut row);
                    for (a, b) in h.iter_mut().zip(&row) {
                        *a += b;
                    }
                }
                let inv = 1.0 / context.len() as f64;
                h.iter_mut().for_each(|x| *x *= inv);

                outs.resize(ids.len() * dim, 0.0);
                go.resize(ids.len() * dim, 0.0);
                for (t, &id) in ids.iter().enumerate() {
                    self.output.read(id, &mut outs[t * dim..(t + 1) * dim]);
                }
                let refs: Vec<&[f64]> = outs.chunks_exact(dim).collect();
                loss += example_loss_grad(&h, &refs, &mut gh, &mut go);
                examples += 1;

                for (t, &id) in ids.iter().enumerate() {
                    self.output.add_scaled(id, &go[t * dim..(t + 1) * dim], -lr);
                }
                for &c in &context {
                    self.input.add_scaled(c, &gh, -lr * inv);
                }
            }
            self.processed.fetch_add(sentence.len() as u64, Ordering::Relaxed);
        }
        (loss, examples)
    }
}

/// Trains CBOW on the preprocessed token stream of `corpus`.
pub fn train_cbow(corpus: &Corpus, config: &CbowConfig) -> Result<(EmbeddingTable, TrainStats)> {
    let sentences: Vec<Vec<String>> = corpus
        .reviews()
        .iter()
        .map(|r| preprocess(&r.text).into_inner())
        .collect();
    train_cbow_sentences(&sentences, config)
}

/// Trains CBOW on already tokenized sentences.
pub fn train_cbow_sentences(sentences: &[Vec<String>], config: &CbowConfig) -> Result<(EmbeddingTable, TrainStats)> {
    config.validate()?;
    let vocab = build_vocab(sentences, config.min_count);
    if vocab.words.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let index: HashMap<&str, u32> = vocab
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i as u32))
        .collect();
    let encoded: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|w| index.get(w.as_str()).copied()).collect())
        .collect();
    let corpus_words: u64 = vocab.counts.iter().sum();

    let t = config.subsample_threshold * corpus_words as f64;
    let keep_prob = vocab
        .counts
        .iter()
        .map(|&c| {
            if config.subsample_threshold <= 0.0 {
                1.0
            } else {
                let f = c as f64;
                ((f / t).sqrt() + 1.0) * t / f
            }
        })
        .collect();
    let negatives = WeightedIndex::new(vocab.counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::InvalidConfig(format!("negative sampling table: {e}")))?;

    let dim = config.dim;
    let v = vocab.words.len();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input: Vec<f64> = (0..v * dim)
        .map(|_| (init_rng.random::<f64>() - 0.5) / dim as f64)
        .collect();

    let trainer = Trainer {
        config,
        input: SharedRows::from_values(dim, input),
        output: SharedRows::from_values(dim, vec![0.0; v * dim]),
        keep_prob,
        negatives,
        processed: AtomicU64::new(0),
        total_words: corpus_words * config.epochs as u64,
    };

    let workers = match config.mode {
        TrainMode::Deterministic => 1,
        TrainMode::Hogwild { workers } => workers.min(encoded.len().max(1)),
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..workers)
        .map(|w| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(w as u64 + 1);
            r
        })
        .collect();
    let chunk = encoded.len().div_ceil(workers).max(1);

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut examples = 0;
    for _ in 0..config.epochs {
        let results: Vec<(f64, u64)> = if workers == 1 {
            vec![trainer.run(&encoded, &mut rngs[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = encoded
                    .chunks(chunk)
                    .zip(rngs.iter_mut())
                    .map(|(part, rng)| {
                        let trainer = &trainer;
                        s.spawn(move || trainer.run(part, rng))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("cbow worker panicked")).collect()
            })
        };
        let (loss, n) = results.iter().fold((0.0, 0), |acc, r| (acc.0 + r.0, acc.1 + r.1));
        examples += n;
        epoch_loss.push(if n == 0 { 0.0 } else { loss / n as f64 });
    }

    let vectors = trainer.input.into_values();
    let table = EmbeddingTable::new(dim, vocab.words, vectors)?;
    Ok((
        table,
        TrainStats {
            epoch_loss,
            examples,
            vocab_size: v,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    fn synthetic() -> Vec<Vec<String>> {
        // "hot" and "warm" share every context; "cold" never does.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let warm_ctx = ["sunny", "summer", "beach", "sweat", "desert", "sand"];
        let cold_ctx = ["snow", "winter", "ice", "frost", "glacier", "sleet"];
        let mut out = Vec::new();
        for i in 0..600 {
            let (ctx, center) = match i % 3 {
                0 => (&warm_ctx, "hot"),
                1 => (&warm_ctx, "warm"),
                _ => (&cold_ctx, "cold"),
            };
            let mut s: Vec<String> = (0..3).map(|_| ctx[rng.random_range(0..6)].to_string()).collect();
            s.push(center.to_string());
            s.extend((0..3).map(|_| ctx[rng.random_range(0..6)].to_string()));
            out.push(s);
        }
        out
    }

    fn small_config() -> CbowConfig {
        CbowConfig {
            dim: 16,
            window: 3,
            epochs: 10,
            min_count: 1,
            subsample_threshold: 0.0,
            seed: 4,
            ..CbowConfig::default()
        }
    }

    #[test]
    fn shared_contexts_give_closer_vectors() {
        let (table, stats) = train_cbow_sentences(&synthetic(), &small_config()).unwrap();
        let hot = table.get("hot").unwrap();
        let warm = table.get("warm").unwrap();
        let cold = table.get("cold").unwrap();
        assert!(cosine(hot, warm) > cosine(hot, cold), "{} vs {}", cosine(hot, warm), cosine(hot, cold));
        assert!(stats.epoch_loss.last().unwrap() < &stats.epoch_loss[0]);
    }

    #[test]
    fn dimension_is_respected() {
        let config = CbowConfig {
            dim: 300,
            epochs: 1,
            min_count: 1,
            ..CbowConfig::default()
        };
        let (table, _) = train_cbow_sentences(&synthetic()[..20], &config).unwrap();
        assert!(table.vocab().iter().all(|w| table.get(w).unwrap().len() == 300));
    }

    #[test]
    fn empty_vocabulary() {
        let s = vec![vec!["doar".to_string(), "o".into(), "propozitie".into()]];
        assert!(matches!(
            train_cbow_sentences(&s, &CbowConfig::default()),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn deterministic_mode_is_reproducible() {
        let a = train_cbow_sentences(&synthetic(), &small_config()).unwrap();
        let b = train_cbow_sentences(&synthetic(), &small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hogwild_mode_trains() {
        let config = CbowConfig {
            mode: TrainMode::Hogwild { workers: 4 },
            ..small_config()
        };
        let (table, stats) = train_cbow_sentences(&synthetic(), &config).unwrap();
        assert_eq!(table.len(), 15);
        assert!(stats.epoch_loss.last().unwrap() < &stats.epoch_loss[0]);
    }

    #[test]
    fn invalid_config() {
        for bad in [
            CbowConfig { dim: 0, ..CbowConfig::default() },
            CbowConfig { window: 0, ..CbowConfig::default() },
            CbowConfig { negatives: 0, ..CbowConfig::default() },
            CbowConfig { epochs: 0, ..CbowConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (vocab, dim) = (7u32, 5usize);
        let mut params = CbowParams {
            dim,
            input: (0..vocab as usize * dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            output: (0..vocab as usize * dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let batch = vec![
            CbowExample { context: vec![0, 1, 2, 1], target: 3, negatives: vec![4, 5, 4] },
            CbowExample { context: vec![6], target: 0, negatives: vec![1, 2] },
        ];
        let (_, gin, gout) = batch_loss_and_grad(&params, &batch);
        let step = 1e-5;
        for which in 0..2 {
            for i in 0..params.input.len() {
                let m = if which == 0 { &mut params.input } else { &mut params.output };
                let orig = m[i];
                m[i] = orig + step;
                let up = batch_loss_and_grad(&params, &batch).0;
                let m = if which == 0 { &mut params.input } else { &mut params.output };
                m[i] = orig - step;
                let down = batch_loss_and_grad(&params, &batch).0;
                let m = if which == 0 { &mut params.input } else { &mut params.output };
                m[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let analytic = if which == 0 { gin[i] } else { gout[i] };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-4 || (numeric - analytic).abs() < 1e-10, "{which}/{i}: {numeric} vs {analytic}");
            }
        }
    }
}
